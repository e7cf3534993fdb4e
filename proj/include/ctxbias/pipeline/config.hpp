#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctxbias/detector/model.hpp"
#include "ctxbias/detector/train.hpp"
#include "ctxbias/stats/stats.hpp"
#include "ctxbias/synthbench/synthbench.hpp"

namespace ctxbias::pipeline {

struct Paths {
    std::string out_root = "out";
    std::string data_dir() const { return out_root + "/data"; }
    std::string bg_pool_dir() const { return out_root + "/bg_pool"; }
    std::string checkpoint_dir() const { return out_root + "/checkpoint"; }
    std::string features_dir(const std::string& domain) const {
        return out_root + "/features/" + domain;
    }
    std::string experiments_dir() const { return out_root + "/experiments"; }
    std::string report_dir() const { return out_root + "/report"; }
    std::string manifest(const std::string& split) const {
        return data_dir() + "/" + split + "/manifest.json";
    }
};

struct SynthSection {
    int train_images = 500;
    int val_images = 150;
    int bg_pool_images = 64;
    std::string source_domain = "source";
    std::string target_domain = "target";
};

struct ExperimentSection {
    std::string layer = "stage1";
    std::string headline_layer = "stage1";
    int n_trials = 6;
    double trial_fraction = 0.8;
    double score_threshold = 0.25;
    double nms_iou = 0.5;
    double match_iou = 0.5;
    int cam_samples = 8;
    double cam_noise_sigma = 0.1;
    double cam_confidence = 0.85;
    int feature_bin = 9;
    std::vector<int> bins = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> report_bins = {1, 3, 5, 7, 9};
    int hit_bin = 9;
    double min_drop_rate = 0.08;  // reporting floor for significant pairs
    bool holm = false;
    stats::ForcedTest force_test = stats::ForcedTest::none;
    int dump_cams = 4;  // instances whose CAMs are exported (CBT1 + PNG)
};

struct RunConfig {
    std::uint64_t seed = 1;
    int jobs = 2;
    double alpha = 0.05;
    Paths paths;
    synth::SceneSpec scene;           // pinned synthetic benchmark by default
    SynthSection synth;
    det::ModelConfig model;
    det::TrainConfig train;
    std::string select_by_domain;     // checkpoint selection dataset override
    ExperimentSection experiments;

    det::PredictOptions predict_options() const {
        return {experiments.score_threshold, experiments.nms_iou};
    }
};

// The pinned synthetic benchmark: 3 shape classes on 4 textured background
// labels, P(stripes | triangle) = 0.95 planted in both domains, target
// domain shifted by palette swaps and a brightness offset.
RunConfig default_config();

// Load a JSON config file over the defaults; unknown keys are rejected.
RunConfig load_config(const std::string& path);

// Parse the JSON text form (exposed for tests).
RunConfig parse_config_json(const std::string& text);

void write_config(const RunConfig& cfg, const std::string& path);

}  // namespace ctxbias::pipeline
