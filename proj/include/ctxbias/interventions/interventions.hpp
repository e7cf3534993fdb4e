#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctxbias/assoc/feature_store.hpp"
#include "ctxbias/cam/cam.hpp"
#include "ctxbias/core/dataset.hpp"
#include "ctxbias/detector/model.hpp"

namespace ctxbias::interv {

// --- loss of information ----------------------------------------------------

// -log10(max(iou_after, 1e-12)); 1.0 corresponds exactly to iou_after = 0.1,
// so "loss > 1" marks IoU collapsing below 0.1.
double loss_of_information(double iou_after);

inline constexpr double kDropLossThreshold = 1.0;

// --- drop bookkeeping --------------------------------------------------------

enum class DropReason { class_changed, info_loss, rematched };

const char* drop_reason_name(DropReason r);

struct DropEvent {
    std::string image_id;
    int instance_index = 0;
    int fg_class = 0;
    int removed_bg_label = -1;  // set for bg-label removal runs
    int cam_bin = -1;           // set for Q2 cam-bin runs
    DropReason reason = DropReason::info_loss;
    double iou_before = 0.0;
    double iou_after = 0.0;
};

// Per-trial aggregate of one experiment repetition.
struct TrialResult {
    int trial = 0;  // 1-based
    // key = (fg class, bg label) for feature-space runs
    std::map<std::pair<int, int>, int> pair_tp;
    std::map<std::pair<int, int>, int> pair_drops;
    std::optional<double> map50;
};

// --- image-space compositing --------------------------------------------------

// Pixels inside any instance mask come bit-exactly from `image`; all other
// pixels come from bg_image (nearest-resized to the image dims when needed).
// No instances: returns the background (callers may warn).
ImageU8 composite_background(const ImageU8& image,
                             const std::vector<InstanceAnnotation>& annotations,
                             const ImageU8& bg_image);

class BgPool {
public:
    virtual ~BgPool() = default;
    virtual size_t size() const = 0;
    virtual ImageU8 get(size_t index) const = 0;
};

// PNG files of a directory, sorted by filename.
class DirectoryBgPool final : public BgPool {
public:
    explicit DirectoryBgPool(const std::string& dir);
    size_t size() const override { return files_.size(); }
    ImageU8 get(size_t index) const override;

private:
    std::vector<std::string> files_;
};

class VectorBgPool final : public BgPool {
public:
    explicit VectorBgPool(std::vector<ImageU8> images) : images_(std::move(images)) {}
    size_t size() const override { return images_.size(); }
    ImageU8 get(size_t index) const override { return images_.at(index); }

private:
    std::vector<ImageU8> images_;
};

struct Q1ImageResult {
    std::vector<std::string> domains;
    std::vector<std::vector<double>> map_per_trial;  // [domain][trial]
    std::vector<double> mean_map;
    std::vector<double> std_map;
    std::vector<double> baseline_map;  // un-composited evaluation per domain
};

// Background replacement run: fixed random background sequences, shared
// across domains within a trial, mAP@50 mean +- std over trials.
Q1ImageResult run_q1_image_space(const det::ToyDetector& model,
                                 const std::vector<std::pair<DomainId, const Dataset*>>& domains,
                                 const BgPool& pool, int n_trials, std::uint64_t seed, int jobs);

// --- feature-space removal -----------------------------------------------------

struct FeatureSpaceConfig {
    std::string layer = "stage1";  // shallow ablation layer
    int n_trials = 6;
    double trial_fraction = 0.8;  // image subsample per trial
    double match_iou = 0.5;
    det::PredictOptions predict;  // operating point for drop accounting
    cam::SmoothConfig cam;        // feature-extraction CAM settings
    int feature_bin = 9;          // ladder rung whose mask defines X_c
    std::uint64_t seed = 1;
    int jobs = 1;
};

struct BgRemovalOutcome {
    std::vector<assoc::OutcomeRecord> outcomes;
    std::vector<DropEvent> events;
};

// Single-label removal core: standard inference, hooked inference with the
// label's semantic region zeroed at `layer`, and the three-condition drop
// test per prior true positive. Images not containing the label contribute
// nothing.
BgRemovalOutcome run_bg_removal(const det::ToyDetector& model, const Dataset& data, int bg_label,
                                const FeatureSpaceConfig& cfg);

// Full Q1 feature-space experiment over every background label, including
// masked-feature extraction for confident instances and per-trial
// subsampling; the returned store is the on-disk interchange artifact.
struct Q1FeatureResult {
    assoc::FeatureStore store;
    std::vector<DropEvent> events;
    std::vector<TrialResult> trials;
};
Q1FeatureResult run_q1_feature_space(const det::ToyDetector& model, const Dataset& data,
                                     const DomainId& domain, const FeatureSpaceConfig& cfg);

// --- CAM-threshold causality runs ----------------------------------------------

struct Q2Config {
    std::string layer = "stage1";     // ablation layer
    std::vector<int> bins = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    double match_iou = 0.5;
    det::PredictOptions predict;
    cam::SmoothConfig cam;            // confidence floor 0.85
    int hit_bin = 9;                  // rung used for the hit-ratio table
    std::uint64_t seed = 1;
    int jobs = 1;
};

struct Q2HitRow {
    std::string layer;
    int n_assoc = 0, n_noassoc = 0, n_all = 0;
    double fg_assoc = 0.0, bg_assoc = 0.0;
    double fg_noassoc = 0.0, bg_noassoc = 0.0;
    double fg_all = 0.0, bg_all = 0.0;
};

struct Q2Result {
    std::vector<int> bins;
    std::vector<int> instances_per_bin;
    std::vector<int> drops_per_bin;
    std::vector<double> drop_rate_per_bin;  // aggregated over all classes
    std::vector<DropEvent> events;
    std::vector<Q2HitRow> hit_ratios;
    int confident_instances = 0;
};

// CAM-ladder run: per confident instance, background outside each bin mask is zeroed
// at the shallow layer (the instance region always retained via the mask
// union); drops counted with the same three conditions. `assoc_store`, when
// given, splits the hit-ratio table into associated/non-associated groups.
Q2Result run_q2_cam_bins(const det::ToyDetector& model, const Dataset& data, const Q2Config& cfg,
                         const assoc::FeatureStore* assoc_store);

}  // namespace ctxbias::interv
