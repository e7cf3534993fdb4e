#pragma once

#include <cstdint>
#include <vector>

#include "ctxbias/core/dataset.hpp"
#include "ctxbias/detector/model.hpp"

namespace ctxbias::det {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
    bool flip = true;
    bool color_jitter = true;
    bool resize_crop = false;
    int eval_every = 1;        // epochs between checkpoint-selection evals
    double pos_obj_weight = 4.0;
    double box_weight = 1.0;

    void validate() const {
        if (epochs < 1) throw config_error("train: epochs must be >= 1");
        if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
        if (learning_rate <= 0.0) throw config_error("train: learning_rate must be > 0");
    }
};

struct TrainResult {
    std::vector<double> step_losses;   // one entry per optimizer step
    std::vector<double> epoch_losses;  // mean loss per epoch
    std::vector<double> val_maps;      // mAP@50 per evaluated epoch
    double best_map = -1.0;            // -1 when no validation set given
    int best_epoch = -1;
};

// Trains in place; when `val` is provided the weights left on the model are
// the checkpoint with the highest validation mAP@50. Fully deterministic
// given config.seed.
TrainResult train(ToyDetector& model, const Dataset& train_data, const Dataset* val,
                  const TrainConfig& cfg);

// mAP@50 of the model over a dataset (score floor low enough for a full
// precision-recall sweep).
double dataset_map50(const ToyDetector& model, const Dataset& data);

}  // namespace ctxbias::det
