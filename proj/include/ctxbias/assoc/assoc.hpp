#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctxbias/core/tensor.hpp"
#include "ctxbias/core/types.hpp"
#include "ctxbias/metrics/metrics.hpp"

namespace ctxbias::assoc {

// cam \ instance region empty: the background feature is undefined and the
// record is skipped (callers count these).
struct bg_undefined_error : numeric_error {
    using numeric_error::numeric_error;
};

struct ExtractedFeatures {
    std::vector<float> x_c;      // normalized masked activation, C*h*w
    double x_c_norm = 0.0;       // L2 norm of X before normalization
    std::vector<float> x_f_avg;  // channel means of X_c over instance cells
    std::vector<float> x_b_avg;  // channel means of X_c over cam-minus-instance cells
};

// Masks are given on the activation grid (already majority-vote aligned);
// the instance region must be contained in the cam region.
ExtractedFeatures extract_features(const Mask& cam_grid, const Mask& instance_grid,
                                   const FeatureTensor& activation);

// Per-instance feature bundle across the four capture layers, independent of
// any intervention outcome.
struct InstanceFeatures {
    std::string image_id;
    int instance_index = 0;
    int fg_class = 0;
    double confidence = 0.0;
    // layer -> (x_f_avg, x_b_avg)
    std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> per_layer;
};

// Outcome of removing one background label for one prior true positive.
struct OutcomeRecord {
    std::string image_id;
    int instance_index = 0;
    int fg_class = 0;
    int bg_label = 0;
    bool dropped = false;  // detection failed under removal -> associated
};

// One partition row: an instance's features tagged with the
// (fg, bg) pair and its associated/non-associated membership.
struct AssociationRecord {
    std::string domain;
    std::string image_id;
    int instance_index = 0;
    int fg_class = 0;
    int bg_label = 0;
    bool associated = false;
    const InstanceFeatures* features = nullptr;
};

struct AssociationPartition {
    std::vector<AssociationRecord> f_a;   // associated
    std::vector<AssociationRecord> f_na;  // non-associated
};

// Membership is a function of drop outcomes only: dropped -> F_a, retained
// -> F_na; outcomes without a feature bundle (below the CAM confidence
// floor or skipped) are ignored.
AssociationPartition partition(const std::string& domain,
                               const std::vector<OutcomeRecord>& outcomes,
                               const std::vector<InstanceFeatures>& features);

struct BalancedSample {
    std::vector<AssociationRecord> records;
    bool low_support = false;  // |F_na| < requested size
};

// Uniform sample of F_na without replacement, |subset| = |F_a|, seeded.
BalancedSample balance_sample(const std::vector<AssociationRecord>& f_a,
                              const std::vector<AssociationRecord>& f_na, std::uint64_t seed);

// Stacks one layer's vectors from records into MMD-ready matrices.
metrics::PartitionFeatures stack_features(const std::vector<AssociationRecord>& records,
                                          const std::string& layer);

}  // namespace ctxbias::assoc
