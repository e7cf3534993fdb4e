#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctxbias/assoc/assoc.hpp"

namespace ctxbias::assoc {

struct PairTrialStat {
    int tp = 0;
    int drops = 0;
};

inline constexpr int kMinPairSupport = 5;

struct PairStats {
    int fg = 0;
    int bg = 0;
    int tp = 0;     // prior true positives in images containing the bg label
    int drops = 0;  // drop events among them
    bool low_support = false;  // tp < kMinPairSupport
    std::vector<PairTrialStat> per_trial;

    double drop_rate() const { return tp > 0 ? static_cast<double>(drops) / tp : 0.0; }
};

// Per-domain result of the feature-space experiment: drop bookkeeping plus
// the masked-feature bundles, persisted as CBT1 matrices grouped by
// (pair, layer, associated-flag) with a JSON index. This is the interchange
// boundary downstream metric implementations consume.
struct FeatureStore {
    std::string domain;
    std::vector<std::string> layers;
    std::vector<std::string> fg_names, bg_names;
    std::vector<std::vector<std::string>> trial_images;  // [trial] -> image ids
    std::vector<InstanceFeatures> features;
    std::vector<OutcomeRecord> outcomes;
    std::vector<PairStats> pair_stats;
    int skipped_bg_undefined = 0;
    int skipped_low_confidence = 0;
    int skipped_degenerate_cam = 0;

    void save(const std::string& dir) const;
    static FeatureStore load(const std::string& dir);  // pipeline_error when absent

    const PairStats* find_pair(int fg, int bg) const;

    // Associated/non-associated partition of one pair, optionally restricted
    // to a trial's image subset. Records reference this store's bundles.
    AssociationPartition pair_partition(int fg, int bg, std::optional<int> trial) const;

    // Drop rate of one pair within one trial.
    std::optional<double> trial_drop_rate(int fg, int bg, int trial) const;
};

}  // namespace ctxbias::assoc
