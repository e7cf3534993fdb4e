#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace ctxbias::metrics {

// Row-major set of feature vectors, one row per record.
struct FeatureMatrix {
    size_t rows = 0;
    size_t dim = 0;
    std::vector<float> data;

    const float* row(size_t i) const { return data.data() + i * dim; }
    void push_row(const std::vector<float>& v) {
        if (dim == 0) dim = v.size();
        data.insert(data.end(), v.begin(), v.end());
        ++rows;
    }
    bool empty() const { return rows == 0; }
};

struct MmdResult {
    double value = 0.0;      // biased V-statistic of squared MMD, clamped >= 0
    size_t n_x = 0;
    size_t n_y = 0;
    double bandwidth = 0.0;  // RBF sigma actually used
    bool degenerate = false; // zero median pairwise distance
};

// Biased (V-statistic) squared-MMD estimate with RBF kernel
// k(a,b) = exp(-||a-b||^2 / (2 sigma^2)). When `bandwidth` is absent, sigma
// is the median pairwise distance over the pooled rows of X and Y. Kernel
// sums are accumulated in sorted order, so the estimate is exactly symmetric
// and exactly invariant under common row permutations.
MmdResult mmd(const FeatureMatrix& X, const FeatureMatrix& Y,
              std::optional<double> bandwidth = std::nullopt);

// Feature vectors of one partition side (associated or non-associated) for
// one (fg, bg) pair: rows are per-record X_f_avg / X_b_avg.
struct PartitionFeatures {
    FeatureMatrix f_avg;
    FeatureMatrix b_avg;
};

struct ContextMmds {
    MmdResult f2f, f2b, b2f, b2b;
};

// Within-domain comparisons; operand order is fixed: non-associated set
// first, associated set second.
//   f2f = mmd(f_avg in F_na, f_avg in F_a)    f2b = mmd(f_avg in F_na, b_avg in F_a)
//   b2f = mmd(b_avg in F_na, f_avg in F_a)    b2b = mmd(b_avg in F_na, b_avg in F_a)
ContextMmds context_mmds(const PartitionFeatures& f_na, const PartitionFeatures& f_a);

struct GradientValue {
    double drop_rate = 0.0;
    double f2f = 0.0, f2b = 0.0, b2f = 0.0, b2b = 0.0;
    double denominator = 0.0;  // f2b + b2f - f2f - b2b
    double gradient = 0.0;     // defined only when !degenerate
    bool degenerate = false;   // |denominator| below the exclusion threshold
};

inline constexpr double kGradientDenominatorEps = 1e-6;

// gradient = drop_rate / (f2b + b2f - f2f - b2b); |denominator| < 1e-6 is
// flagged degenerate and excluded from statistics rather than clamped.
GradientValue association_gradient(double drop_rate, const ContextMmds& mmds);

struct CrossDomainSums {
    double f2b_asso = 0.0, b2f_asso = 0.0;
    double f2b_noasso = 0.0, b2f_noasso = 0.0;
    double sum_aa = 0.0;    // f2b_asso + b2f_asso
    double sum_nana = 0.0;  // f2b_noasso + b2f_noasso
};

// Cross-domain comparisons between source (S) and target (T) partitions:
//   f2b_asso = mmd(f_avg in F_a^S, b_avg in F_a^T)
//   b2f_asso = mmd(b_avg in F_a^S, f_avg in F_a^T)
// and the analogous non-associated terms. Callers balance F_na to |F_a|
// per domain before calling.
CrossDomainSums cross_domain_sums(const PartitionFeatures& fa_s, const PartitionFeatures& fa_t,
                                  const PartitionFeatures& fna_s, const PartitionFeatures& fna_t);

}  // namespace ctxbias::metrics
