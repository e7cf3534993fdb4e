#include "ctxbias/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ctxbias/core/error.hpp"
#include "ctxbias/kernels/kernels.hpp"

namespace ctxbias::metrics {

namespace {

// Sum in ascending order: makes kernel sums independent of row order, which
// gives exact symmetry / permutation invariance of the estimator.
double sorted_sum(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc;
}

std::vector<double> kernel_values(const FeatureMatrix& A, const FeatureMatrix& B, double sigma) {
    std::vector<double> sq(A.rows * B.rows);
    kern::active().pairwise_sqdist(A.data.data(), A.rows, B.data.data(), B.rows, A.dim, sq.data());
    const double denom = 2.0 * sigma * sigma;
    for (double& v : sq) v = std::exp(-v / denom);
    return sq;
}

double median_pooled_distance(const FeatureMatrix& X, const FeatureMatrix& Y) {
    FeatureMatrix pooled;
    pooled.dim = X.dim;
    pooled.rows = X.rows + Y.rows;
    pooled.data = X.data;
    pooled.data.insert(pooled.data.end(), Y.data.begin(), Y.data.end());

    const size_t n = pooled.rows;
    std::vector<double> sq(n * n);
    kern::active().pairwise_sqdist(pooled.data.data(), n, pooled.data.data(), n, pooled.dim,
                                   sq.data());
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) dists.push_back(std::sqrt(sq[i * n + j]));
    if (dists.empty()) return 0.0;
    std::sort(dists.begin(), dists.end());
    const size_t m = dists.size();
    return m % 2 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
}

}  // namespace

MmdResult mmd(const FeatureMatrix& X, const FeatureMatrix& Y, std::optional<double> bandwidth) {
    if (X.empty() || Y.empty()) throw numeric_error("mmd: empty sample set");
    if (X.dim != Y.dim)
        throw numeric_error("mmd: dimension mismatch (" + std::to_string(X.dim) + " vs " +
                            std::to_string(Y.dim) + ")");

    MmdResult r;
    r.n_x = X.rows;
    r.n_y = Y.rows;

    double sigma;
    if (bandwidth) {
        sigma = *bandwidth;
        if (sigma <= 0.0) throw numeric_error("mmd: bandwidth must be positive");
    } else {
        sigma = median_pooled_distance(X, Y);
        if (sigma == 0.0) {
            // every pooled point identical: distributions equal by fiat
            r.degenerate = true;
            r.value = 0.0;
            r.bandwidth = 0.0;
            return r;
        }
    }
    r.bandwidth = sigma;

    std::vector<double> kxx = kernel_values(X, X, sigma);
    std::vector<double> kyy = kernel_values(Y, Y, sigma);
    std::vector<double> kxy = kernel_values(X, Y, sigma);
    const double nx = static_cast<double>(X.rows), ny = static_cast<double>(Y.rows);
    const double v = sorted_sum(kxx) / (nx * nx) + sorted_sum(kyy) / (ny * ny) -
                     2.0 * sorted_sum(kxy) / (nx * ny);
    r.value = v < 0.0 ? 0.0 : v;
    return r;
}

ContextMmds context_mmds(const PartitionFeatures& f_na, const PartitionFeatures& f_a) {
    if (f_na.f_avg.empty() || f_a.f_avg.empty())
        throw numeric_error("context_mmds: empty partition");
    ContextMmds out;
    out.f2f = mmd(f_na.f_avg, f_a.f_avg);
    out.f2b = mmd(f_na.f_avg, f_a.b_avg);
    out.b2f = mmd(f_na.b_avg, f_a.f_avg);
    out.b2b = mmd(f_na.b_avg, f_a.b_avg);
    return out;
}

GradientValue association_gradient(double drop_rate, const ContextMmds& mmds) {
    if (drop_rate < 0.0 || drop_rate > 1.0)
        throw numeric_error("association_gradient: drop_rate outside [0,1]");
    GradientValue g;
    g.drop_rate = drop_rate;
    g.f2f = mmds.f2f.value;
    g.f2b = mmds.f2b.value;
    g.b2f = mmds.b2f.value;
    g.b2b = mmds.b2b.value;
    g.denominator = g.f2b + g.b2f - g.f2f - g.b2b;
    if (std::abs(g.denominator) < kGradientDenominatorEps) {
        g.degenerate = true;
        return g;
    }
    g.gradient = drop_rate / g.denominator;
    return g;
}

CrossDomainSums cross_domain_sums(const PartitionFeatures& fa_s, const PartitionFeatures& fa_t,
                                  const PartitionFeatures& fna_s,
                                  const PartitionFeatures& fna_t) {
    if (fa_s.f_avg.empty() || fa_t.f_avg.empty() || fna_s.f_avg.empty() || fna_t.f_avg.empty())
        throw numeric_error("cross_domain_sums: empty partition");
    CrossDomainSums out;
    out.f2b_asso = mmd(fa_s.f_avg, fa_t.b_avg).value;
    out.b2f_asso = mmd(fa_s.b_avg, fa_t.f_avg).value;
    out.f2b_noasso = mmd(fna_s.f_avg, fna_t.b_avg).value;
    out.b2f_noasso = mmd(fna_s.b_avg, fna_t.f_avg).value;
    out.sum_aa = out.f2b_asso + out.b2f_asso;
    out.sum_nana = out.f2b_noasso + out.b2f_noasso;
    return out;
}

}  // namespace ctxbias::metrics
