#include "ctxbias/stats/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxbias/core/error.hpp"

namespace ctxbias::stats {

namespace {

Decision decide(double p, double alpha) {
    return p < alpha ? Decision::significant : Decision::not_significant;
}

// Mid-ranks of |values|, 1-based.
std::vector<double> midranks(const std::vector<double>& magnitudes) {
    const size_t n = magnitudes.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return magnitudes[a] < magnitudes[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && magnitudes[order[j + 1]] == magnitudes[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Acklam's rational approximation of the inverse normal CDF (|error| < 1.2e-9).
double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0) throw numeric_error("normal_quantile: p outside (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double q, r, x;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= phigh) {
        q = p - 0.5;
        r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // One Halley refinement step.
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

namespace {

double betacf(double a, double b, double x) {
    const int kMaxIter = 300;
    const double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

TestResult wilcoxon_from_differences(std::vector<double> diffs, double alpha) {
    TestResult r;
    r.test = "wilcoxon";
    r.alpha = alpha;

    // Wilcoxon convention: zero differences carry no sign information.
    diffs.erase(std::remove(diffs.begin(), diffs.end(), 0.0), diffs.end());
    const int n = static_cast<int>(diffs.size());
    r.n = n;
    if (n == 0) {
        r.decision = Decision::inapplicable;
        r.note = "all differences zero";
        return r;
    }

    std::vector<double> mags(diffs.size());
    for (size_t i = 0; i < diffs.size(); ++i) mags[i] = std::abs(diffs[i]);
    const std::vector<double> ranks = midranks(mags);

    double w_plus = 0.0, rank_sum = 0.0;
    for (size_t i = 0; i < diffs.size(); ++i) {
        rank_sum += ranks[i];
        if (diffs[i] > 0.0) w_plus += ranks[i];
    }
    r.statistic = w_plus;

    if (n <= kWilcoxonExactLimit) {
        // Full sign enumeration over the realized rank vector. The subset-sum
        // distribution is symmetric around rank_sum/2, so the two-sided p is
        // twice the upper-tail count of max(W+, W-).
        const double w_hi = std::max(w_plus, rank_sum - w_plus);
        const std::uint64_t total = 1ULL << n;
        std::uint64_t at_or_above = 0;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double s = 0.0;
            for (int i = 0; i < n; ++i)
                if (mask & (1ULL << i)) s += ranks[static_cast<size_t>(i)];
            if (s >= w_hi - 1e-12) ++at_or_above;
        }
        r.p_value = std::min(1.0, 2.0 * static_cast<double>(at_or_above) / static_cast<double>(total));
    } else {
        const double mean = rank_sum / 2.0;
        double tie_term = 0.0;
        {
            std::vector<double> sorted = mags;
            std::sort(sorted.begin(), sorted.end());
            size_t i = 0;
            while (i < sorted.size()) {
                size_t j = i;
                while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
                const double t = static_cast<double>(j - i + 1);
                tie_term += t * t * t - t;
                i = j + 1;
            }
        }
        const double var =
            static_cast<double>(n) * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
        if (var <= 0.0) {
            r.decision = Decision::inapplicable;
            r.note = "degenerate variance";
            return r;
        }
        const double delta = w_plus - mean;
        const double cc = delta > 0 ? -0.5 : (delta < 0 ? 0.5 : 0.0);
        const double z = (delta + cc) / std::sqrt(var);
        r.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::abs(z))));
    }
    r.decision = decide(r.p_value, alpha);
    return r;
}

TestResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                double alpha) {
    if (x.size() != y.size())
        throw numeric_error("wilcoxon: paired samples must have equal length");
    std::vector<double> diffs(x.size());
    for (size_t i = 0; i < x.size(); ++i) diffs[i] = x[i] - y[i];
    return wilcoxon_from_differences(std::move(diffs), alpha);
}

TestResult shapiro_wilk(const std::vector<double>& sample, double alpha) {
    TestResult r;
    r.test = "shapiro_wilk";
    r.alpha = alpha;
    const int n = static_cast<int>(sample.size());
    r.n = n;
    if (n < 3) {
        r.decision = Decision::inapplicable;
        r.note = "n < 3";
        return r;
    }
    if (n > 5000) {
        r.decision = Decision::inapplicable;
        r.note = "n > 5000";
        return r;
    }

    std::vector<double> x = sample;
    std::sort(x.begin(), x.end());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ssq = 0.0;
    for (double v : x) ssq += (v - mean) * (v - mean);
    if (ssq <= 0.0) {
        r.decision = Decision::inapplicable;
        r.note = "zero variance";
        return r;
    }

    // Royston (1995), AS R94: coefficients a_i from normal order statistics.
    std::vector<double> m(static_cast<size_t>(n));
    double m_ssq = 0.0;
    for (int i = 1; i <= n; ++i) {
        m[static_cast<size_t>(i - 1)] = normal_quantile((i - 0.375) / (n + 0.25));
        m_ssq += m[static_cast<size_t>(i - 1)] * m[static_cast<size_t>(i - 1)];
    }
    std::vector<double> a(static_cast<size_t>(n));
    if (n == 3) {
        a[0] = std::sqrt(0.5);
        a[1] = 0.0;
        a[2] = -a[0];
    } else {
        const double u = 1.0 / std::sqrt(static_cast<double>(n));
        const double rsm = 1.0 / std::sqrt(m_ssq);
        const double c_n = m[static_cast<size_t>(n - 1)] * rsm;
        const double a_n =
            c_n + 0.221157 * u - 0.147981 * u * u - 2.071190 * u * u * u +
            4.434685 * u * u * u * u - 2.706056 * u * u * u * u * u;
        double a_n1 = 0.0;
        double phi;
        if (n > 5) {
            const double c_n1 = m[static_cast<size_t>(n - 2)] * rsm;
            a_n1 = c_n1 + 0.042981 * u - 0.293762 * u * u - 1.752461 * u * u * u +
                   5.682633 * u * u * u * u - 3.582633 * u * u * u * u * u;
            phi = (m_ssq - 2.0 * m[static_cast<size_t>(n - 1)] * m[static_cast<size_t>(n - 1)] -
                   2.0 * m[static_cast<size_t>(n - 2)] * m[static_cast<size_t>(n - 2)]) /
                  (1.0 - 2.0 * a_n * a_n - 2.0 * a_n1 * a_n1);
        } else {
            phi = (m_ssq - 2.0 * m[static_cast<size_t>(n - 1)] * m[static_cast<size_t>(n - 1)]) /
                  (1.0 - 2.0 * a_n * a_n);
        }
        const double rphi = 1.0 / std::sqrt(phi);
        for (int i = 0; i < n; ++i) a[static_cast<size_t>(i)] = m[static_cast<size_t>(i)] * rphi;
        a[static_cast<size_t>(n - 1)] = a_n;
        a[0] = -a_n;
        if (n > 5) {
            a[static_cast<size_t>(n - 2)] = a_n1;
            a[1] = -a_n1;
        }
    }

    double num = 0.0;
    for (int i = 0; i < n; ++i) num += a[static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
    double w = num * num / ssq;
    if (w > 1.0) w = 1.0;
    r.statistic = w;

    // p-value via Royston's normalizing transforms.
    double p;
    if (n == 3) {
        const double kPi6 = 6.0 / M_PI;
        const double stqr = std::asin(std::sqrt(0.75));
        p = kPi6 * (std::asin(std::sqrt(w)) - stqr);
        p = std::clamp(p, 0.0, 1.0);
    } else if (n <= 11) {
        const double g = -2.273 + 0.459 * n;
        const double mu = 0.5440 - 0.39978 * n + 0.025054 * n * n - 0.0006714 * n * n * n;
        const double sigma =
            std::exp(1.3822 - 0.77857 * n + 0.062767 * n * n - 0.0020322 * n * n * n);
        const double y = -std::log(g - std::log1p(-w));
        const double z = (y - mu) / sigma;
        p = 1.0 - normal_cdf(z);
    } else {
        const double ln_n = std::log(static_cast<double>(n));
        const double mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n * ln_n +
                          0.0038915 * ln_n * ln_n * ln_n;
        const double sigma = std::exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n * ln_n);
        const double y = std::log1p(-w);
        const double z = (y - mu) / sigma;
        p = 1.0 - normal_cdf(z);
    }
    r.p_value = std::clamp(p, 0.0, 1.0);
    r.decision = decide(r.p_value, alpha);
    return r;
}

TestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y,
                         double alpha) {
    if (x.size() != y.size())
        throw numeric_error("paired_t: samples must have equal length");
    TestResult r;
    r.test = "paired_t";
    r.alpha = alpha;
    const int n = static_cast<int>(x.size());
    r.n = n;
    if (n < 2) {
        r.decision = Decision::inapplicable;
        r.note = "n < 2";
        return r;
    }
    std::vector<double> d(x.size());
    for (size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    var /= (n - 1);
    if (var <= 0.0) {
        if (mean == 0.0) {
            r.decision = Decision::inapplicable;
            r.note = "zero-variance differences";
            return r;
        }
        // constant nonzero shift: infinitely strong evidence under the model
        r.statistic = mean > 0 ? 1e30 : -1e30;
        r.p_value = 0.0;
        r.decision = decide(r.p_value, alpha);
        r.note = "zero-variance nonzero differences";
        return r;
    }
    const double t = mean / std::sqrt(var / n);
    const double nu = static_cast<double>(n - 1);
    r.statistic = t;
    r.p_value = incomplete_beta(nu / 2.0, 0.5, nu / (nu + t * t));
    r.p_value = std::clamp(r.p_value, 0.0, 1.0);
    r.decision = decide(r.p_value, alpha);
    return r;
}

CaseLabel classify_case(const std::vector<double>& a, const std::vector<double>& b, double alpha,
                        ForcedTest force) {
    if (a.empty() || b.empty() || a.size() != b.size())
        throw numeric_error("classify_case: paired samples required");

    bool use_t;
    switch (force) {
        case ForcedTest::ttest: use_t = true; break;
        case ForcedTest::wilcoxon: use_t = false; break;
        default: {
            const TestResult sa = shapiro_wilk(a, alpha);
            const TestResult sb = shapiro_wilk(b, alpha);
            // "normal" = Shapiro applicable and not rejecting normality
            const bool normal_a = sa.decision == Decision::not_significant;
            const bool normal_b = sb.decision == Decision::not_significant;
            use_t = normal_a && normal_b;
            break;
        }
    }

    CaseLabel out;
    out.test = use_t ? paired_t_test(a, b, alpha) : wilcoxon_signed_rank(a, b, alpha);
    if (out.test.decision == Decision::inapplicable) {
        out.label = Case::C3;
        out.direction_note = "inapplicable: " + out.test.note;
        return out;
    }
    if (out.test.decision == Decision::not_significant) {
        out.label = Case::C3;
        out.direction_note = "no significant difference";
        return out;
    }

    double direction;
    if (use_t) {
        direction = out.test.statistic;  // sign of mean difference
    } else {
        std::vector<double> d;
        for (size_t i = 0; i < a.size(); ++i)
            if (a[i] != b[i]) d.push_back(a[i] - b[i]);
        std::sort(d.begin(), d.end());
        const size_t n = d.size();
        direction = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
        if (direction == 0.0) {
            // median of nonzero differences is zero: fall back to rank sums
            direction = out.test.statistic - 0.5 * (out.test.n * (out.test.n + 1) / 2.0);
        }
    }
    out.label = direction < 0 ? Case::C1 : Case::C2;
    out.direction_note = direction < 0 ? "a significantly lower" : "a significantly higher";
    return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw numeric_error("spearman: need paired samples, n >= 2");
    const std::vector<double> rx = midranks(x);
    const std::vector<double> ry = midranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) throw numeric_error("spearman: constant ranks");
    return sxy / std::sqrt(sxx * syy);
}

std::vector<double> holm_adjust(const std::vector<double>& p) {
    const size_t n = p.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(n, 0.0);
    double running = 0.0;
    for (size_t k = 0; k < n; ++k) {
        const double v = std::min(1.0, static_cast<double>(n - k) * p[order[k]]);
        running = std::max(running, v);
        adj[order[k]] = running;
    }
    return adj;
}

}  // namespace ctxbias::stats
