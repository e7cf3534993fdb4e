#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ctxbias::stats {

enum class Decision { significant, not_significant, inapplicable };

struct TestResult {
    std::string test;       // "wilcoxon", "shapiro_wilk", "paired_t"
    double statistic = 0.0;
    double p_value = 1.0;
    int n = 0;              // effective sample size after the test's own filtering
    double alpha = 0.05;
    Decision decision = Decision::inapplicable;
    std::string note;

    bool significant() const { return decision == Decision::significant; }
};

// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
// are dropped (Wilcoxon convention), tied magnitudes get mid-ranks. Exact
// null by full sign enumeration for n <= `exact_limit`, normal approximation
// with continuity and tie correction above. Statistic is W+ (sum of positive
// ranks).
TestResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                double alpha = 0.05);
TestResult wilcoxon_from_differences(std::vector<double> diffs, double alpha = 0.05);

inline constexpr int kWilcoxonExactLimit = 12;

// Shapiro-Wilk normality test, Royston's AS R94 approximation, 3 <= n <= 5000.
// Zero-variance samples are inapplicable.
TestResult shapiro_wilk(const std::vector<double>& sample, double alpha = 0.05);

// Two-sided paired Student t-test; inapplicable when the differences have
// zero variance.
TestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y,
                         double alpha = 0.05);

enum class Case { C1, C2, C3 };

inline const char* case_name(Case c) {
    switch (c) {
        case Case::C1: return "C1";
        case Case::C2: return "C2";
        default: return "C3";
    }
}

enum class ForcedTest { none, wilcoxon, ttest };

struct CaseLabel {
    Case label = Case::C3;
    TestResult test;
    std::string direction_note;  // "a lower", "a higher", "no difference"
};

// Three-way comparison of paired samples a vs b:
//   C1 = a significantly lower, C2 = a significantly higher, C3 = otherwise.
// Test selection: Shapiro-Wilk on both samples; both normal -> paired t,
// else Wilcoxon. `force` overrides the gate.
CaseLabel classify_case(const std::vector<double>& a, const std::vector<double>& b,
                        double alpha = 0.05, ForcedTest force = ForcedTest::none);

// Spearman rank correlation (mid-ranks), NaN-free inputs, n >= 2.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Holm step-down adjustment; returns adjusted p-values in input order.
std::vector<double> holm_adjust(const std::vector<double>& p);

// Shared numeric helpers (exposed for tests).
double normal_cdf(double z);
double normal_quantile(double p);
// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

}  // namespace ctxbias::stats
