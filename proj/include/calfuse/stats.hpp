#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace calfuse {

/// Exact two-sided McNemar test on the discordant pairs: with n = W + L,
/// p = min(1, 2 * P(X <= min(W, L))) for X ~ Binomial(n, 1/2). n = 0 gives 1.
double mcnemar_exact(std::size_t wins, std::size_t losses);

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

/// Wilson score interval without continuity correction. Throws when n = 0
/// or successes > n.
Interval wilson_ci(std::size_t successes, std::size_t n, double z = 1.96);

struct OddsRatio {
    double value = 1.0;
    bool corrected = false;  ///< Haldane-Anscombe 0.5 added to every cell
};

/// (a / (n - a)) / (b / (n - b)) for method successes a and baseline
/// successes b out of n each.
OddsRatio odds_ratio(std::size_t method_successes, std::size_t baseline_successes, std::size_t n);

/// Percentile bootstrap of the mean. Deterministic for a given seed.
Interval bootstrap_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed,
                      double confidence = 0.95);

}  // namespace calfuse
