#include "calfuse/stats.hpp"

#include "calfuse/error.hpp"
#include "calfuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace calfuse {

double mcnemar_exact(std::size_t wins, std::size_t losses) {
    const std::size_t n = wins + losses;
    if (n == 0) return 1.0;
    const std::size_t k = std::min(wins, losses);
    const double nd = static_cast<double>(n);
    const double log_half_n = -nd * std::numbers::ln2;
    double tail = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
        const double di = static_cast<double>(i);
        tail += std::exp(std::lgamma(nd + 1.0) - std::lgamma(di + 1.0) - std::lgamma(nd - di + 1.0) +
                         log_half_n);
    }
    return std::min(1.0, 2.0 * tail);
}

Interval wilson_ci(std::size_t successes, std::size_t n, double z) {
    if (n == 0) throw Error("Wilson interval needs n > 0");
    if (successes > n) throw Error("Wilson interval needs successes <= n");
    const double nd = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nd;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nd;
    const double centre = (p + z2 / (2.0 * nd)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nd + z2 / (4.0 * nd * nd)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

OddsRatio odds_ratio(std::size_t method_successes, std::size_t baseline_successes, std::size_t n) {
    if (method_successes > n || baseline_successes > n) throw Error("odds ratio needs successes <= n");
    double a = static_cast<double>(method_successes);
    double b = static_cast<double>(baseline_successes);
    double a_fail = static_cast<double>(n - method_successes);
    double b_fail = static_cast<double>(n - baseline_successes);
    OddsRatio out;
    if (a == 0.0 || b == 0.0 || a_fail == 0.0 || b_fail == 0.0) {
        a += 0.5;
        b += 0.5;
        a_fail += 0.5;
        b_fail += 0.5;
        out.corrected = true;
    }
    out.value = (a / a_fail) / (b / b_fail);
    return out;
}

namespace {

/// Linear interpolation between order statistics (Hyndman-Fan type 7).
double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed,
                      double confidence) {
    if (values.empty()) throw Error("bootstrap needs at least one value");
    if (resamples == 0) throw Error("bootstrap needs at least one resample");
    if (!(confidence > 0.0 && confidence < 1.0)) throw Error("bootstrap confidence must be in (0, 1)");

    Rng rng(seed);
    const std::size_t n = values.size();
    std::vector<double> means;
    means.reserve(resamples);
    for (std::size_t r = 0; r < resamples; ++r) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += values[rng.below(n)];
        means.push_back(sum / static_cast<double>(n));
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - confidence) / 2.0;
    return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

}  // namespace calfuse
