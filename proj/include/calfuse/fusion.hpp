#pragma once

#include "calfuse/calibration.hpp"
#include "calfuse/retrieval.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calfuse {

enum class Strategy {
    thermo,
    rrf,
    linear,
    log_linear,
    power_mean,
    tsallis,
    gumbel_copula,
    plackett_luce,
    quantum,
    ot_align,
    wasserstein_t,
};

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view text);
std::span<const Strategy> all_strategies();

/// Strategy-specific constants. Unset optionals mean "derive from data".
struct StrategyParams {
    double rrf_k0 = 60.0;
    double power_p = 0.5;
    double tsallis_q = 1.5;
    std::optional<double> copula_theta;  ///< empty: Kendall-tau estimate
    std::optional<double> t0;            ///< empty: each system's own temperature
    double gamma = 1.0;
    std::size_t pl_max_iterations = 200;
    double pl_pseudo_count = 0.1;
    double pl_tolerance = 1e-12;
    double quantum_theta = 0.0;
    /// Stand-in value for a document one system did not return, used by the
    /// multiplicative strategies.
    double floor = 1e-6;
};

struct FusionConfig {
    double alpha = 0.5;
    double beta = 0.0;
    Strategy strategy = Strategy::thermo;
    StrategyParams params;
    std::size_t k = 10;
};

struct FusedEntry {
    std::string id;
    double score = 0.0;
    bool in_vector = false;
    bool in_graph = false;
    bool consensus = false;

    friend bool operator==(const FusedEntry&, const FusedEntry&) = default;
};

/// Fused score descending, ties by ascending id, at most k entries.
struct FusedRanking {
    std::vector<FusedEntry> entries;
    /// Set when a strategy lacked the overlap it needs and thermo was used.
    bool downgraded = false;
    std::optional<double> copula_theta;

    std::vector<std::string> ids() const;
    friend bool operator==(const FusedRanking&, const FusedRanking&) = default;
};

/// alpha * P_v + (1 - alpha) * P_g + beta * [in both]. A document missing
/// from one system contributes probability 0 there. The boost is applied
/// before truncation to k.
FusedRanking thermo_fuse(const CalibratedList& v, const CalibratedList& g, double alpha, double beta,
                         std::size_t k);

/// Sum over lists containing d of 1 / (k0 + rank), ranks 1-based.
FusedRanking rrf_fuse(const ScoreList& v, const ScoreList& g, double k0, std::size_t k);

/// alpha * norm_v + (1 - alpha) * norm_g + beta * [in both], on the
/// calibrated lists' normalized values (percentiles under pit).
FusedRanking linear_fuse(const CalibratedList& v, const CalibratedList& g, double alpha, double beta,
                         std::size_t k);

/// Dispatches any strategy. Additive strategies (thermo, linear, power mean,
/// Tsallis, OT alignment, Wasserstein-T) treat a missing system as 0;
/// multiplicative ones (log-linear, Gumbel copula, Plackett-Luce, quantum)
/// substitute `params.floor`. Gumbel and Plackett-Luce fall back to thermo
/// (and set `downgraded`) when fewer than two documents overlap.
FusedRanking strategy_fuse(const CalibratedList& v, const CalibratedList& g,
                           const FusionConfig& config);

// Building blocks, exposed for testing.

/// Entries of `list` in rank order, as a ScoreList.
ScoreList as_score_list(const CalibratedList& list);

/// [1 + (1 - q) x]_+^(1/(1-q)) evaluated in log space; q == 1 gives x.
/// Returns -inf where the bracket is non-positive.
double log_q_exponential(double x, double q);

/// Tsallis analogue of boltzmann(): weights proportional to the
/// q-exponential of -E/T, normalized to sum to one.
std::vector<double> tsallis_weights(std::span<const double> energy, double temperature, double q);

/// Kendall tau-b; 0 when either side has no untied pairs.
double kendall_tau(std::span<const double> x, std::span<const double> y);

/// theta = 1 / (1 - tau), clamped to [1, 20].
double gumbel_theta_from_tau(double tau);

double gumbel_copula(double u, double v, double theta);

/// Plackett-Luce strengths for a single ranking of n items (best first) by
/// Hunter's MM iteration with an additive pseudo-count on every win count.
/// Normalized to sum to one.
std::vector<double> plackett_luce_strengths(std::size_t n, double pseudo_count,
                                            std::size_t max_iterations, double tolerance);

/// Wasserstein-1 distance between two empirical distributions.
double wasserstein1(std::span<const double> a, std::span<const double> b);

}  // namespace calfuse
