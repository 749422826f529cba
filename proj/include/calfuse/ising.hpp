#pragma once

#include "calfuse/fusion.hpp"
#include "calfuse/retrieval.hpp"

#include <cstddef>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

namespace calfuse {

struct IsingConfig {
    double coupling = 1.0;     ///< J >= 0
    double temperature = 1.0;  ///< T > 0
    double blend = 0.2;        ///< weight of the magnetization term
    std::size_t max_iterations = 100;
    double tol = 1e-6;
    double damping_mix = 0.5;  ///< in (0, 1]
};

void validate(const IsingConfig& config);

/// Candidate coupling. `shared(i, j)` counts canonical entities common to
/// candidates i and j (symmetric, zero diagonal); `at(i, j)` is that count
/// divided by the maximum of row i.
struct Coupling {
    std::size_t n = 0;
    std::vector<double> shared_counts;
    std::vector<double> normalized;

    double shared(std::size_t i, std::size_t j) const { return shared_counts[i * n + j]; }
    double at(std::size_t i, std::size_t j) const { return normalized[i * n + j]; }
};

/// Candidates whose id is not a graph passage get an all-zero row.
Coupling build_coupling(const FusedRanking& candidates, const EntityGraph& graph);

struct RerankResult {
    FusedRanking ranking;
    std::vector<double> magnetization;  ///< aligned with the input order
    bool converged = false;
    std::size_t iterations = 0;
};

/// Damped mean-field magnetization update
///   m_i <- (1 - mix) m_i + mix * tanh((h_i + J * sum_j A_ij m_j) / T)
/// from m = 0, where h is the fused score shifted to zero mean. Final score
/// (1 - blend) * fused + blend * (m + 1) / 2, re-sorted.
RerankResult mean_field_rerank(const FusedRanking& candidates, const Coupling& coupling,
                               const IsingConfig& config);

struct IsingGrid {
    std::vector<double> couplings{0.5, 1.0, 2.0};
    std::vector<double> temperatures{0.5, 1.0, 2.0};
    std::vector<double> blends{0.0, 0.1, 0.2, 0.25, 0.3, 0.5};
};

struct IsingQuery {
    FusedRanking candidates;
    Coupling coupling;
};

struct IsingSweepCell {
    double coupling = 0.0;
    double temperature = 0.0;
    double blend = 0.0;
    std::size_t wins = 0;
    std::size_t losses = 0;
    std::size_t hits = 0;
    std::size_t unconverged = 0;
};

/// hit(query_index, reranked) decides whether a reranked list finds its
/// target; wins/losses are counted against `baseline_hits`.
using HitFn = std::function<bool(std::size_t, const FusedRanking&)>;

std::vector<IsingSweepCell> ising_sweep(std::span<const IsingQuery> queries, const IsingGrid& grid,
                                        std::span<const bool> baseline_hits, const HitFn& hit,
                                        const IsingConfig& base = {});

void write_ising_sweep_csv(std::ostream& out, std::span<const IsingSweepCell> cells);

}  // namespace calfuse
