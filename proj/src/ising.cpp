#include "calfuse/ising.hpp"

#include "calfuse/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace calfuse {

void validate(const IsingConfig& c) {
    if (!(c.coupling >= 0.0)) throw Error("Ising coupling J must be >= 0");
    if (!(c.temperature > 0.0)) throw Error("Ising temperature T must be > 0");
    if (!(c.blend >= 0.0 && c.blend <= 1.0)) throw Error("Ising blend must be in [0, 1]");
    if (!(c.damping_mix > 0.0 && c.damping_mix <= 1.0)) throw Error("Ising damping_mix must be in (0, 1]");
    if (!(c.tol > 0.0)) throw Error("Ising tol must be > 0");
}

Coupling build_coupling(const FusedRanking& candidates, const EntityGraph& graph) {
    Coupling c;
    c.n = candidates.entries.size();
    c.shared_counts.assign(c.n * c.n, 0.0);
    c.normalized.assign(c.n * c.n, 0.0);

    std::vector<std::span<const EntityId>> members(c.n);
    for (std::size_t i = 0; i < c.n; ++i) {
        if (auto p = graph.passage_index(candidates.entries[i].id)) members[i] = graph.passage_entities(*p);
    }
    for (std::size_t i = 0; i < c.n; ++i) {
        for (std::size_t j = i + 1; j < c.n; ++j) {
            // both member lists are sorted
            std::size_t count = 0;
            auto a = members[i].begin();
            auto b = members[j].begin();
            while (a != members[i].end() && b != members[j].end()) {
                if (*a < *b) {
                    ++a;
                } else if (*b < *a) {
                    ++b;
                } else {
                    ++count;
                    ++a;
                    ++b;
                }
            }
            c.shared_counts[i * c.n + j] = c.shared_counts[j * c.n + i] = static_cast<double>(count);
        }
    }
    for (std::size_t i = 0; i < c.n; ++i) {
        double row_max = 0.0;
        for (std::size_t j = 0; j < c.n; ++j) row_max = std::max(row_max, c.shared(i, j));
        if (row_max == 0.0) continue;
        for (std::size_t j = 0; j < c.n; ++j) c.normalized[i * c.n + j] = c.shared(i, j) / row_max;
    }
    return c;
}

RerankResult mean_field_rerank(const FusedRanking& candidates, const Coupling& coupling,
                               const IsingConfig& config) {
    validate(config);
    const std::size_t n = candidates.entries.size();
    if (coupling.n != n) throw Error("coupling size does not match candidate count");

    RerankResult result;
    result.magnetization.assign(n, 0.0);
    if (n == 0) {
        result.ranking = candidates;
        result.converged = true;
        return result;
    }

    double mean = 0.0;
    for (const auto& e : candidates.entries) mean += e.score;
    mean /= static_cast<double>(n);
    std::vector<double> field(n);
    for (std::size_t i = 0; i < n; ++i) field[i] = candidates.entries[i].score - mean;

    auto& m = result.magnetization;
    std::vector<double> next(n);
    const double mix = config.damping_mix;
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
        double change = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double local = field[i];
            for (std::size_t j = 0; j < n; ++j) local += config.coupling * coupling.at(i, j) * m[j];
            next[i] = (1.0 - mix) * m[i] + mix * std::tanh(local / config.temperature);
            change = std::max(change, std::abs(next[i] - m[i]));
        }
        m.swap(next);
        result.iterations = it + 1;
        if (change < config.tol) {
            result.converged = true;
            break;
        }
    }

    result.ranking = candidates;
    for (std::size_t i = 0; i < n; ++i) {
        auto& e = result.ranking.entries[i];
        e.score = (1.0 - config.blend) * e.score + config.blend * ((m[i] + 1.0) / 2.0);
    }
    std::stable_sort(result.ranking.entries.begin(), result.ranking.entries.end(),
                     [](const FusedEntry& a, const FusedEntry& b) {
                         if (a.score != b.score) return a.score > b.score;
                         return a.id < b.id;
                     });
    return result;
}

std::vector<IsingSweepCell> ising_sweep(std::span<const IsingQuery> queries, const IsingGrid& grid,
                                        std::span<const bool> baseline_hits, const HitFn& hit,
                                        const IsingConfig& base) {
    if (baseline_hits.size() != queries.size()) throw Error("baseline hit count does not match queries");
    std::vector<IsingSweepCell> cells;
    for (double j : grid.couplings) {
        for (double t : grid.temperatures) {
            for (double b : grid.blends) {
                IsingConfig cfg = base;
                cfg.coupling = j;
                cfg.temperature = t;
                cfg.blend = b;
                IsingSweepCell cell{j, t, b, 0, 0, 0, 0};
                for (std::size_t q = 0; q < queries.size(); ++q) {
                    const auto r = mean_field_rerank(queries[q].candidates, queries[q].coupling, cfg);
                    if (!r.converged) ++cell.unconverged;
                    const bool h = hit(q, r.ranking);
                    if (h) ++cell.hits;
                    if (h && !baseline_hits[q]) ++cell.wins;
                    if (!h && baseline_hits[q]) ++cell.losses;
                }
                cells.push_back(cell);
            }
        }
    }
    return cells;
}

void write_ising_sweep_csv(std::ostream& out, std::span<const IsingSweepCell> cells) {
    out << "J,T,blend,wins,losses,net,hits,unconverged\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.6g,%zu,%zu,%lld,%zu,%zu\n", c.coupling, c.temperature,
                      c.blend, c.wins, c.losses,
                      static_cast<long long>(c.wins) - static_cast<long long>(c.losses), c.hits,
                      c.unconverged);
        out << buf;
    }
}

}  // namespace calfuse
