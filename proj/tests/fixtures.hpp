#pragma once

// Random score lists shaped like the two retrievers: a short narrow cosine
// list and a longer heavy-tailed graph list over a shared id pool.

#include "calfuse/calibration.hpp"
#include "calfuse/fusion.hpp"
#include "calfuse/retrieval.hpp"
#include "calfuse/rng.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

namespace fixtures {

inline std::string doc_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "d%03zu", i);
    return buf;
}

/// `n` distinct ids drawn from a pool of `pool` ids.
inline std::vector<std::string> pick_ids(calfuse::Rng& rng, std::size_t n, std::size_t pool) {
    std::set<std::size_t> chosen;
    while (chosen.size() < n) chosen.insert(rng.below(pool));
    std::vector<std::string> out;
    for (auto i : chosen) out.push_back(doc_id(i));
    return out;
}

/// Distinct scores: cosine-like values for the vector side, Pareto-like
/// values for the graph side.
inline calfuse::ScoreList random_list(calfuse::Rng& rng, calfuse::System sys, std::size_t n,
                                      std::size_t pool) {
    std::vector<calfuse::ScoredDoc> entries;
    std::set<double> used;
    for (const auto& id : pick_ids(rng, n, pool)) {
        double s = 0.0;
        do {
            s = sys == calfuse::System::vector ? rng.normal(0.09, 0.02) + 0.2
                                               : 0.001 * std::pow(1.0 - rng.uniform(), -1.5);
            s = std::round(s * 1e6) / 1e6;  // keep gaps far above rounding noise
        } while (used.count(s) != 0 || s > 1.0);
        used.insert(s);
        entries.push_back({id, s});
    }
    calfuse::sort_entries(entries);
    return {sys, std::move(entries)};
}

struct ListPair {
    calfuse::ScoreList v;
    calfuse::ScoreList g;
};

inline ListPair random_pair(calfuse::Rng& rng) {
    const std::size_t pool = 20 + rng.below(40);
    const std::size_t nv = 2 + rng.below(9);
    const std::size_t ng = 2 + rng.below(pool - 2);
    return {random_list(rng, calfuse::System::vector, nv, pool),
            random_list(rng, calfuse::System::graph, ng, pool)};
}

/// A randomly chosen strictly increasing map applied to every score.
inline calfuse::ScoreList monotone_transform(calfuse::Rng& rng, const calfuse::ScoreList& list) {
    const double a = 0.5 + 4.0 * rng.uniform();
    const double b = rng.uniform(-2.0, 2.0);
    const std::function<double(double)> maps[] = {
        [=](double s) { return std::exp(a * s) + b; },
        [=](double s) { return s * s * s + a * s + b; },
        [=](double s) { return std::atan(a * s) + b; },
        [=](double s) { return a * s + b; },
        [=](double s) { return std::log1p(std::exp(a * s)); },
    };
    const auto& f = maps[rng.below(std::size(maps))];
    calfuse::ScoreList out = list;
    for (auto& e : out.entries) e.score = f(e.score);
    return out;
}

inline calfuse::CalibratedList with_probabilities(calfuse::System sys,
                                                  std::vector<std::pair<std::string, double>> rows) {
    calfuse::CalibratedList out;
    out.system = sys;
    for (auto& [id, p] : rows) out.entries.push_back({id, p, p, -std::log(p + 1e-6), p});
    return out;
}

}  // namespace fixtures
