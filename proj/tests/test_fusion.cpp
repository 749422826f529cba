#include "calfuse/error.hpp"
#include "calfuse/fusion.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

using namespace calfuse;
using fixtures::with_probabilities;

namespace {

CalibratedList pit_auto(const ScoreList& l) {
    return l.empty() ? empty_calibrated(l.system) : calibrate(l, Normalizer::pit, TemperatureMode::auto_mode());
}

std::map<std::string, double> score_map(const FusedRanking& r) {
    std::map<std::string, double> out;
    for (const auto& e : r.entries) out[e.id] = e.score;
    return out;
}

std::vector<std::string> ids_of(const CalibratedList& l) {
    std::vector<std::string> out;
    for (const auto& e : l.entries) out.push_back(e.id);
    return out;
}

bool sorted_ranking(const FusedRanking& r) {
    for (std::size_t i = 1; i < r.entries.size(); ++i) {
        const auto& a = r.entries[i - 1];
        const auto& b = r.entries[i];
        if (a.score < b.score || (a.score == b.score && a.id >= b.id)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("thermo fusion by hand") {
    const auto v = with_probabilities(System::vector, {{"a", 0.7}, {"b", 0.3}});
    const auto g = with_probabilities(System::graph, {{"b", 0.6}, {"c", 0.4}});
    const FusedRanking r = thermo_fuse(v, g, 0.5, 0.5, 10);
    CHECK(r.ids() == std::vector<std::string>{"b", "a", "c"});
    CHECK(r.entries[0].score == doctest::Approx(0.95));
    CHECK(r.entries[1].score == doctest::Approx(0.35));
    CHECK(r.entries[2].score == doctest::Approx(0.20));
    CHECK(r.entries[0].consensus);
    CHECK(r.entries[1].in_vector);
    CHECK_FALSE(r.entries[1].in_graph);
    CHECK_FALSE(r.entries[2].consensus);

    CHECK(thermo_fuse(v, g, 0.5, 0.5, 2).entries.size() == 2);
    CHECK(thermo_fuse(empty_calibrated(System::vector), empty_calibrated(System::graph), 0.5, 0.5, 10)
              .entries.empty());
    CHECK_THROWS_AS(thermo_fuse(v, g, 0.5, 0.5, 0), Error);
}

TEST_CASE("a boost above one puts the consensus document first") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        auto pair = fixtures::random_pair(rng);
        // Force exactly one shared document.
        std::set<std::string> vids;
        for (const auto& e : pair.v.entries) vids.insert(e.id);
        std::vector<ScoredDoc> g;
        for (const auto& e : pair.g.entries) {
            if (!vids.count(e.id)) g.push_back(e);
        }
        const std::string shared = pair.v.entries.back().id;
        g.push_back({shared, 1e-4});
        sort_entries(g);
        const ScoreList gl{System::graph, g};
        const FusedRanking r = thermo_fuse(pit_auto(pair.v), pit_auto(gl), rng.uniform(), 1.0 + 1e-9 + rng.uniform(), 5);
        CHECK(r.entries.front().id == shared);
    }
}

TEST_CASE("reciprocal rank fusion") {
    const ScoreList v{System::vector, {{"x", 0.9}, {"y", 0.5}}};
    const ScoreList g{System::graph, {{"x", 0.3}, {"z", 0.2}, {"y", 0.1}}};
    const auto m = score_map(rrf_fuse(v, g, 60.0, 10));
    CHECK(m.at("x") == doctest::Approx(2.0 / 61.0).epsilon(1e-15));
    CHECK(m.at("x") == doctest::Approx(0.032787).epsilon(1e-5));
    CHECK(m.at("z") == doctest::Approx(1.0 / 62.0).epsilon(1e-15));
    CHECK(m.at("y") == doctest::Approx(1.0 / 62.0 + 1.0 / 63.0).epsilon(1e-15));
}

TEST_CASE("linear fusion") {
    const auto v = with_probabilities(System::vector, {{"a", 1.0}});
    const auto g = with_probabilities(System::graph, {{"a", 0.5}});
    CHECK(linear_fuse(v, g, 0.5, 0.0, 5).entries[0].score == doctest::Approx(0.75));

    // Boltzmann reweighting is not linear: same percentiles, different orders.
    const ScoreList vl{System::vector, {{"a", 3}, {"b", 2}, {"c", 1}, {"d", 0.5}}};
    const ScoreList gl{System::graph, {{"d", 9}, {"e", 8}, {"f", 7}, {"g", 6}, {"h", 5}, {"c", 4}, {"a", 3}, {"b", 2}}};
    const auto cv = calibrate(vl, Normalizer::pit, TemperatureMode::fixed(0.2));
    const auto cg = calibrate(gl, Normalizer::pit, TemperatureMode::fixed(0.2));
    CHECK(linear_fuse(cv, cg, 0.5, 0.0, 8).ids() != thermo_fuse(cv, cg, 0.5, 0.0, 8).ids());
}

TEST_CASE("strategy degeneracies on random instances") {
    Rng rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const auto pair = fixtures::random_pair(rng);
        const auto cv = pit_auto(pair.v);
        const auto cg = pit_auto(pair.g);
        const std::size_t all = pair.v.size() + pair.g.size();
        const double alpha = rng.uniform();

        // thermo with alpha 1 and no boost is the vector Boltzmann order.
        auto t1 = thermo_fuse(cv, cg, 1.0, 0.0, all).ids();
        const auto vids = ids_of(cv);
        t1.resize(vids.size());
        CHECK(t1 == vids);
        auto t0 = thermo_fuse(cv, cg, 0.0, 0.0, all).ids();
        const auto gids = ids_of(cg);
        t0.resize(gids.size());
        CHECK(t0 == gids);

        // log-linear with alpha 1 orders the vector documents by P_v.
        FusionConfig ll{1.0, 0.0, Strategy::log_linear, {}, all};
        const FusedRanking lr = strategy_fuse(cv, cg, ll);
        std::vector<std::string> in_v;
        for (const auto& e : lr.entries) {
            if (e.in_vector) in_v.push_back(e.id);
        }
        CHECK(in_v == vids);

        // Power mean with p = 1 is the weighted arithmetic mean.
        FusionConfig pm{alpha, 0.0, Strategy::power_mean, {}, all};
        pm.params.power_p = 1.0;
        const auto pmr = strategy_fuse(cv, cg, pm);
        const auto lin = linear_fuse(cv, cg, alpha, 0.0, all);
        const auto pms = score_map(pmr);
        for (const auto& [id, s] : score_map(lin)) CHECK(std::abs(pms.at(id) - s) < 1e-12);

        // Tsallis near q = 1 matches thermo.
        const double beta = rng.uniform(0.0, 1.5);
        FusionConfig ts{alpha, beta, Strategy::tsallis, {}, all};
        ts.params.tsallis_q = 1.0 + 1e-9;
        const auto tsm = score_map(strategy_fuse(cv, cg, ts));
        for (const auto& [id, s] : score_map(thermo_fuse(cv, cg, alpha, beta, all))) {
            CHECK(std::abs(tsm.at(id) - s) < 1e-6);
        }

        // Quantum with theta 0 is (sqrt(P_v) + sqrt(P_g))^2.
        FusionConfig qu{alpha, 0.0, Strategy::quantum, {}, all};
        std::map<std::string, double> pv, pg;
        for (const auto& e : cv.entries) pv[e.id] = e.probability;
        for (const auto& e : cg.entries) pg[e.id] = e.probability;
        for (const auto& e : strategy_fuse(cv, cg, qu).entries) {
            const double a = pv.count(e.id) ? pv[e.id] : qu.params.floor;
            const double b = pg.count(e.id) ? pg[e.id] : qu.params.floor;
            const double identity = (std::sqrt(a) + std::sqrt(b)) * (std::sqrt(a) + std::sqrt(b));
            CHECK(std::abs(e.score - identity) < 1e-12);
        }

        // RRF sees ranks only.
        const auto rrf = rrf_fuse(pair.v, pair.g, 60.0, all);
        CHECK(rrf == rrf_fuse(fixtures::monotone_transform(rng, pair.v), fixtures::monotone_transform(rng, pair.g), 60.0, all));
    }
}

TEST_CASE("every strategy returns a sorted subset of the union") {
    Rng rng(55);
    for (int trial = 0; trial < 60; ++trial) {
        const auto pair = fixtures::random_pair(rng);
        const auto cv = pit_auto(pair.v);
        const auto cg = pit_auto(pair.g);
        std::set<std::string> pool;
        for (const auto& e : pair.v.entries) pool.insert(e.id);
        for (const auto& e : pair.g.entries) pool.insert(e.id);
        for (Strategy s : all_strategies()) {
            FusionConfig c{rng.uniform(), 0.5, s, {}, 1 + rng.below(20)};
            const FusedRanking r = strategy_fuse(cv, cg, c);
            CHECK(r.entries.size() == std::min(c.k, pool.size()));
            CHECK(sorted_ranking(r));
            for (const auto& e : r.entries) {
                CHECK(pool.count(e.id) == 1);
                CHECK(e.consensus == (e.in_vector && e.in_graph));
                CHECK(std::isfinite(e.score));
            }
            CHECK(strategy_fuse(cv, cg, c) == r);
        }
    }
}

TEST_CASE("rank-based strategies ignore monotone rescaling") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const auto pair = fixtures::random_pair(rng);
        const auto tv = fixtures::monotone_transform(rng, pair.v);
        const auto tg = fixtures::monotone_transform(rng, pair.g);
        for (Strategy s : {Strategy::thermo, Strategy::linear, Strategy::log_linear, Strategy::power_mean, Strategy::tsallis}) {
            FusionConfig c{rng.uniform(), rng.uniform(0.0, 1.5), s, {}, 10};
            CHECK(strategy_fuse(pit_auto(pair.v), pit_auto(pair.g), c) == strategy_fuse(pit_auto(tv), pit_auto(tg), c));
        }
    }
}

TEST_CASE("copula and Plackett-Luce need overlap") {
    const auto v = with_probabilities(System::vector, {{"a", 0.6}, {"b", 0.4}});
    const auto g = with_probabilities(System::graph, {{"c", 0.7}, {"a", 0.3}});
    for (Strategy s : {Strategy::gumbel_copula, Strategy::plackett_luce}) {
        const FusedRanking r = strategy_fuse(v, g, FusionConfig{0.5, 0.2, s, {}, 5});
        CHECK(r.downgraded);
        FusedRanking plain = thermo_fuse(v, g, 0.5, 0.2, 5);
        CHECK(r.entries == plain.entries);
    }
    const auto g2 = with_probabilities(System::graph, {{"b", 0.7}, {"a", 0.3}});
    const FusedRanking r = strategy_fuse(v, g2, FusionConfig{0.5, 0.0, Strategy::gumbel_copula, {}, 5});
    CHECK_FALSE(r.downgraded);
    REQUIRE(r.copula_theta);
    // Two overlapping documents ranked oppositely: tau = -1, clamped to 1.
    CHECK(*r.copula_theta == 1.0);

    FusionConfig bad{0.5, 0.0, Strategy::gumbel_copula, {}, 5};
    bad.params.copula_theta = 0.5;
    CHECK_THROWS_AS(strategy_fuse(v, g2, bad), Error);
    FusionConfig badq{0.5, 0.0, Strategy::tsallis, {}, 5};
    badq.params.tsallis_q = 0.0;
    CHECK_THROWS_AS(strategy_fuse(v, g2, badq), Error);
    FusionConfig badp{0.5, 0.0, Strategy::power_mean, {}, 5};
    badp.params.power_p = 0.0;
    CHECK_THROWS_AS(strategy_fuse(v, g2, badp), Error);
}

TEST_CASE("building blocks") {
    const std::vector<double> x{1, 2, 3};
    const std::vector<double> y{1, 3, 2};
    CHECK(kendall_tau(x, y) == doctest::Approx(1.0 / 3.0));
    CHECK(kendall_tau(x, x) == doctest::Approx(1.0));
    const std::vector<double> flat{1, 1, 1};
    CHECK(kendall_tau(x, flat) == 0.0);

    CHECK(gumbel_theta_from_tau(0.5) == 2.0);
    CHECK(gumbel_theta_from_tau(-0.5) == 1.0);
    CHECK(gumbel_theta_from_tau(0.99) == 20.0);
    CHECK(gumbel_copula(0.3, 0.6, 1.0) == doctest::Approx(0.18));  // independence copula

    const std::vector<double> a{0, 1};
    const std::vector<double> b{0.5, 0.5};
    CHECK(wasserstein1(a, b) == doctest::Approx(0.5));
    const std::vector<double> c{0.1, 0.4, 0.7};
    const std::vector<double> d{0.3, 0.6, 0.9};
    CHECK(wasserstein1(c, d) == doctest::Approx(0.2));
    CHECK(wasserstein1(c, c) == 0.0);

    CHECK(log_q_exponential(0.7, 1.0) == 0.7);
    CHECK(log_q_exponential(-0.5, 1.0 + 1e-9) == doctest::Approx(-0.5).epsilon(1e-8));
    CHECK(std::isinf(log_q_exponential(-10.0, 0.5)));

    for (std::size_t n : {2u, 5u, 10u, 40u}) {
        const auto s = plackett_luce_strengths(n, 0.1, 200, 1e-12);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += s[i];
            if (i > 0) CHECK(s[i] < s[i - 1]);
        }
        CHECK(sum == doctest::Approx(1.0));
    }
}
