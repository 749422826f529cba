#include "calfuse/calibration.hpp"
#include "calfuse/error.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace calfuse;

namespace {

ScoreList scores(std::vector<double> raw) {
    std::vector<ScoredDoc> entries;
    for (std::size_t i = 0; i < raw.size(); ++i) entries.push_back({fixtures::doc_id(i), raw[i]});
    sort_entries(entries);
    return {System::vector, entries};
}

/// Percentile looked up by id, so tests do not depend on list order.
double pit_of(const ScoreList& l, const std::vector<double>& pit, const std::string& id) {
    for (std::size_t i = 0; i < l.size(); ++i) {
        if (l.entries[i].id == id) return pit[i];
    }
    FAIL("missing id " << id);
    return 0.0;
}

}  // namespace

TEST_CASE("pit percentiles") {
    const ScoreList l = scores({0.1, 0.2, 0.3});
    const auto p = pit_normalize(l);
    CHECK(pit_of(l, p, "d000") == doctest::Approx(1.0 / 3.0));
    CHECK(pit_of(l, p, "d001") == doctest::Approx(2.0 / 3.0));
    CHECK(pit_of(l, p, "d002") == 1.0);

    for (double x : pit_normalize(scores({0.5, 0.5, 0.5}))) CHECK(x == 1.0);
    // Ties share the larger percentile.
    const ScoreList t = scores({0.1, 0.2, 0.2, 0.4});
    const auto pt = pit_normalize(t);
    CHECK(pit_of(t, pt, "d001") == 0.75);
    CHECK(pit_of(t, pt, "d002") == 0.75);
    CHECK(pit_of(t, pt, "d000") == 0.25);

    CHECK_THROWS_AS(pit_normalize(ScoreList{}), Error);
}

TEST_CASE("min-max and raw/max") {
    const ScoreList l = scores({2, 4, 6});
    const auto m = minmax_normalize(l);
    CHECK(pit_of(l, m, "d000") == 0.0);
    CHECK(pit_of(l, m, "d001") == 0.5);
    CHECK(pit_of(l, m, "d002") == 1.0);
    for (double x : minmax_normalize(scores({3, 3}))) CHECK(x == 1.0);

    const ScoreList r = scores({1, 2, 4});
    const auto rm = rawmax_normalize(r);
    CHECK(pit_of(r, rm, "d000") == 0.25);
    CHECK(pit_of(r, rm, "d001") == 0.5);
    CHECK(pit_of(r, rm, "d002") == 1.0);
    CHECK_THROWS_AS(rawmax_normalize(scores({-3, -1})), Error);
    CHECK_THROWS_AS(rawmax_normalize(scores({0, 0})), Error);
}

TEST_CASE("energies and temperature") {
    const std::vector<double> p{0.0, 1.0};
    const auto e = energies(p, 1e-6);
    CHECK(e[0] == doctest::Approx(13.815510557964274).epsilon(1e-14));
    CHECK(e[1] == doctest::Approx(-9.999995000003334e-07).epsilon(1e-12));
    CHECK(e[1] < 0.0);

    const std::vector<double> grid{0.1, 0.2, 0.5, 0.9, 1.0};
    const auto eg = energies(grid);
    CHECK(std::is_sorted(eg.rbegin(), eg.rend()));
    CHECK(std::adjacent_find(eg.begin(), eg.end()) == eg.end());

    const std::vector<double> two{1.0, 3.0};
    CHECK(auto_temperature(two) == 1.0);
    const std::vector<double> negative(4, -1e-6);
    CHECK(auto_temperature(negative) == kTemperatureFloor);
    CHECK_THROWS_AS(auto_temperature(std::vector<double>{}), Error);

    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> pct(10);
        for (double& x : pct) x = rng.uniform();
        const auto en = energies(pct);
        double oracle = 0.0;
        for (double x : pct) oracle += -std::log(x + 1e-6);
        oracle /= 20.0;
        CHECK(std::abs(auto_temperature(en) - oracle) < 1e-12);
    }
}

TEST_CASE("boltzmann weights") {
    const std::vector<double> e{0.0, 1.0};
    const auto p = boltzmann(e, 0.5);
    CHECK(p[0] == doctest::Approx(0.8807970779778823).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.11920292202211755).epsilon(1e-13));

    const std::vector<double> flat(4, 2.5);
    for (double x : boltzmann(flat, 0.3)) CHECK(x == doctest::Approx(0.25));

    // Tiny temperatures stay finite thanks to the shift.
    const std::vector<double> spread{0.0, 5.0, 800.0};
    const auto peaked = boltzmann(spread, 1e-6);
    CHECK(peaked[0] == 1.0);
    CHECK(peaked[2] == 0.0);
    CHECK_THROWS_AS(boltzmann(e, 0.0), Error);

    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> en(1 + rng.below(30));
        for (double& x : en) x = rng.uniform(-1.0, 14.0);
        const auto w = boltzmann(en, rng.uniform(0.01, 5.0));
        CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) < 1e-9);
    }
}

TEST_CASE("calibrated list invariants") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const ScoreList l = fixtures::random_list(rng, System::graph, 10 + rng.below(60), 200);
        for (Normalizer n : {Normalizer::pit, Normalizer::minmax, Normalizer::rawmax}) {
            const CalibratedList c = calibrate(l, n, TemperatureMode::auto_mode());
            REQUIRE(c.size() == l.size());
            double total = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i) {
                CHECK(c.entries[i].id == l.entries[i].id);
                total += c.entries[i].probability;
                if (i > 0) {
                    // List is score-descending, all distinct.
                    CHECK(c.entries[i].normalized <= c.entries[i - 1].normalized);
                    CHECK(c.entries[i].energy > c.entries[i - 1].energy);
                    CHECK(c.entries[i].probability < c.entries[i - 1].probability);
                }
            }
            CHECK(std::abs(total - 1.0) < 1e-9);
            CHECK(c.temperature > 0.0);
            if (n == Normalizer::pit) CHECK(c.entries.front().normalized == 1.0);
        }
    }
}

TEST_CASE("fixed temperature equal to the auto value gives identical probabilities") {
    // raw/max values {1, e^-4}: energies about {0, 4}, so the auto temperature is about 1.
    const ScoreList l = scores({1.0, std::exp(-4.0)});
    const CalibratedList a = calibrate(l, Normalizer::rawmax, TemperatureMode::auto_mode());
    CHECK(a.temperature == doctest::Approx(1.0).epsilon(1e-4));
    const CalibratedList f = calibrate(l, Normalizer::rawmax, TemperatureMode::fixed(a.temperature));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.entries[i].probability == f.entries[i].probability);
    const CalibratedList one = calibrate(l, Normalizer::rawmax, TemperatureMode::fixed(1.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(one.entries[i].probability == doctest::Approx(a.entries[i].probability).epsilon(1e-4));
    }
}

TEST_CASE("normalizer choice matters on heavy-tailed lists") {
    Rng rng(21);
    const ScoreList l = fixtures::random_list(rng, System::graph, 200, 1000);
    const auto pit = calibrate(l, Normalizer::pit, TemperatureMode::auto_mode());
    const auto mm = calibrate(l, Normalizer::minmax, TemperatureMode::auto_mode());
    double diff = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) diff += std::abs(pit.entries[i].probability - mm.entries[i].probability);
    CHECK(diff > 0.1);
    // Min-max keeps the spike: most values land in the lowest decile.
    const auto norm = minmax_normalize(l);
    CHECK(std::count_if(norm.begin(), norm.end(), [](double x) { return x < 0.1; }) > 100);
}

TEST_CASE("pit is invariant under increasing transforms; min-max is not") {
    Rng rng(33);
    int minmax_changes = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const ScoreList l = fixtures::random_list(rng, System::graph, 5 + rng.below(50), 100);
        const ScoreList t = fixtures::monotone_transform(rng, l);
        const auto a = calibrate(l, Normalizer::pit, TemperatureMode::auto_mode());
        const auto b = calibrate(t, Normalizer::pit, TemperatureMode::auto_mode());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(std::abs(a.entries[i].normalized - b.entries[i].normalized) <= 1e-12);
            CHECK(std::abs(a.entries[i].energy - b.entries[i].energy) <= 1e-12);
            CHECK(std::abs(a.entries[i].probability - b.entries[i].probability) <= 1e-12);
        }
        const auto ma = calibrate(l, Normalizer::minmax, TemperatureMode::auto_mode());
        const auto mb = calibrate(t, Normalizer::minmax, TemperatureMode::auto_mode());
        for (std::size_t i = 0; i < ma.size(); ++i) {
            if (std::abs(ma.entries[i].probability - mb.entries[i].probability) > 1e-9) {
                ++minmax_changes;
                break;
            }
        }
    }
    CHECK(minmax_changes > 0);
}

TEST_CASE("pit marginals are exactly uniform for distinct scores") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(100);
        auto p = pit_normalize(fixtures::random_list(rng, System::vector, n, 500));
        std::sort(p.begin(), p.end());
        for (std::size_t i = 0; i < n; ++i) CHECK(p[i] == static_cast<double>(i + 1) / static_cast<double>(n));
    }
}

TEST_CASE("lower temperature is more peaked") {
    Rng rng(12);
    const ScoreList l = fixtures::random_list(rng, System::vector, 10, 50);
    double previous = 1.1;
    for (double t : {0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0}) {
        const auto c = calibrate(l, Normalizer::pit, TemperatureMode::fixed(t));
        double top = 0.0;
        for (const auto& e : c.entries) top = std::max(top, e.probability);
        CHECK(top <= previous);
        // argmax of probability is the top raw score.
        CHECK(c.entries.front().probability == top);
        previous = top;
    }
}

TEST_CASE("temperature parsing and empty placeholders") {
    CHECK(parse_temperature("auto").automatic);
    CHECK(parse_temperature("0.3") == TemperatureMode::fixed(0.3));
    CHECK_THROWS_AS(parse_temperature("-1"), Error);
    CHECK_THROWS_AS(parse_temperature("warm"), Error);
    CHECK(parse_normalizer("minmax") == Normalizer::minmax);
    CHECK_THROWS_AS(parse_normalizer("zscore"), Error);
    CHECK(empty_calibrated(System::graph).empty());
    CHECK_THROWS_AS(calibrate(ScoreList{}, Normalizer::pit, TemperatureMode::auto_mode()), Error);
}
