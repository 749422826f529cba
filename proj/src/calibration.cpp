#include "calfuse/calibration.hpp"

#include "calfuse/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace calfuse {

std::string_view to_string(Normalizer n) {
    switch (n) {
        case Normalizer::pit: return "pit";
        case Normalizer::minmax: return "minmax";
        case Normalizer::rawmax: return "rawmax";
    }
    return "pit";
}

Normalizer parse_normalizer(std::string_view text) {
    if (text == "pit") return Normalizer::pit;
    if (text == "minmax") return Normalizer::minmax;
    if (text == "rawmax") return Normalizer::rawmax;
    throw Error("unknown normalizer \"" + std::string(text) + "\" (expected pit, minmax, rawmax)");
}

std::string to_string(const TemperatureMode& t) {
    if (t.automatic) return "auto";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", t.value);
    return buf;
}

TemperatureMode parse_temperature(std::string_view text) {
    if (text == "auto") return TemperatureMode::auto_mode();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size() || !(v > 0.0)) {
        throw Error("temperature must be \"auto\" or a positive number, got \"" +
                    std::string(text) + "\"");
    }
    return TemperatureMode::fixed(v);
}

std::vector<double> pit_normalize(const ScoreList& list) {
    if (list.empty()) throw Error("cannot compute percentiles of an empty score list");
    std::vector<double> sorted;
    sorted.reserve(list.size());
    for (const auto& e : list.entries) sorted.push_back(e.score);
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    std::vector<double> out;
    out.reserve(list.size());
    for (const auto& e : list.entries) {
        const auto at_most = std::upper_bound(sorted.begin(), sorted.end(), e.score) - sorted.begin();
        out.push_back(static_cast<double>(at_most) / n);
    }
    return out;
}

std::vector<double> minmax_normalize(const ScoreList& list) {
    if (list.empty()) throw Error("cannot min-max normalize an empty score list");
    auto [lo, hi] = std::minmax_element(list.entries.begin(), list.entries.end(),
                                        [](const auto& a, const auto& b) { return a.score < b.score; });
    const double min = lo->score;
    const double span = hi->score - min;
    std::vector<double> out;
    out.reserve(list.size());
    for (const auto& e : list.entries) out.push_back(span > 0.0 ? (e.score - min) / span : 1.0);
    return out;
}

std::vector<double> rawmax_normalize(const ScoreList& list) {
    if (list.empty()) throw Error("cannot raw/max normalize an empty score list");
    double max = list.entries.front().score;
    for (const auto& e : list.entries) max = std::max(max, e.score);
    if (!(max > 0.0)) {
        throw Error("raw/max normalization needs a positive maximum score, got " + std::to_string(max));
    }
    std::vector<double> out;
    out.reserve(list.size());
    for (const auto& e : list.entries) out.push_back(e.score / max);
    return out;
}

std::vector<double> normalize(const ScoreList& list, Normalizer normalizer) {
    switch (normalizer) {
        case Normalizer::pit: return pit_normalize(list);
        case Normalizer::minmax: return minmax_normalize(list);
        case Normalizer::rawmax: return rawmax_normalize(list);
    }
    return pit_normalize(list);
}

std::vector<double> energies(std::span<const double> normalized, double epsilon) {
    std::vector<double> out;
    out.reserve(normalized.size());
    for (double p : normalized) out.push_back(-std::log(p + epsilon));
    return out;
}

double auto_temperature(std::span<const double> energy) {
    if (energy.empty()) throw Error("auto temperature needs at least one energy");
    const double mean = std::accumulate(energy.begin(), energy.end(), 0.0) /
                        static_cast<double>(energy.size());
    const double t = mean / 2.0;
    return t > kTemperatureFloor ? t : kTemperatureFloor;
}

std::vector<double> boltzmann(std::span<const double> energy, double temperature) {
    if (!(temperature > 0.0)) throw Error("Boltzmann temperature must be positive");
    std::vector<double> out;
    if (energy.empty()) return out;
    const double e_min = *std::min_element(energy.begin(), energy.end());
    out.reserve(energy.size());
    double z = 0.0;
    for (double e : energy) {
        out.push_back(std::exp(-(e - e_min) / temperature));
        z += out.back();
    }
    for (auto& p : out) p /= z;
    return out;
}

CalibratedList calibrate(const ScoreList& list, Normalizer normalizer, TemperatureMode temperature,
                         double epsilon) {
    if (list.empty()) throw Error("cannot calibrate an empty score list");
    if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
    if (!temperature.automatic && !(temperature.value > 0.0)) {
        throw Error("fixed temperature must be positive");
    }

    const auto norm = normalize(list, normalizer);
    const auto energy = energies(norm, epsilon);
    const double t = temperature.automatic ? auto_temperature(energy) : temperature.value;
    const auto prob = boltzmann(energy, t);

    CalibratedList out;
    out.system = list.system;
    out.temperature = t;
    out.epsilon = epsilon;
    out.normalizer = normalizer;
    out.entries.reserve(list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
        out.entries.push_back({list.entries[i].id, list.entries[i].score, norm[i], energy[i], prob[i]});
    }
    return out;
}

CalibratedList empty_calibrated(System system, Normalizer normalizer) {
    CalibratedList out;
    out.system = system;
    out.normalizer = normalizer;
    return out;
}

}  // namespace calfuse
