#pragma once

#include "calfuse/retrieval.hpp"

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calfuse {

enum class Normalizer { pit, minmax, rawmax };

std::string_view to_string(Normalizer n);
Normalizer parse_normalizer(std::string_view text);

inline constexpr double kDefaultEpsilon = 1e-6;
inline constexpr double kTemperatureFloor = 1e-6;

/// Either the mean-energy heuristic or a fixed value.
struct TemperatureMode {
    bool automatic = true;
    double value = 0.0;

    static TemperatureMode auto_mode() { return {}; }
    static TemperatureMode fixed(double t) { return {false, t}; }
    friend bool operator==(const TemperatureMode&, const TemperatureMode&) = default;
};

std::string to_string(const TemperatureMode& t);
/// "auto" or a positive number.
TemperatureMode parse_temperature(std::string_view text);

struct CalibratedEntry {
    std::string id;
    double raw = 0.0;
    double normalized = 0.0;  ///< percentile for pit; min-max or raw/max value otherwise
    double energy = 0.0;
    double probability = 0.0;
};

/// A ScoreList mapped onto the shared scale. Entries keep the input order.
struct CalibratedList {
    System system = System::vector;
    std::vector<CalibratedEntry> entries;
    double temperature = 1.0;
    double epsilon = kDefaultEpsilon;
    Normalizer normalizer = Normalizer::pit;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

/// Empirical CDF value of each entry: |{j : s_j <= s_i}| / N. Aligned with
/// `list.entries`. Throws on an empty list.
std::vector<double> pit_normalize(const ScoreList& list);

/// (s - min) / (max - min); a constant list maps to all ones.
std::vector<double> minmax_normalize(const ScoreList& list);

/// s / max. Throws when max <= 0.
std::vector<double> rawmax_normalize(const ScoreList& list);

std::vector<double> normalize(const ScoreList& list, Normalizer normalizer);

/// E = -ln(p + epsilon).
std::vector<double> energies(std::span<const double> normalized, double epsilon = kDefaultEpsilon);

/// Half the mean energy, floored at kTemperatureFloor.
double auto_temperature(std::span<const double> energy);

/// exp(-E/T) / Z, evaluated with the minimum energy shifted to zero.
std::vector<double> boltzmann(std::span<const double> energy, double temperature);

/// Normalize, convert to energies, pick the temperature, and weight.
/// Throws on an empty list; see empty_calibrated() for a retriever that
/// returned nothing.
CalibratedList calibrate(const ScoreList& list, Normalizer normalizer, TemperatureMode temperature,
                         double epsilon = kDefaultEpsilon);

/// Placeholder for a retriever with no candidates; fuses as "absent".
CalibratedList empty_calibrated(System system, Normalizer normalizer = Normalizer::pit);

}  // namespace calfuse
