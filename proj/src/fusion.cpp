#include "calfuse/fusion.hpp"

#include "calfuse/error.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace calfuse {

namespace {

constexpr std::array kStrategies{
    Strategy::thermo,      Strategy::rrf,           Strategy::linear,
    Strategy::log_linear,  Strategy::power_mean,    Strategy::tsallis,
    Strategy::gumbel_copula, Strategy::plackett_luce, Strategy::quantum,
    Strategy::ot_align,    Strategy::wasserstein_t,
};

}  // namespace

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::thermo: return "thermo";
        case Strategy::rrf: return "rrf";
        case Strategy::linear: return "linear";
        case Strategy::log_linear: return "log_linear";
        case Strategy::power_mean: return "power_mean";
        case Strategy::tsallis: return "tsallis";
        case Strategy::gumbel_copula: return "gumbel_copula";
        case Strategy::plackett_luce: return "plackett_luce";
        case Strategy::quantum: return "quantum";
        case Strategy::ot_align: return "ot_align";
        case Strategy::wasserstein_t: return "wasserstein_t";
    }
    return "thermo";
}

Strategy parse_strategy(std::string_view text) {
    for (Strategy s : kStrategies) {
        if (to_string(s) == text) return s;
    }
    throw Error("unknown fusion strategy \"" + std::string(text) + "\"");
}

std::span<const Strategy> all_strategies() { return kStrategies; }

std::vector<std::string> FusedRanking::ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.id);
    return out;
}

namespace {

/// Per-document view of both systems.
struct Slot {
    std::string id;
    bool in_v = false;
    bool in_g = false;
    std::size_t rank_v = 0;  // 1-based
    std::size_t rank_g = 0;
    double prob_v = 0.0;
    double prob_g = 0.0;
    double norm_v = 0.0;
    double norm_g = 0.0;
    std::size_t row_v = 0;
    std::size_t row_g = 0;

    bool both() const { return in_v && in_g; }
};

std::vector<Slot> join(const CalibratedList& v, const CalibratedList& g) {
    std::vector<Slot> slots;
    std::unordered_map<std::string, std::size_t> at;
    slots.reserve(v.size() + g.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto& e = v.entries[i];
        auto [it, fresh] = at.emplace(e.id, slots.size());
        if (!fresh) throw Error("duplicate id \"" + e.id + "\" in vector list");
        Slot s;
        s.id = e.id;
        s.in_v = true;
        s.rank_v = i + 1;
        s.prob_v = e.probability;
        s.norm_v = e.normalized;
        s.row_v = i;
        slots.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto& e = g.entries[i];
        auto [it, fresh] = at.emplace(e.id, slots.size());
        if (fresh) {
            Slot s;
            s.id = e.id;
            slots.push_back(std::move(s));
        } else if (slots[it->second].in_g) {
            throw Error("duplicate id \"" + e.id + "\" in graph list");
        }
        Slot& s = slots[it->second];
        s.in_g = true;
        s.rank_g = i + 1;
        s.prob_g = e.probability;
        s.norm_g = e.normalized;
        s.row_g = i;
    }
    return slots;
}

template <typename ScoreFn>
FusedRanking rank_slots(const std::vector<Slot>& slots, std::size_t k, ScoreFn&& score) {
    FusedRanking out;
    out.entries.reserve(slots.size());
    for (const auto& s : slots) {
        out.entries.push_back({s.id, score(s), s.in_v, s.in_g, s.both()});
    }
    auto before = [](const FusedEntry& a, const FusedEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    };
    const std::size_t keep = std::min(k, out.entries.size());
    std::partial_sort(out.entries.begin(), out.entries.begin() + static_cast<std::ptrdiff_t>(keep),
                      out.entries.end(), before);
    out.entries.resize(keep);
    return out;
}

void check_common(double alpha, std::size_t k) {
    if (!std::isfinite(alpha)) throw Error("alpha must be finite");
    if (k < 1) throw Error("K must be at least 1");
}

std::size_t overlap(const std::vector<Slot>& slots) {
    return static_cast<std::size_t>(
        std::count_if(slots.begin(), slots.end(), [](const Slot& s) { return s.both(); }));
}

std::vector<double> column(const CalibratedList& list, double CalibratedEntry::*field) {
    std::vector<double> out;
    out.reserve(list.size());
    for (const auto& e : list.entries) out.push_back(e.*field);
    return out;
}

}  // namespace

FusedRanking thermo_fuse(const CalibratedList& v, const CalibratedList& g, double alpha, double beta,
                         std::size_t k) {
    check_common(alpha, k);
    const auto slots = join(v, g);
    return rank_slots(slots, k, [&](const Slot& s) {
        return alpha * s.prob_v + (1.0 - alpha) * s.prob_g + (s.both() ? beta : 0.0);
    });
}

FusedRanking rrf_fuse(const ScoreList& v, const ScoreList& g, double k0, std::size_t k) {
    if (k < 1) throw Error("K must be at least 1");
    CalibratedList cv, cg;
    for (const auto& e : v.entries) cv.entries.push_back({e.id, e.score, 0, 0, 0});
    for (const auto& e : g.entries) cg.entries.push_back({e.id, e.score, 0, 0, 0});
    const auto slots = join(cv, cg);
    return rank_slots(slots, k, [&](const Slot& s) {
        double score = 0.0;
        if (s.in_v) score += 1.0 / (k0 + static_cast<double>(s.rank_v));
        if (s.in_g) score += 1.0 / (k0 + static_cast<double>(s.rank_g));
        return score;
    });
}

FusedRanking linear_fuse(const CalibratedList& v, const CalibratedList& g, double alpha, double beta,
                         std::size_t k) {
    check_common(alpha, k);
    const auto slots = join(v, g);
    return rank_slots(slots, k, [&](const Slot& s) {
        return alpha * s.norm_v + (1.0 - alpha) * s.norm_g + (s.both() ? beta : 0.0);
    });
}

ScoreList as_score_list(const CalibratedList& list) {
    ScoreList out{list.system, {}};
    out.entries.reserve(list.size());
    for (const auto& e : list.entries) out.entries.push_back({e.id, e.raw});
    return out;
}

double log_q_exponential(double x, double q) {
    if (q == 1.0) return x;
    const double arg = (1.0 - q) * x;
    if (!(arg > -1.0)) return -std::numeric_limits<double>::infinity();
    return std::log1p(arg) / (1.0 - q);
}

std::vector<double> tsallis_weights(std::span<const double> energy, double temperature, double q) {
    if (!(q > 0.0)) throw Error("Tsallis q must be positive");
    if (!(temperature > 0.0)) throw Error("Tsallis temperature must be positive");
    std::vector<double> logw;
    logw.reserve(energy.size());
    for (double e : energy) logw.push_back(log_q_exponential(-e / temperature, q));
    std::vector<double> out(energy.size(), 0.0);
    if (energy.empty()) return out;
    const double top = *std::max_element(logw.begin(), logw.end());
    if (!std::isfinite(top)) {
        std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(out.size()));
        return out;
    }
    double z = 0.0;
    for (std::size_t i = 0; i < logw.size(); ++i) {
        out[i] = std::exp(logw[i] - top);
        z += out[i];
    }
    for (auto& w : out) w /= z;
    return out;
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = std::min(x.size(), y.size());
    double concordant = 0.0, discordant = 0.0, ties_x = 0.0, ties_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0.0 && dy == 0.0) continue;
            if (dx == 0.0) {
                ties_x += 1.0;
            } else if (dy == 0.0) {
                ties_y += 1.0;
            } else if ((dx > 0.0) == (dy > 0.0)) {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    const double denom = std::sqrt((concordant + discordant + ties_x) * (concordant + discordant + ties_y));
    return denom > 0.0 ? (concordant - discordant) / denom : 0.0;
}

double gumbel_theta_from_tau(double tau) {
    if (tau >= 1.0) return 20.0;
    return std::clamp(1.0 / (1.0 - tau), 1.0, 20.0);
}

double gumbel_copula(double u, double v, double theta) {
    const double a = std::pow(-std::log(u), theta);
    const double b = std::pow(-std::log(v), theta);
    return std::exp(-std::pow(a + b, 1.0 / theta));
}

std::vector<double> plackett_luce_strengths(std::size_t n, double pseudo_count,
                                            std::size_t max_iterations, double tolerance) {
    if (n == 0) return {};
    if (n == 1) return {1.0};
    if (!(pseudo_count > 0.0)) throw Error("Plackett-Luce pseudo-count must be positive");

    const std::size_t stages = n - 1;  // the last pick is forced
    std::vector<double> gamma(n, 1.0 / static_cast<double>(n));
    std::vector<double> wins(n, 1.0 + pseudo_count);
    wins[n - 1] = pseudo_count;
    std::vector<double> tail(n);
    std::vector<double> next(n);

    for (std::size_t it = 0; it < max_iterations; ++it) {
        // tail[j] = sum of strengths still available at stage j
        double acc = 0.0;
        for (std::size_t j = n; j-- > 0;) {
            acc += gamma[j];
            tail[j] = acc;
        }
        double denom = 0.0;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i < stages) denom += 1.0 / tail[i];
            next[i] = wins[i] / denom;
            total += next[i];
        }
        double change = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            next[i] /= total;
            change = std::max(change, std::abs(next[i] - gamma[i]) / gamma[i]);
        }
        gamma.swap(next);
        if (change < tolerance) break;
    }
    return gamma;
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) return 0.0;
    std::vector<double> xa(a.begin(), a.end());
    std::vector<double> xb(b.begin(), b.end());
    std::sort(xa.begin(), xa.end());
    std::sort(xb.begin(), xb.end());
    // Integrate |F_a - F_b| between consecutive breakpoints.
    std::vector<double> points;
    points.reserve(xa.size() + xb.size());
    std::merge(xa.begin(), xa.end(), xb.begin(), xb.end(), std::back_inserter(points));
    const double na = static_cast<double>(xa.size());
    const double nb = static_cast<double>(xb.size());
    double total = 0.0;
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
        while (ia < xa.size() && xa[ia] <= points[i]) ++ia;
        while (ib < xb.size() && xb[ib] <= points[i]) ++ib;
        const double gap = points[i + 1] - points[i];
        if (gap > 0.0) total += std::abs(static_cast<double>(ia) / na - static_cast<double>(ib) / nb) * gap;
    }
    return total;
}

namespace {

FusedRanking downgrade(const CalibratedList& v, const CalibratedList& g, const FusionConfig& c) {
    auto out = thermo_fuse(v, g, c.alpha, c.beta, c.k);
    out.downgraded = true;
    return out;
}

FusedRanking fuse_gumbel(const FusionConfig& c, const std::vector<Slot>& slots) {
    const auto& p = c.params;
    double theta = 0.0;
    if (p.copula_theta) {
        theta = *p.copula_theta;
        if (!(theta >= 1.0)) throw Error("Gumbel copula theta must be >= 1");
    } else {
        std::vector<double> xs, ys;
        for (const auto& s : slots) {
            if (!s.both()) continue;
            xs.push_back(s.norm_v);
            ys.push_back(s.norm_g);
        }
        theta = gumbel_theta_from_tau(kendall_tau(xs, ys));
    }
    auto clip = [&](double u) { return std::clamp(u, p.floor, 1.0); };
    auto out = rank_slots(slots, c.k, [&](const Slot& s) {
        const double u = s.in_v ? clip(s.norm_v) : p.floor;
        const double w = s.in_g ? clip(s.norm_g) : p.floor;
        return gumbel_copula(u, w, theta);
    });
    out.copula_theta = theta;
    return out;
}

FusedRanking fuse_plackett_luce(const CalibratedList& v, const CalibratedList& g,
                                const FusionConfig& c, const std::vector<Slot>& slots) {
    const auto& p = c.params;
    const auto sv = plackett_luce_strengths(v.size(), p.pl_pseudo_count, p.pl_max_iterations, p.pl_tolerance);
    const auto sg = plackett_luce_strengths(g.size(), p.pl_pseudo_count, p.pl_max_iterations, p.pl_tolerance);
    return rank_slots(slots, c.k, [&](const Slot& s) {
        const double gv = s.in_v ? sv[s.row_v] : p.floor;
        const double gg = s.in_g ? sg[s.row_g] : p.floor;
        return std::pow(gv, c.alpha) * std::pow(gg, 1.0 - c.alpha);
    });
}

}  // namespace

FusedRanking strategy_fuse(const CalibratedList& v, const CalibratedList& g,
                           const FusionConfig& config) {
    check_common(config.alpha, config.k);
    const auto& p = config.params;
    const double a = config.alpha;

    switch (config.strategy) {
        case Strategy::thermo:
            return thermo_fuse(v, g, a, config.beta, config.k);
        case Strategy::rrf:
            return rrf_fuse(as_score_list(v), as_score_list(g), p.rrf_k0, config.k);
        case Strategy::linear:
            return linear_fuse(v, g, a, config.beta, config.k);
        default:
            break;
    }

    const auto slots = join(v, g);
    switch (config.strategy) {
        case Strategy::log_linear:
            return rank_slots(slots, config.k, [&](const Slot& s) {
                const double pv = s.in_v ? s.prob_v : p.floor;
                const double pg = s.in_g ? s.prob_g : p.floor;
                return std::pow(pv, a) * std::pow(pg, 1.0 - a);
            });

        case Strategy::power_mean: {
            const double e = p.power_p;
            if (e == 0.0 || !std::isfinite(e)) throw Error("power mean exponent p must be finite and non-zero");
            return rank_slots(slots, config.k, [&](const Slot& s) {
                double sum = 0.0;
                const std::array<std::pair<double, double>, 2> terms{
                    std::pair{a, s.in_v ? s.norm_v : 0.0}, std::pair{1.0 - a, s.in_g ? s.norm_g : 0.0}};
                for (auto [w, x] : terms) {
                    if (w == 0.0) continue;
                    if (x <= 0.0 && e < 0.0) return 0.0;  // limit of the mean as x -> 0
                    sum += w * std::pow(x, e);
                }
                return sum > 0.0 ? std::pow(sum, 1.0 / e) : 0.0;
            });
        }

        case Strategy::tsallis: {
            if (!(p.tsallis_q > 0.0)) throw Error("Tsallis q must be positive");
            const auto wv = v.empty() ? std::vector<double>{}
                                      : tsallis_weights(column(v, &CalibratedEntry::energy), v.temperature, p.tsallis_q);
            const auto wg = g.empty() ? std::vector<double>{}
                                      : tsallis_weights(column(g, &CalibratedEntry::energy), g.temperature, p.tsallis_q);
            return rank_slots(slots, config.k, [&](const Slot& s) {
                const double pv = s.in_v ? wv[s.row_v] : 0.0;
                const double pg = s.in_g ? wg[s.row_g] : 0.0;
                return a * pv + (1.0 - a) * pg + (s.both() ? config.beta : 0.0);
            });
        }

        case Strategy::gumbel_copula:
            if (p.copula_theta && !(*p.copula_theta >= 1.0)) throw Error("Gumbel copula theta must be >= 1");
            if (overlap(slots) < 2) return downgrade(v, g, config);
            return fuse_gumbel(config, slots);

        case Strategy::plackett_luce:
            if (overlap(slots) < 2) return downgrade(v, g, config);
            return fuse_plackett_luce(v, g, config, slots);

        case Strategy::quantum: {
            const double c = std::cos(p.quantum_theta);
            return rank_slots(slots, config.k, [&](const Slot& s) {
                const double pv = s.in_v ? s.prob_v : p.floor;
                const double pg = s.in_g ? s.prob_g : p.floor;
                return pv + pg + 2.0 * std::sqrt(pv * pg) * c;
            });
        }

        case Strategy::ot_align: {
            const boost::math::normal_distribution<double> unit;
            auto aligned = [&](double u) {
                return boost::math::quantile(unit, std::clamp(u, p.floor, 1.0 - p.floor));
            };
            return rank_slots(slots, config.k, [&](const Slot& s) {
                const double zv = aligned(s.in_v ? s.norm_v : 0.0);
                const double zg = aligned(s.in_g ? s.norm_g : 0.0);
                return a * zv + (1.0 - a) * zg;
            });
        }

        case Strategy::wasserstein_t: {
            const double w1 = wasserstein1(column(v, &CalibratedEntry::normalized),
                                           column(g, &CalibratedEntry::normalized));
            auto reweight = [&](const CalibratedList& list) {
                if (list.empty()) return std::vector<double>{};
                const double t = p.t0.value_or(list.temperature) * (1.0 + p.gamma * w1);
                if (!(t > 0.0)) throw Error("Wasserstein-T temperature must be positive");
                return boltzmann(column(list, &CalibratedEntry::energy), t);
            };
            const auto wv = reweight(v);
            const auto wg = reweight(g);
            return rank_slots(slots, config.k, [&](const Slot& s) {
                const double pv = s.in_v ? wv[s.row_v] : 0.0;
                const double pg = s.in_g ? wg[s.row_g] : 0.0;
                return a * pv + (1.0 - a) * pg + (s.both() ? config.beta : 0.0);
            });
        }

        default:
            break;
    }
    throw Error("unhandled strategy");
}

}  // namespace calfuse
