#include "calfuse/synth.hpp"

#include "calfuse/calibration.hpp"
#include "calfuse/error.hpp"
#include "calfuse/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace calfuse {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    SynthConfig, seed, n_passages, n_queries, hops_min, hops_max, dimension, cosine_mean, cosine_sd,
    first_hop_alignment, last_hop_alignment, alignment_jitter, near_misses, near_miss_low,
    near_miss_high, entity_vocab, entities_per_passage_min, entities_per_passage_max, alias_rate,
    alias_similarity, distractor_density, near_miss_entity_rate, entity_dimension)

namespace {

bool unit_interval(double x) { return x >= 0.0 && x <= 1.0; }

std::string format(const char* fmt, std::size_t v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

/// Random unit vector over coordinates [first, dim); coordinates below
/// `first` are zero.
std::vector<double> random_unit(Rng& rng, std::size_t dim, std::size_t first) {
    std::vector<double> v(dim, 0.0);
    double norm = 0.0;
    while (norm == 0.0) {
        for (std::size_t i = first; i < dim; ++i) v[i] = rng.normal();
        norm = std::sqrt(dot(v, v));
    }
    for (double& x : v) x /= norm;
    return v;
}

/// Random unit vector orthogonal to the unit vector `u` (and to the
/// coordinates below `first`).
std::vector<double> orthogonal_unit(Rng& rng, std::span<const double> u, std::size_t first) {
    for (;;) {
        std::vector<double> v = random_unit(rng, u.size(), first);
        const double d = dot(v, u);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * u[i];
        const double norm = std::sqrt(dot(v, v));
        if (norm < 1e-9) continue;
        for (double& x : v) x /= norm;
        return v;
    }
}

/// a * x + b * y.
std::vector<double> mix(double a, std::span<const double> x, double b, std::span<const double> y) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

struct QueryPlan {
    std::string id;
    std::string topic;
    std::vector<std::string> bridges;       // canonical names, one per hop boundary
    std::vector<bool> bridge_aliased;       // next hop mentions the alias
    std::vector<double> query_direction;    // unit, noise subspace only
};

std::string alias_name(const std::string& canonical) { return canonical + "_alias"; }

}  // namespace

void validate(const SynthConfig& c) {
    if (c.n_queries == 0) throw Error("synth: n_queries must be positive");
    if (c.hops_min < 2 || c.hops_min > c.hops_max) throw Error("synth: need 2 <= hops_min <= hops_max");
    if (c.dimension < 3) throw Error("synth: dimension must be at least 3");
    if (c.entity_dimension < 2) throw Error("synth: entity_dimension must be at least 2");
    if (c.entities_per_passage_min > c.entities_per_passage_max) {
        throw Error("synth: entities_per_passage_min exceeds entities_per_passage_max");
    }
    if (c.entities_per_passage_max > c.entity_vocab) {
        throw Error("synth: more entities per passage (" + std::to_string(c.entities_per_passage_max) +
                    ") than the vocabulary holds (" + std::to_string(c.entity_vocab) + ")");
    }
    if (!(c.cosine_mean > 0.0 && c.cosine_mean < 1.0)) throw Error("synth: cosine_mean must be in (0, 1)");
    if (!(c.cosine_sd > 0.0)) throw Error("synth: cosine_sd must be positive");
    for (double x : {c.first_hop_alignment, c.last_hop_alignment, c.near_miss_low, c.near_miss_high,
                     c.alias_rate, c.distractor_density, c.near_miss_entity_rate}) {
        if (!unit_interval(x)) throw Error("synth: rates and alignments must lie in [0, 1]");
    }
    if (c.near_miss_low > c.near_miss_high) throw Error("synth: near_miss_low exceeds near_miss_high");
    if (c.alignment_jitter < 0.0) throw Error("synth: alignment_jitter must be non-negative");
    if (!(c.alias_similarity > 0.0 && c.alias_similarity <= 1.0)) {
        throw Error("synth: alias_similarity must be in (0, 1]");
    }
    const std::size_t gold_max = c.n_queries * (c.hops_max + c.near_misses);
    if (gold_max > c.n_passages) {
        throw Error("synth: n_passages (" + std::to_string(c.n_passages) +
                    ") cannot hold every chain and near miss (up to " + std::to_string(gold_max) + ")");
    }
}

SynthConfig parse_synth_config(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("synth config: ") + e.what());
    }
    if (!j.is_object()) throw Error("synth config must be a JSON object");
    const nlohmann::json defaults = SynthConfig{};
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw Error("synth config: unknown key \"" + key + "\"");
    }
    try {
        return j.get<SynthConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("synth config: ") + e.what());
    }
}

SynthConfig load_synth_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open synth config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_synth_config(ss.str());
}

std::string synth_config_json(const SynthConfig& config) {
    const nlohmann::json j = config;
    return j.dump(2);
}

Geometry calibrate_geometry(double mean, double sd, std::size_t dimension) {
    // Unrelated pairs: cos = a*g + sqrt(1-a^2) sqrt(1-g^2) * (u . v) with u, v
    // independent unit vectors in dimension-1 coordinates, so sd of the dot
    // term is 1/sqrt(dimension-1).
    const double target = sd * std::sqrt(static_cast<double>(dimension - 1));
    auto spread = [&](double a) {
        const double g = mean / a;
        return std::sqrt(1.0 - a * a) * std::sqrt(std::max(0.0, 1.0 - g * g));
    };
    double lo = std::sqrt(mean);  // symmetric split maximizes the spread
    double hi = 1.0;
    if (spread(lo) <= target) return {lo, lo};
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (spread(mid) > target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double a = 0.5 * (lo + hi);
    return {a, mean / a};
}

SynthData generate(const SynthConfig& c) {
    validate(c);
    Rng rng(c.seed);
    const Geometry geo = calibrate_geometry(c.cosine_mean, c.cosine_sd, c.dimension);
    const std::size_t dim = c.dimension;
    const double q_noise = std::sqrt(1.0 - geo.query_shared * geo.query_shared);
    const double p_noise = std::sqrt(1.0 - geo.passage_shared * geo.passage_shared);
    std::vector<double> shared(dim, 0.0);
    shared[0] = 1.0;

    auto query_vector = [&](std::span<const double> direction) {
        return mix(geo.query_shared, shared, q_noise, direction);
    };
    // Passage whose noise component has weight `align` on the query direction.
    auto passage_vector = [&](std::span<const double> direction, double align) {
        const std::vector<double> other = orthogonal_unit(rng, direction, 1);
        const std::vector<double> noise = mix(align, direction, std::sqrt(1.0 - align * align), other);
        return mix(geo.passage_shared, shared, p_noise, noise);
    };
    auto background_passage = [&]() {
        return mix(geo.passage_shared, shared, p_noise, random_unit(rng, dim, 1));
    };
    auto clamp01 = [](double x) { return std::clamp(x, 0.0, 1.0); };

    // Entity embeddings: background vocabulary first, chain entities as they
    // are created.
    EmbeddingStore entities(c.entity_dimension);
    std::vector<std::string> vocab;
    vocab.reserve(c.entity_vocab);
    for (std::size_t i = 0; i < c.entity_vocab; ++i) {
        vocab.push_back(format("bg_%05zu", i));
        entities.add(vocab.back(), random_unit(rng, c.entity_dimension, 0));
    }
    auto background_mentions = [&]() {
        const std::size_t span = c.entities_per_passage_max - c.entities_per_passage_min + 1;
        const std::size_t count = c.entities_per_passage_min + rng.below(span);
        std::set<std::size_t> picked;
        while (picked.size() < count) picked.insert(rng.below(c.entity_vocab));
        std::vector<std::string> out;
        for (std::size_t i : picked) out.push_back(vocab[i]);
        return out;
    };

    struct Draft {
        std::vector<std::string> mentions;
        std::vector<double> vector;
    };
    std::vector<Draft> drafts;
    std::vector<std::vector<std::size_t>> chains;  // draft indices per query
    std::vector<QueryPlan> plans;
    EmbeddingStore query_store(dim);

    for (std::size_t qi = 0; qi < c.n_queries; ++qi) {
        QueryPlan plan;
        plan.id = format("q%05zu", qi);
        plan.topic = format("ent_%05zu_topic", qi);
        entities.add(plan.topic, random_unit(rng, c.entity_dimension, 0));
        const std::size_t hops = c.hops_min + rng.below(c.hops_max - c.hops_min + 1);
        for (std::size_t b = 1; b < hops; ++b) {
            std::string name = format("ent_%05zu_bridge", qi) + std::to_string(b);
            const std::vector<double> e = random_unit(rng, c.entity_dimension, 0);
            entities.add(name, e);
            const bool aliased = rng.uniform() < c.alias_rate;
            if (aliased) {
                const std::vector<double> r = orthogonal_unit(rng, e, 0);
                const double s = c.alias_similarity;
                entities.add(alias_name(name), mix(s, e, std::sqrt(1.0 - s * s), r));
            }
            plan.bridges.push_back(std::move(name));
            plan.bridge_aliased.push_back(aliased);
        }
        plan.query_direction = random_unit(rng, dim, 1);
        query_store.add(plan.id, query_vector(plan.query_direction));

        std::vector<std::size_t> chain;
        for (std::size_t hop = 0; hop < hops; ++hop) {
            const double t = hops == 1 ? 1.0 : static_cast<double>(hop) / static_cast<double>(hops - 1);
            const double base = c.first_hop_alignment + t * (c.last_hop_alignment - c.first_hop_alignment);
            const double align = clamp01(base + c.alignment_jitter * rng.normal());
            Draft d;
            if (hop == 0) {
                d.mentions.push_back(plan.topic);
            } else {
                const std::string& prev = plan.bridges[hop - 1];
                d.mentions.push_back(plan.bridge_aliased[hop - 1] ? alias_name(prev) : prev);
            }
            if (hop + 1 < hops) d.mentions.push_back(plan.bridges[hop]);
            for (auto& m : background_mentions()) d.mentions.push_back(std::move(m));
            d.vector = passage_vector(plan.query_direction, align);
            chain.push_back(drafts.size());
            drafts.push_back(std::move(d));
        }
        chains.push_back(std::move(chain));
        plans.push_back(std::move(plan));
    }

    auto chain_entity = [&](const QueryPlan& plan) -> const std::string& {
        const std::size_t pick = rng.below(plan.bridges.size() + 1);
        return pick == 0 ? plan.topic : plan.bridges[pick - 1];
    };

    for (const QueryPlan& plan : plans) {
        for (std::size_t n = 0; n < c.near_misses; ++n) {
            Draft d;
            if (rng.uniform() < c.near_miss_entity_rate) d.mentions.push_back(chain_entity(plan));
            for (auto& m : background_mentions()) d.mentions.push_back(std::move(m));
            d.vector = passage_vector(plan.query_direction, rng.uniform(c.near_miss_low, c.near_miss_high));
            drafts.push_back(std::move(d));
        }
    }
    while (drafts.size() < c.n_passages) {
        Draft d;
        if (rng.uniform() < c.distractor_density) d.mentions.push_back(chain_entity(plans[rng.below(plans.size())]));
        for (auto& m : background_mentions()) d.mentions.push_back(std::move(m));
        d.vector = background_passage();
        drafts.push_back(std::move(d));
    }

    // Ids come from a shuffled numbering so they carry no hint of the role.
    std::vector<std::size_t> order(drafts.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::string> ids(drafts.size());
    for (std::size_t i = 0; i < drafts.size(); ++i) ids[i] = format("p%06zu", order[i]);

    std::vector<Passage> passages;
    passages.reserve(drafts.size());
    EmbeddingStore passage_store(dim);
    for (std::size_t i = 0; i < drafts.size(); ++i) {
        std::string text = "Passage " + ids[i] + " mentions";
        for (const auto& m : drafts[i].mentions) text += " " + m;
        if (drafts[i].mentions.empty()) text += " nothing in particular";
        text += ".";
        passages.push_back({ids[i], std::move(text), drafts[i].mentions});
        passage_store.add(ids[i], drafts[i].vector);
    }

    std::vector<Query> queries;
    for (std::size_t qi = 0; qi < plans.size(); ++qi) {
        Query q;
        q.id = plans[qi].id;
        q.text = "Question " + q.id + " about " + plans[qi].topic + "?";
        for (std::size_t d : chains[qi]) q.gold_chain.push_back(ids[d]);
        q.entities = {plans[qi].topic};
        queries.push_back(std::move(q));
    }

    return {Corpus(std::move(passages)), std::move(queries), std::move(passage_store),
            std::move(query_store), std::move(entities)};
}

void write_synth(const std::filesystem::path& dir, const SynthData& data) {
    std::filesystem::create_directories(dir);
    write_passages(dir / "passages.jsonl", data.corpus);
    write_annotations(dir / "annotations.jsonl", data.corpus);
    write_queries(dir / "queries.jsonl", data.queries);
    write_embeddings_binary(dir / "passage_emb.bin", data.passage_embeddings);
    write_embeddings_binary(dir / "query_emb.bin", data.query_embeddings);
    write_embeddings_binary(dir / "entity_emb.bin", data.entity_embeddings);
}

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

double ks_uniform(std::span<const double> values) {
    if (values.empty()) return 0.0;
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    double d = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = std::clamp(v[i], 0.0, 1.0);
        d = std::max({d, (static_cast<double>(i) + 1.0) / n - x, x - static_cast<double>(i) / n});
    }
    return d;
}

namespace {

Histogram histogram(std::string series, const std::vector<double>& values, std::size_t bins,
                    std::optional<std::pair<double, double>> range) {
    Histogram h;
    h.series = std::move(series);
    if (values.empty()) return h;
    if (range) {
        h.low = range->first;
        h.high = range->second;
    } else {
        const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
        h.low = *lo;
        h.high = *hi;
    }
    h.counts.assign(bins, 0);
    const double width = h.high - h.low;
    for (double x : values) {
        std::size_t b = 0;
        if (width > 0.0) {
            const double pos = (x - h.low) / width * static_cast<double>(bins);
            b = pos <= 0.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(pos));
        }
        ++h.counts[b];
    }
    return h;
}

std::size_t distinct_scores(const ScoreList& list) {
    std::set<double> s;
    for (const auto& e : list.entries) s.insert(e.score);
    return s.size();
}

struct Pooled {
    std::vector<double> raw, pit, minmax, pit_large;
    std::size_t large = 0;
};

Pooled pool(std::span<const ScoreList> lists, std::size_t min_list) {
    Pooled p;
    for (const ScoreList& l : lists) {
        if (l.empty()) continue;
        const std::vector<double> pit = pit_normalize(l);
        const std::vector<double> mm = minmax_normalize(l);
        for (const auto& e : l.entries) p.raw.push_back(e.score);
        p.pit.insert(p.pit.end(), pit.begin(), pit.end());
        p.minmax.insert(p.minmax.end(), mm.begin(), mm.end());
        if (distinct_scores(l) >= min_list) {
            p.pit_large.insert(p.pit_large.end(), pit.begin(), pit.end());
            ++p.large;
        }
    }
    return p;
}

}  // namespace

RegimeReport regime_report(std::span<const ScoreList> vector_lists, std::span<const ScoreList> graph_lists,
                           std::size_t bins, std::size_t min_list) {
    if (bins == 0) throw Error("regime report needs at least one bin");
    const Pooled v = pool(vector_lists, min_list);
    const Pooled g = pool(graph_lists, min_list);
    const std::pair<double, double> unit{0.0, 1.0};
    RegimeReport r;
    r.histograms.push_back(histogram("vector_raw", v.raw, bins, std::nullopt));
    r.histograms.push_back(histogram("graph_raw", g.raw, bins, std::nullopt));
    r.histograms.push_back(histogram("vector_pit", v.pit, bins, unit));
    r.histograms.push_back(histogram("graph_pit", g.pit, bins, unit));
    r.histograms.push_back(histogram("vector_minmax", v.minmax, bins, unit));
    r.histograms.push_back(histogram("graph_minmax", g.minmax, bins, unit));
    r.ks_vector_pit = ks_uniform(v.pit_large);
    r.ks_graph_pit = ks_uniform(g.pit_large);
    r.vector_lists_used = v.large;
    r.graph_lists_used = g.large;
    if (!g.minmax.empty()) {
        const auto low = std::count_if(g.minmax.begin(), g.minmax.end(), [](double x) { return x < 0.1; });
        r.graph_minmax_lowest_decile = static_cast<double>(low) / static_cast<double>(g.minmax.size());
    }
    return r;
}

void write_regime_csv(std::ostream& out, const RegimeReport& report) {
    out << "series,bin,low,high,count\n";
    char buf[160];
    for (const Histogram& h : report.histograms) {
        const std::size_t bins = h.counts.size();
        for (std::size_t b = 0; b < bins; ++b) {
            const double w = (h.high - h.low) / static_cast<double>(bins);
            std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%zu\n", h.series.c_str(), b,
                          h.low + w * static_cast<double>(b), h.low + w * static_cast<double>(b + 1),
                          h.counts[b]);
            out << buf;
        }
    }
    std::snprintf(buf, sizeof buf, "# ks_vector_pit=%.6f ks_graph_pit=%.6f graph_minmax_lowest_decile=%.6f\n",
                  report.ks_vector_pit, report.ks_graph_pit, report.graph_minmax_lowest_decile);
    out << buf;
}

}  // namespace calfuse
