#pragma once

#include "calfuse/corpus.hpp"
#include "calfuse/retrieval.hpp"

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calfuse {

/// Knobs of the synthetic multi-hop generator. Every output is a pure
/// function of this struct.
struct SynthConfig {
    std::uint64_t seed = 7;
    std::size_t n_passages = 4000;
    std::size_t n_queries = 200;
    std::size_t hops_min = 2;
    std::size_t hops_max = 4;
    std::size_t dimension = 256;

    /// Cosine regime for unrelated query/passage pairs.
    double cosine_mean = 0.09;
    double cosine_sd = 0.02;

    /// Query alignment of the first and last hop; the hops in between are
    /// interpolated. Alignment is the weight of the query's own direction
    /// inside a passage's non-shared component.
    double first_hop_alignment = 0.85;
    double last_hop_alignment = 0.30;
    double alignment_jitter = 0.08;

    /// Topical distractors per query, aligned uniformly in [low, high].
    std::size_t near_misses = 10;
    double near_miss_low = 0.15;
    double near_miss_high = 0.50;

    /// Background entities shared across the whole corpus.
    std::size_t entity_vocab = 3000;
    std::size_t entities_per_passage_min = 0;
    std::size_t entities_per_passage_max = 2;

    /// Probability that a bridge entity is mentioned under an alias in the
    /// next hop, disconnecting the chain until synonyms are linked.
    double alias_rate = 0.0;
    /// Cosine between an alias embedding and its canonical entity.
    double alias_similarity = 0.95;

    /// Probability that a distractor also mentions a chain entity of a
    /// random query. Higher values grow the graph pools.
    double distractor_density = 0.3;
    /// Near-miss distractors mention a chain entity with this probability.
    double near_miss_entity_rate = 0.5;

    std::size_t entity_dimension = 64;

    friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

/// Throws Error on an infeasible configuration.
void validate(const SynthConfig& config);

/// JSON round trip. Unknown keys are rejected; missing keys keep defaults.
SynthConfig parse_synth_config(std::string_view json_text);
SynthConfig load_synth_config(const std::filesystem::path& path);
std::string synth_config_json(const SynthConfig& config);

struct SynthData {
    Corpus corpus;
    std::vector<Query> queries;
    EmbeddingStore passage_embeddings;
    EmbeddingStore query_embeddings;
    EmbeddingStore entity_embeddings;
};

/// Weights of the shared direction in query and passage embeddings that
/// produce the configured unrelated-pair cosine mean and sd in `dimension`
/// dimensions. If the sd is unreachable the symmetric split is returned.
struct Geometry {
    double query_shared = 0.0;
    double passage_shared = 0.0;
};
Geometry calibrate_geometry(double mean, double sd, std::size_t dimension);

SynthData generate(const SynthConfig& config);

/// Writes passages.jsonl, annotations.jsonl, queries.jsonl and the three
/// binary embedding files (passage_emb.bin, query_emb.bin, entity_emb.bin).
void write_synth(const std::filesystem::path& dir, const SynthData& data);

struct Histogram {
    std::string series;
    double low = 0.0;
    double high = 1.0;
    std::vector<std::size_t> counts;

    std::size_t total() const;
};

/// Score-distribution summary over many per-query lists.
struct RegimeReport {
    std::vector<Histogram> histograms;  ///< raw, pit and minmax for each system
    double ks_vector_pit = 0.0;         ///< over lists with >= min_list entries
    double ks_graph_pit = 0.0;
    double graph_minmax_lowest_decile = 0.0;  ///< share of mass in [0, 0.1)
    std::size_t vector_lists_used = 0;
    std::size_t graph_lists_used = 0;
};

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `values` and U(0, 1).
double ks_uniform(std::span<const double> values);

RegimeReport regime_report(std::span<const ScoreList> vector_lists,
                           std::span<const ScoreList> graph_lists, std::size_t bins = 10,
                           std::size_t min_list = 100);

void write_regime_csv(std::ostream& out, const RegimeReport& report);

}  // namespace calfuse
