#pragma once

#include "calfuse/corpus.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace calfuse {

enum class System { vector, graph };

std::string_view to_string(System s);

struct ScoredDoc {
    std::string id;
    double score = 0.0;

    friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// One retriever's candidates: score descending, ties by ascending id.
struct ScoreList {
    System system = System::vector;
    std::vector<ScoredDoc> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    friend bool operator==(const ScoreList&, const ScoreList&) = default;
};

/// Score descending, then id ascending.
bool ranks_before(const ScoredDoc& a, const ScoredDoc& b);
void sort_entries(std::vector<ScoredDoc>& entries);

/// Exact cosine top-n over every row of `passages` (rows are unit vectors,
/// so cosine is a dot product). n larger than the store returns everything.
ScoreList vector_topk(std::span<const double> query, const EmbeddingStore& passages,
                      std::size_t n);

// ---------------------------------------------------------------------------
// Entity graph
// ---------------------------------------------------------------------------

using EntityId = std::size_t;

struct Neighbor {
    EntityId to;
    double weight;
};

/// Entities are identified by their normalized surface form; ids are
/// assigned in lexicographic order of that form. After synonym linking,
/// memberships and co-occurrence edges reference canonical entities only.
class EntityGraph {
public:
    std::size_t entity_count() const { return names_.size(); }
    std::size_t passage_count() const { return passage_ids_.size(); }

    const std::string& name(EntityId e) const { return names_[e]; }
    /// Normalizes `surface` before lookup; returns the raw (not canonical) id.
    std::optional<EntityId> find(std::string_view surface) const;
    EntityId canonical(EntityId e) const { return canonical_[e]; }
    bool is_canonical(EntityId e) const { return canonical_[e] == e; }

    const std::string& passage_id(std::size_t p) const { return passage_ids_[p]; }
    std::optional<std::size_t> passage_index(const std::string& id) const;
    /// Sorted canonical entities mentioned by passage `p`.
    std::span<const EntityId> passage_entities(std::size_t p) const { return members_[p]; }
    /// Sorted passages that mention canonical entity `e`.
    std::span<const std::size_t> entity_passages(EntityId e) const { return passages_of_[e]; }
    /// Co-occurrence edges of `e`, sorted by target id.
    std::span<const Neighbor> neighbors(EntityId e) const { return adjacency_[e]; }
    double cooccurrence(EntityId a, EntityId b) const;

    std::size_t edge_count() const;

private:
    friend EntityGraph build_entity_graph(const Corpus& corpus);
    friend struct SynonymLinker;

    std::vector<std::string> names_;
    std::unordered_map<std::string, EntityId> by_name_;
    std::vector<EntityId> canonical_;
    std::vector<std::string> passage_ids_;
    std::unordered_map<std::string, std::size_t> passage_index_;
    std::vector<std::vector<EntityId>> members_;
    std::vector<std::vector<std::size_t>> passages_of_;
    std::vector<std::vector<Neighbor>> adjacency_;
};

/// Trim, then ASCII case-fold.
std::string normalize_surface(std::string_view surface);

/// One node per distinct normalized surface form, a membership edge per
/// (passage, mention), and co-occurrence weights equal to the number of
/// passages containing both entities.
EntityGraph build_entity_graph(const Corpus& corpus);

struct LinkResult {
    EntityGraph graph;
    std::size_t links = 0;          ///< entity pairs at or above threshold
    std::size_t merged = 0;         ///< entities whose canonical changed
    std::size_t missing_embeddings = 0;
};

/// Merges every entity pair whose embedding cosine is >= threshold, taking
/// the transitive closure. The canonical of a component is its
/// lexicographically smallest name. Edges are re-pointed to canonicals and
/// their weights summed; intra-component edges are dropped.
LinkResult link_synonyms(const EntityGraph& graph, const EmbeddingStore& entity_embeddings,
                         double threshold);

struct PprConfig {
    double damping = 0.85;
    double epsilon = 1e-8;
    std::size_t max_iterations = 100;
};

struct PprResult {
    std::vector<double> scores;  ///< indexed by EntityId; empty when no_seed
    bool no_seed = false;
    bool converged = false;
    std::size_t iterations = 0;
};

/// Personalized PageRank by power iteration over the row-normalized
/// co-occurrence matrix. Restart mass is uniform over the canonicalized
/// seeds; mass at nodes without edges returns to the seeds, so the result
/// stays a probability distribution.
PprResult ppr(const EntityGraph& graph, std::span<const EntityId> seeds, const PprConfig& config);

/// Passage score = sum of its member entities' scores. Zero-score passages
/// are dropped.
ScoreList graph_passage_scores(std::span<const double> entity_scores, const EntityGraph& graph);

/// Keeps every graph entry that the vector list also returned, plus at most
/// `dk` of the best graph-only entries. No cap when `dk` is empty.
ScoreList cap_pool(const ScoreList& graph_list, const ScoreList& vector_list,
                   std::optional<std::size_t> dk);

struct SeedResult {
    std::vector<EntityId> seeds;  ///< canonical, sorted, unique
    std::size_t misses = 0;
};

SeedResult seed_entities_for_query(std::span<const std::string> query_entities,
                                   const EntityGraph& graph);

}  // namespace calfuse
