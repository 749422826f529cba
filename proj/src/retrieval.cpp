#include "calfuse/retrieval.hpp"

#include "calfuse/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace calfuse {

std::string_view to_string(System s) { return s == System::vector ? "vector" : "graph"; }

bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

void sort_entries(std::vector<ScoredDoc>& entries) {
    std::sort(entries.begin(), entries.end(), ranks_before);
}

ScoreList vector_topk(std::span<const double> query, const EmbeddingStore& passages,
                      std::size_t n) {
    if (passages.size() > 0 && query.size() != passages.dimension()) {
        throw Error("query dimension " + std::to_string(query.size()) +
                    " does not match passage dimension " + std::to_string(passages.dimension()));
    }
    std::vector<ScoredDoc> all;
    all.reserve(passages.size());
    for (std::size_t r = 0; r < passages.size(); ++r) {
        all.push_back({passages.id(r), dot(query, passages.row(r))});
    }
    const std::size_t keep = std::min(n, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                      ranks_before);
    all.resize(keep);
    return {System::vector, std::move(all)};
}

// ---------------------------------------------------------------------------

std::string normalize_surface(std::string_view surface) {
    const auto first = surface.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = surface.find_last_not_of(" \t\r\n");
    std::string out(surface.substr(first, last - first + 1));
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::optional<EntityId> EntityGraph::find(std::string_view surface) const {
    auto it = by_name_.find(normalize_surface(surface));
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::size_t> EntityGraph::passage_index(const std::string& id) const {
    auto it = passage_index_.find(id);
    if (it == passage_index_.end()) return std::nullopt;
    return it->second;
}

double EntityGraph::cooccurrence(EntityId a, EntityId b) const {
    const auto& adj = adjacency_[a];
    auto it = std::lower_bound(adj.begin(), adj.end(), b,
                               [](const Neighbor& n, EntityId id) { return n.to < id; });
    return (it != adj.end() && it->to == b) ? it->weight : 0.0;
}

std::size_t EntityGraph::edge_count() const {
    std::size_t total = 0;
    for (const auto& adj : adjacency_) total += adj.size();
    return total / 2;
}

namespace {

using EdgeMap = std::map<std::pair<EntityId, EntityId>, double>;

std::vector<std::vector<Neighbor>> adjacency_from(const EdgeMap& edges, std::size_t n) {
    std::vector<std::vector<Neighbor>> adj(n);
    for (const auto& [key, w] : edges) {
        adj[key.first].push_back({key.second, w});
        adj[key.second].push_back({key.first, w});
    }
    for (auto& row : adj) {
        std::sort(row.begin(), row.end(),
                  [](const Neighbor& a, const Neighbor& b) { return a.to < b.to; });
    }
    return adj;
}

}  // namespace

EntityGraph build_entity_graph(const Corpus& corpus) {
    EntityGraph g;
    std::set<std::string> names;
    for (const auto& p : corpus.passages()) {
        for (const auto& m : p.entity_mentions) {
            auto n = normalize_surface(m);
            if (!n.empty()) names.insert(std::move(n));
        }
    }
    g.names_.assign(names.begin(), names.end());
    for (EntityId e = 0; e < g.names_.size(); ++e) g.by_name_.emplace(g.names_[e], e);
    g.canonical_.resize(g.names_.size());
    std::iota(g.canonical_.begin(), g.canonical_.end(), EntityId{0});
    g.passages_of_.resize(g.names_.size());

    EdgeMap edges;
    for (const auto& p : corpus.passages()) {
        const std::size_t pi = g.passage_ids_.size();
        g.passage_ids_.push_back(p.id);
        g.passage_index_.emplace(p.id, pi);
        std::vector<EntityId> members;
        for (const auto& m : p.entity_mentions) {
            auto n = normalize_surface(m);
            if (!n.empty()) members.push_back(g.by_name_.at(n));
        }
        std::sort(members.begin(), members.end());
        members.erase(std::unique(members.begin(), members.end()), members.end());
        for (std::size_t i = 0; i < members.size(); ++i) {
            g.passages_of_[members[i]].push_back(pi);
            for (std::size_t j = i + 1; j < members.size(); ++j) edges[{members[i], members[j]}] += 1.0;
        }
        g.members_.push_back(std::move(members));
    }
    g.adjacency_ = adjacency_from(edges, g.names_.size());
    return g;
}

// ---------------------------------------------------------------------------

namespace {

class DisjointSet {
public:
    explicit DisjointSet(std::size_t n) : parent_(n) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    /// Keeps the smaller root so that the root is always the minimum id.
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[b] = a;
    }

private:
    std::vector<std::size_t> parent_;
};

}  // namespace

struct SynonymLinker {
    static LinkResult run(const EntityGraph& graph, const EmbeddingStore& emb, double threshold) {
        if (!(threshold > 0.0 && threshold <= 1.0)) {
            throw Error("synonym threshold must be in (0, 1], got " + std::to_string(threshold));
        }
        const std::size_t n = graph.entity_count();
        LinkResult result;

        // Only canonical entities take part; earlier merges are preserved.
        // Embedding keys are raw surface forms; match them the way the graph does.
        std::unordered_map<std::string, std::size_t> by_surface;
        for (std::size_t r = 0; r < emb.size(); ++r) by_surface.emplace(normalize_surface(emb.id(r)), r);
        std::vector<EntityId> nodes;
        std::vector<std::span<const double>> vecs;
        for (EntityId e = 0; e < n; ++e) {
            if (!graph.is_canonical(e)) continue;
            const auto it = by_surface.find(graph.name(e));
            if (it == by_surface.end()) {
                ++result.missing_embeddings;
                continue;
            }
            nodes.push_back(e);
            vecs.push_back(emb.row(it->second));
        }
        if (!nodes.empty() && emb.size() > 0 && vecs.front().size() != emb.dimension()) {
            throw Error("entity embedding dimension mismatch");
        }

        DisjointSet ds(n);
        for (EntityId e = 0; e < n; ++e) ds.unite(e, graph.canonical(e));
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            for (std::size_t j = i + 1; j < nodes.size(); ++j) {
                if (dot(vecs[i], vecs[j]) >= threshold) {
                    ++result.links;
                    ds.unite(nodes[i], nodes[j]);
                }
            }
        }

        EntityGraph& g = result.graph;
        g = graph;
        for (EntityId e = 0; e < n; ++e) {
            const EntityId c = ds.find(e);
            if (c != graph.canonical(e)) ++result.merged;
            g.canonical_[e] = c;
        }

        for (auto& members : g.members_) {
            for (auto& e : members) e = g.canonical_[e];
            std::sort(members.begin(), members.end());
            members.erase(std::unique(members.begin(), members.end()), members.end());
        }
        for (auto& ps : g.passages_of_) ps.clear();
        for (std::size_t p = 0; p < g.members_.size(); ++p) {
            for (EntityId e : g.members_[p]) g.passages_of_[e].push_back(p);
        }

        EdgeMap edges;
        for (EntityId a = 0; a < n; ++a) {
            for (const auto& nb : graph.adjacency_[a]) {
                if (nb.to <= a) continue;
                EntityId ca = g.canonical_[a];
                EntityId cb = g.canonical_[nb.to];
                if (ca == cb) continue;
                if (cb < ca) std::swap(ca, cb);
                edges[{ca, cb}] += nb.weight;
            }
        }
        g.adjacency_ = adjacency_from(edges, n);
        return result;
    }
};

LinkResult link_synonyms(const EntityGraph& graph, const EmbeddingStore& entity_embeddings,
                         double threshold) {
    return SynonymLinker::run(graph, entity_embeddings, threshold);
}

// ---------------------------------------------------------------------------

PprResult ppr(const EntityGraph& graph, std::span<const EntityId> seeds, const PprConfig& config) {
    if (!(config.damping > 0.0 && config.damping < 1.0)) throw Error("PPR damping must be in (0, 1)");
    if (!(config.epsilon > 0.0)) throw Error("PPR epsilon must be positive");

    const std::size_t n = graph.entity_count();
    std::vector<EntityId> valid;
    for (EntityId s : seeds) {
        if (s < n) valid.push_back(graph.canonical(s));
    }
    std::sort(valid.begin(), valid.end());
    valid.erase(std::unique(valid.begin(), valid.end()), valid.end());

    PprResult result;
    if (valid.empty()) {
        result.no_seed = true;
        return result;
    }

    std::vector<double> restart(n, 0.0);
    for (EntityId s : valid) restart[s] = 1.0 / static_cast<double>(valid.size());

    std::vector<double> out_weight(n, 0.0);
    for (EntityId e = 0; e < n; ++e) {
        for (const auto& nb : graph.neighbors(e)) out_weight[e] += nb.weight;
    }

    const double d = config.damping;
    std::vector<double> x = restart;
    std::vector<double> next(n);
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
        double dangling = 0.0;
        std::fill(next.begin(), next.end(), 0.0);
        for (EntityId e = 0; e < n; ++e) {
            if (x[e] == 0.0) continue;
            if (out_weight[e] == 0.0) {
                dangling += x[e];
                continue;
            }
            const double share = x[e] / out_weight[e];
            for (const auto& nb : graph.neighbors(e)) next[nb.to] += share * nb.weight;
        }
        double change = 0.0;
        for (EntityId e = 0; e < n; ++e) {
            next[e] = (1.0 - d) * restart[e] + d * (next[e] + dangling * restart[e]);
            change += std::abs(next[e] - x[e]);
        }
        x.swap(next);
        result.iterations = it + 1;
        if (change < config.epsilon) {
            result.converged = true;
            break;
        }
    }
    result.scores = std::move(x);
    return result;
}

ScoreList graph_passage_scores(std::span<const double> entity_scores, const EntityGraph& graph) {
    ScoreList out{System::graph, {}};
    if (entity_scores.empty()) return out;
    for (std::size_t p = 0; p < graph.passage_count(); ++p) {
        double s = 0.0;
        for (EntityId e : graph.passage_entities(p)) s += entity_scores[e];
        if (s > 0.0) out.entries.push_back({graph.passage_id(p), s});
    }
    sort_entries(out.entries);
    return out;
}

ScoreList cap_pool(const ScoreList& graph_list, const ScoreList& vector_list,
                   std::optional<std::size_t> dk) {
    if (!dk) return graph_list;
    std::unordered_set<std::string> in_vector;
    for (const auto& e : vector_list.entries) in_vector.insert(e.id);

    // graph_list is already ranked, so the first dk graph-only entries are
    // the best ones.
    ScoreList out{graph_list.system, {}};
    std::size_t graph_only = 0;
    for (const auto& e : graph_list.entries) {
        if (in_vector.count(e.id)) {
            out.entries.push_back(e);
        } else if (graph_only < *dk) {
            out.entries.push_back(e);
            ++graph_only;
        }
    }
    sort_entries(out.entries);
    return out;
}

SeedResult seed_entities_for_query(std::span<const std::string> query_entities,
                                   const EntityGraph& graph) {
    SeedResult r;
    for (const auto& s : query_entities) {
        auto e = graph.find(s);
        if (!e) {
            ++r.misses;
            continue;
        }
        r.seeds.push_back(graph.canonical(*e));
    }
    std::sort(r.seeds.begin(), r.seeds.end());
    r.seeds.erase(std::unique(r.seeds.begin(), r.seeds.end()), r.seeds.end());
    return r;
}

}  // namespace calfuse
