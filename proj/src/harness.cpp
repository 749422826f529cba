#include "calfuse/harness.hpp"

#include "calfuse/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace calfuse {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw Error(std::string(where) + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw Error(std::string(where) + ": unknown key \"" + key + "\"");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::optional<std::size_t> read_dk(const json& v) {
    if (v.is_null()) return std::nullopt;
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "none" || s == "uncapped") return std::nullopt;
        throw Error("dk must be a non-negative integer, null or \"none\"");
    }
    if (!v.is_number_integer() || v.get<long long>() < 0) throw Error("dk must be a non-negative integer");
    return v.get<std::size_t>();
}

json dk_json(const std::optional<std::size_t>& dk) { return dk ? json(*dk) : json(nullptr); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& j, const char* key, std::optional<double> fallback) {
    if (!j.contains(key)) return fallback;
    if (j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

json params_json(const StrategyParams& p) {
    return {{"rrf_k0", p.rrf_k0},
            {"power_p", p.power_p},
            {"tsallis_q", p.tsallis_q},
            {"copula_theta", optional_json(p.copula_theta)},
            {"t0", optional_json(p.t0)},
            {"gamma", p.gamma},
            {"pl_max_iterations", p.pl_max_iterations},
            {"pl_pseudo_count", p.pl_pseudo_count},
            {"pl_tolerance", p.pl_tolerance},
            {"quantum_theta", p.quantum_theta},
            {"floor", p.floor}};
}

StrategyParams params_from(const json& j, StrategyParams p) {
    check_keys(j,
               {"rrf_k0", "power_p", "tsallis_q", "copula_theta", "t0", "gamma", "pl_max_iterations",
                "pl_pseudo_count", "pl_tolerance", "quantum_theta", "floor"},
               "params");
    read(j, "rrf_k0", p.rrf_k0);
    read(j, "power_p", p.power_p);
    read(j, "tsallis_q", p.tsallis_q);
    p.copula_theta = read_optional(j, "copula_theta", p.copula_theta);
    p.t0 = read_optional(j, "t0", p.t0);
    read(j, "gamma", p.gamma);
    read(j, "pl_max_iterations", p.pl_max_iterations);
    read(j, "pl_pseudo_count", p.pl_pseudo_count);
    read(j, "pl_tolerance", p.pl_tolerance);
    read(j, "quantum_theta", p.quantum_theta);
    read(j, "floor", p.floor);
    return p;
}

json ising_json(const IsingConfig& c) {
    return {{"coupling", c.coupling},       {"temperature", c.temperature}, {"blend", c.blend},
            {"max_iterations", c.max_iterations}, {"tol", c.tol},         {"damping_mix", c.damping_mix}};
}

IsingConfig ising_from(const json& j) {
    check_keys(j, {"coupling", "temperature", "blend", "max_iterations", "tol", "damping_mix"}, "ising");
    IsingConfig c;
    read(j, "coupling", c.coupling);
    read(j, "temperature", c.temperature);
    read(j, "blend", c.blend);
    read(j, "max_iterations", c.max_iterations);
    read(j, "tol", c.tol);
    read(j, "damping_mix", c.damping_mix);
    validate(c);
    return c;
}

json temperature_json(const TemperatureMode& t) { return t.automatic ? json("auto") : json(t.value); }

TemperatureMode temperature_from(const json& v) {
    if (v.is_string()) return parse_temperature(v.get<std::string>());
    return parse_temperature(std::to_string(v.get<double>()));
}

void check_method(const std::string& method) {
    if (method == "vector_only" || method == "graph_only") return;
    parse_strategy(method);
}

json cell_to_json(const CellSpec& c) {
    return {{"method", c.method},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"dk", dk_json(c.dk)},
            {"normalizer", std::string(to_string(c.normalizer))},
            {"temperature", temperature_json(c.temperature)},
            {"epsilon", c.epsilon},
            {"params", params_json(c.params)},
            {"synonyms", c.synonyms},
            {"ising", c.ising ? ising_json(*c.ising) : json(nullptr)}};
}

CellSpec cell_from(const json& j, CellSpec c = {}) {
    check_keys(j,
               {"method", "alpha", "beta", "dk", "normalizer", "temperature", "epsilon", "params", "synonyms",
                "ising"},
               "cell");
    read(j, "method", c.method);
    check_method(c.method);
    read(j, "alpha", c.alpha);
    read(j, "beta", c.beta);
    if (j.contains("dk")) c.dk = read_dk(j.at("dk"));
    if (j.contains("normalizer")) c.normalizer = parse_normalizer(j.at("normalizer").get<std::string>());
    if (j.contains("temperature")) c.temperature = temperature_from(j.at("temperature"));
    read(j, "epsilon", c.epsilon);
    if (j.contains("params")) c.params = params_from(j.at("params"), c.params);
    read(j, "synonyms", c.synonyms);
    if (j.contains("ising")) {
        if (j.at("ising").is_null()) {
            c.ising.reset();
        } else {
            c.ising = ising_from(j.at("ising"));
        }
    }
    if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw Error("cell alpha must lie in [0, 1]");
    return c;
}

json grid_to_json(const GridSpec& g) {
    json dks = json::array();
    for (const auto& d : g.dks) dks.push_back(dk_json(d));
    json norms = json::array();
    for (auto n : g.normalizers) norms.push_back(std::string(to_string(n)));
    json ising = json::array();
    for (const auto& i : g.ising) ising.push_back(i ? ising_json(*i) : json(nullptr));
    return {{"methods", g.methods}, {"alphas", g.alphas},   {"betas", g.betas}, {"dks", dks},
            {"normalizers", norms}, {"synonyms", g.synonyms}, {"ising", ising},  {"base", cell_to_json(g.base)}};
}

GridSpec grid_from(const json& j) {
    check_keys(j, {"methods", "alphas", "betas", "dks", "normalizers", "synonyms", "ising", "base"}, "grid");
    GridSpec g;
    if (j.contains("base")) g.base = cell_from(j.at("base"));
    read(j, "methods", g.methods);
    for (const auto& m : g.methods) check_method(m);
    read(j, "alphas", g.alphas);
    read(j, "betas", g.betas);
    if (j.contains("dks")) {
        g.dks.clear();
        for (const auto& v : j.at("dks")) g.dks.push_back(read_dk(v));
    }
    if (j.contains("normalizers")) {
        g.normalizers.clear();
        for (const auto& v : j.at("normalizers")) g.normalizers.push_back(parse_normalizer(v.get<std::string>()));
    }
    read(j, "synonyms", g.synonyms);
    if (j.contains("ising")) {
        g.ising.clear();
        for (const auto& v : j.at("ising")) {
            g.ising.push_back(v.is_null() ? std::nullopt : std::optional<IsingConfig>(ising_from(v)));
        }
    }
    return g;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

bool uses_beta(const std::string& method) {
    return method == "thermo" || method == "linear" || method == "tsallis" || method == "wasserstein_t";
}

// ---------------------------------------------------------------------------
// Parallel loop
// ---------------------------------------------------------------------------

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

DataPaths DataPaths::in_directory(const std::filesystem::path& dir) {
    DataPaths p;
    p.passages = dir / "passages.jsonl";
    p.annotations = dir / "annotations.jsonl";
    p.queries = dir / "queries.jsonl";
    p.passage_embeddings = dir / "passage_emb.bin";
    p.query_embeddings = dir / "query_emb.bin";
    p.entity_embeddings = dir / "entity_emb.bin";
    return p;
}

std::string CellSpec::id() const {
    if (is_vector_only()) return "vector_only";
    std::string out = method;
    if (!is_graph_only() && method != "rrf") {
        out += ";a=" + num(alpha);
        if (uses_beta(method)) out += ";b=" + num(beta);
        out += ";norm=" + std::string(to_string(normalizer));
        out += ";T=" + (temperature.automatic ? std::string("auto") : num(temperature.value));
        if (epsilon != kDefaultEpsilon) out += ";eps=" + num(epsilon);
    }
    out += ";dk=" + (dk ? std::to_string(*dk) : std::string("none"));
    out += ";syn=" + std::string(synonyms ? "1" : "0");
    const StrategyParams d;
    if (method == "rrf") out += ";k0=" + num(params.rrf_k0);
    if (method == "power_mean") out += ";p=" + num(params.power_p);
    if (method == "tsallis") out += ";q=" + num(params.tsallis_q);
    if (method == "gumbel_copula") {
        out += ";theta=" + (params.copula_theta ? num(*params.copula_theta) : std::string("tau"));
    }
    if (method == "plackett_luce" && params.pl_pseudo_count != d.pl_pseudo_count) {
        out += ";pc=" + num(params.pl_pseudo_count);
    }
    if (method == "quantum") out += ";theta=" + num(params.quantum_theta);
    if (method == "wasserstein_t") {
        out += ";t0=" + (params.t0 ? num(*params.t0) : std::string("auto")) + ";gamma=" + num(params.gamma);
    }
    if ((method == "log_linear" || method == "gumbel_copula" || method == "plackett_luce" ||
         method == "quantum") &&
        params.floor != d.floor) {
        out += ";floor=" + num(params.floor);
    }
    if (ising) {
        out += ";ising=J" + num(ising->coupling) + "/T" + num(ising->temperature) + "/b" + num(ising->blend);
    }
    return out;
}

CellSpec vector_only_cell() {
    CellSpec c;
    c.method = "vector_only";
    return c;
}

std::string_view to_string(SelectionRule r) { return r == SelectionRule::safety ? "safety" : "max_metric"; }

SelectionRule parse_selection_rule(std::string_view text) {
    if (text == "max_metric") return SelectionRule::max_metric;
    if (text == "safety") return SelectionRule::safety;
    throw Error("unknown selection rule \"" + std::string(text) + "\"");
}

namespace {

json run_config_to_json(const RunConfig& c, bool for_hash) {
    json data = {{"passages", c.data.passages.generic_string()},
                 {"annotations", c.data.annotations.generic_string()},
                 {"queries", c.data.queries.generic_string()},
                 {"passage_embeddings", c.data.passage_embeddings.generic_string()},
                 {"query_embeddings", c.data.query_embeddings.generic_string()},
                 {"entity_embeddings", c.data.entity_embeddings.generic_string()}};
    json cells = json::array();
    for (const auto& cell : c.cells) cells.push_back(cell_to_json(cell));
    json j = {{"data", data},
              {"split_mode", c.split_mode},
              {"tune_fraction", c.tune_fraction},
              {"n_v", c.n_v},
              {"ppr",
               {{"damping", c.ppr.damping}, {"epsilon", c.ppr.epsilon}, {"max_iterations", c.ppr.max_iterations}}},
              {"synonym_threshold", c.synonym_threshold},
              {"ks", c.ks},
              {"rerank_depth", c.rerank_depth},
              {"cells", cells},
              {"grid", c.grid ? grid_to_json(*c.grid) : json(nullptr)},
              {"baseline", c.baseline},
              {"selection_metric", std::string(to_string(c.selection_metric))},
              {"selection_k", c.selection_k ? json(*c.selection_k) : json(nullptr)},
              {"selection_rule", std::string(to_string(c.selection_rule))},
              {"seed", c.seed},
              {"cell_cap", c.cell_cap}};
    if (!for_hash) {
        j["output_dir"] = c.output_dir.generic_string();
        j["threads"] = c.threads;
        j["confirm"] = c.confirm;
    }
    return j;
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(std::string("run config: ") + e.what());
    }
    try {
        check_keys(j,
                   {"data", "split_mode", "tune_fraction", "n_v", "ppr", "synonym_threshold", "ks", "rerank_depth",
                    "cells", "grid", "baseline", "selection_metric", "selection_k", "selection_rule",
                    "output_dir", "seed", "threads", "cell_cap", "confirm"},
                   "run config");
        RunConfig c;
        if (j.contains("data")) {
            const json& d = j.at("data");
            check_keys(d,
                       {"dir", "passages", "annotations", "queries", "passage_embeddings", "query_embeddings",
                        "entity_embeddings"},
                       "data");
            if (d.contains("dir")) c.data = DataPaths::in_directory(resolve(base_dir, d.at("dir").get<std::string>()));
            auto path = [&](const char* key, std::filesystem::path& out) {
                if (d.contains(key)) out = resolve(base_dir, d.at(key).get<std::string>());
            };
            path("passages", c.data.passages);
            path("annotations", c.data.annotations);
            path("queries", c.data.queries);
            path("passage_embeddings", c.data.passage_embeddings);
            path("query_embeddings", c.data.query_embeddings);
            path("entity_embeddings", c.data.entity_embeddings);
        }
        read(j, "split_mode", c.split_mode);
        if (c.split_mode != "tune_test" && c.split_mode != "all") {
            throw Error("split_mode must be \"tune_test\" or \"all\"");
        }
        read(j, "tune_fraction", c.tune_fraction);
        if (!(c.tune_fraction >= 0.0 && c.tune_fraction <= 1.0)) throw Error("tune_fraction must lie in [0, 1]");
        read(j, "n_v", c.n_v);
        if (c.n_v == 0) throw Error("n_v must be positive");
        if (j.contains("ppr")) {
            const json& p = j.at("ppr");
            check_keys(p, {"damping", "epsilon", "max_iterations"}, "ppr");
            read(p, "damping", c.ppr.damping);
            read(p, "epsilon", c.ppr.epsilon);
            read(p, "max_iterations", c.ppr.max_iterations);
        }
        read(j, "synonym_threshold", c.synonym_threshold);
        read(j, "ks", c.ks);
        if (c.ks.empty()) throw Error("ks must not be empty");
        for (auto k : c.ks) {
            if (k == 0) throw Error("every K must be at least 1");
        }
        std::sort(c.ks.begin(), c.ks.end());
        c.ks.erase(std::unique(c.ks.begin(), c.ks.end()), c.ks.end());
        read(j, "rerank_depth", c.rerank_depth);
        if (j.contains("cells")) {
            for (const auto& cell : j.at("cells")) c.cells.push_back(cell_from(cell));
        }
        if (j.contains("grid") && !j.at("grid").is_null()) c.grid = grid_from(j.at("grid"));
        read(j, "baseline", c.baseline);
        if (j.contains("selection_metric")) c.selection_metric = parse_metric(j.at("selection_metric").get<std::string>());
        if (j.contains("selection_k") && !j.at("selection_k").is_null()) c.selection_k = j.at("selection_k").get<std::size_t>();
        if (j.contains("selection_rule")) c.selection_rule = parse_selection_rule(j.at("selection_rule").get<std::string>());
        if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
        read(j, "seed", c.seed);
        read(j, "threads", c.threads);
        read(j, "cell_cap", c.cell_cap);
        read(j, "confirm", c.confirm);
        return c;
    } catch (const json::exception& e) {
        throw Error(std::string("run config: ") + e.what());
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(slurp(path), path.parent_path());
}

std::string run_config_json(const RunConfig& config) { return run_config_to_json(config, false).dump(2); }

std::string config_hash(const RunConfig& config) { return md5_hex(run_config_to_json(config, true).dump()); }

std::string cell_json(const CellSpec& cell) { return cell_to_json(cell).dump(); }

CellSpec parse_cell(std::string_view json_text) {
    try {
        return cell_from(json::parse(json_text));
    } catch (const json::exception& e) {
        throw Error(std::string("cell: ") + e.what());
    }
}

IsingGrid parse_ising_grid(std::string_view json_text) {
    IsingGrid g;
    try {
        const json j = json::parse(json_text);
        check_keys(j, {"couplings", "temperatures", "blends"}, "ising grid");
        read(j, "couplings", g.couplings);
        read(j, "temperatures", g.temperatures);
        read(j, "blends", g.blends);
    } catch (const json::exception& e) {
        throw Error(std::string("ising grid: ") + e.what());
    }
    if (g.couplings.empty() || g.temperatures.empty() || g.blends.empty()) {
        throw Error("ising grid: every axis needs at least one value");
    }
    for (double j : g.couplings) {
        for (double t : g.temperatures) {
            for (double b : g.blends) validate(IsingConfig{j, t, b});
        }
    }
    return g;
}

std::vector<CellSpec> expand_grid(const GridSpec& g, std::size_t cap) {
    const std::size_t raw = g.methods.size() * g.alphas.size() * g.betas.size() * g.dks.size() *
                            g.normalizers.size() * g.synonyms.size() * g.ising.size();
    if (raw > cap) {
        throw Error("grid has " + std::to_string(raw) + " cells, above the cap of " + std::to_string(cap) +
                    "; raise cell_cap or shrink an axis");
    }
    std::vector<CellSpec> out;
    std::set<std::string> seen;
    for (const auto& m : g.methods) {
        for (double a : g.alphas) {
            for (double b : g.betas) {
                for (const auto& dk : g.dks) {
                    for (auto n : g.normalizers) {
                        for (bool s : g.synonyms) {
                            for (const auto& is : g.ising) {
                                CellSpec c = m == "vector_only" ? vector_only_cell() : g.base;
                                if (m != "vector_only") {
                                    c.method = m;
                                    c.alpha = a;
                                    c.beta = b;
                                    c.dk = dk;
                                    c.normalizer = n;
                                    c.synonyms = s;
                                    c.ising = is;
                                }
                                if (seen.insert(c.id()).second) out.push_back(std::move(c));
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

std::string tier_of(const CellSpec& cell) {
    if (cell.is_vector_only() || cell.is_graph_only()) return "baseline";
    if (cell.ising) return "tier2";
    if (cell.method == "thermo" || cell.method == "rrf" || cell.method == "linear") return "tier1";
    return "tier3";
}

// ---------------------------------------------------------------------------
// Data and retrieval
// ---------------------------------------------------------------------------

Dataset load_dataset(const DataPaths& paths) {
    Corpus corpus = load_corpus(paths.passages, paths.annotations);
    std::vector<Query> queries = load_queries(paths.queries, corpus);
    EmbeddingStore passages = load_embeddings(paths.passage_embeddings);
    EmbeddingStore query_vectors = load_embeddings(paths.query_embeddings, passages.dimension());
    std::optional<EmbeddingStore> entity_vectors;
    if (!paths.entity_embeddings.empty() && std::filesystem::exists(paths.entity_embeddings)) {
        entity_vectors = load_embeddings(paths.entity_embeddings);
    }
    return {std::move(corpus), std::move(queries), std::move(passages), std::move(query_vectors),
            std::move(entity_vectors)};
}

Workspace::Workspace(Dataset data, const RunConfig& config, bool need_linked)
    : data_(std::move(data)), config_(config), plain_(build_entity_graph(data_.corpus)) {
    if (need_linked) {
        if (!data_.entity_embeddings) throw Error("synonym linking needs entity embeddings");
        link_ = std::make_unique<LinkResult>(link_synonyms(plain_, *data_.entity_embeddings, config_.synonym_threshold));
    }
}

const EntityGraph& Workspace::graph(bool linked) const {
    if (!linked) return plain_;
    if (!link_) throw Error("workspace was built without synonym linking");
    return link_->graph;
}

std::size_t Workspace::max_k() const { return config_.ks.back(); }

QueryPools Workspace::retrieve(std::size_t query_index, std::size_t vector_n) const {
    const Query& q = data_.queries.at(query_index);
    QueryPools out;
    out.vector.system = System::vector;
    out.graph.system = System::graph;
    out.graph_linked.system = System::graph;
    try {
        const auto qv = data_.query_embeddings.find(q.id);
        if (!qv) throw Error("no embedding for query \"" + q.id + "\"");
        out.vector = vector_topk(*qv, data_.passage_embeddings, vector_n);

        auto graph_list = [&](const EntityGraph& g) {
            const SeedResult seeds = seed_entities_for_query(q.entities, g);
            out.seed_misses = seeds.misses;
            const PprResult r = ppr(g, seeds.seeds, config_.ppr);
            if (r.no_seed) {
                out.no_seed = true;
                return ScoreList{System::graph, {}};
            }
            return graph_passage_scores(r.scores, g);
        };
        out.graph = graph_list(plain_);
        if (link_) out.graph_linked = graph_list(link_->graph);
    } catch (const std::exception& e) {
        out.failure = e.what();
    }
    return out;
}

const std::vector<QueryPools>& Workspace::pools() {
    if (!pools_) {
        std::vector<QueryPools> result(data_.queries.size());
        parallel_for(result.size(), config_.threads, [&](std::size_t i) { result[i] = retrieve(i, config_.n_v); });
        pools_ = std::move(result);
    }
    return *pools_;
}

namespace {

FusedRanking single_system(const ScoreList& list, std::size_t depth, bool graph) {
    FusedRanking r;
    for (std::size_t i = 0; i < list.size() && i < depth; ++i) {
        const auto& e = list.entries[i];
        r.entries.push_back({e.id, e.score, !graph, graph, false});
    }
    return r;
}

}  // namespace

FusedRanking Workspace::rank(std::size_t query_index, const CellSpec& cell, std::size_t depth) {
    if (!pools_) throw Error("retrieval pools have not been built");
    const QueryPools& p = (*pools_).at(query_index);
    if (p.failure) throw Error(*p.failure);
    if (cell.is_vector_only()) return single_system(p.vector, depth, false);

    const ScoreList& graph_list = cell.synonyms ? p.graph_linked : p.graph;
    if (cell.synonyms && !link_) throw Error("workspace was built without synonym linking");
    const ScoreList capped = cap_pool(graph_list, p.vector, cell.dk);
    if (cell.is_graph_only()) return single_system(capped, depth, true);

    const std::size_t fuse_depth = cell.ising ? std::max(depth, config_.rerank_depth) : depth;
    FusedRanking fused;
    if (cell.method == "rrf") {
        fused = rrf_fuse(p.vector, capped, cell.params.rrf_k0, fuse_depth);
    } else {
        auto cal = [&](const ScoreList& l, System s) {
            return l.empty() ? empty_calibrated(s, cell.normalizer)
                             : calibrate(l, cell.normalizer, cell.temperature, cell.epsilon);
        };
        const CalibratedList cv = cal(p.vector, System::vector);
        const CalibratedList cg = cal(capped, System::graph);
        FusionConfig fc;
        fc.alpha = cell.alpha;
        fc.beta = cell.beta;
        fc.strategy = parse_strategy(cell.method);
        fc.params = cell.params;
        fc.k = fuse_depth;
        fused = strategy_fuse(cv, cg, fc);
    }
    if (cell.ising) {
        const Coupling coupling = build_coupling(fused, graph(cell.synonyms));
        fused = mean_field_rerank(fused, coupling, *cell.ising).ranking;
        if (fused.entries.size() > depth) fused.entries.resize(depth);
    }
    return fused;
}

std::map<std::string, std::vector<std::size_t>> split_indices(const RunConfig& config,
                                                              std::span<const Query> queries) {
    std::map<std::string, std::vector<std::size_t>> out;
    if (config.split_mode == "all") {
        auto& all = out["all"];
        for (std::size_t i = 0; i < queries.size(); ++i) all.push_back(i);
        return out;
    }
    const SplitAssignment assignment = md5_split(queries, config.tune_fraction);
    out["tune"];
    out["test"];
    for (std::size_t i = 0; i < queries.size(); ++i) {
        out[std::string(to_string(assignment.at(queries[i].id)))].push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<RunRecord> run_cell(Workspace& ws, std::span<const std::size_t> indices, const CellSpec& cell) {
    std::vector<RunRecord> records(indices.size());
    const std::string cid = cell.id();
    const std::size_t depth = ws.max_k();
    parallel_for(indices.size(), ws.config().threads, [&](std::size_t i) {
        const Query& q = ws.data().queries[indices[i]];
        RunRecord& r = records[i];
        r.query_id = q.id;
        r.cell_id = cid;
        const auto start = std::chrono::steady_clock::now();
        try {
            FusedRanking ranking = ws.rank(indices[i], cell, depth);
            r.outcome = make_outcome(q.id, ranking.ids(), q.gold_chain, ws.config().ks);
        } catch (const std::exception& e) {
            r.failure = e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    });
    return records;
}

CellSummary summarize(const std::string& split, std::size_t index, const CellSpec& cell,
                      const std::vector<RunRecord>& method, const std::vector<RunRecord>& baseline,
                      std::span<const std::size_t> ks) {
    CellSummary s;
    s.split = split;
    s.cell_index = index;
    s.cell = cell;
    std::vector<QueryOutcome> m, b;
    for (std::size_t i = 0; i < method.size(); ++i) {
        if (method[i].outcome && baseline[i].outcome) {
            m.push_back(*method[i].outcome);
            b.push_back(*baseline[i].outcome);
        } else {
            ++s.failed;
        }
    }
    s.n = m.size();
    for (std::size_t k : ks) {
        KSummary ksum;
        ksum.k = k;
        const auto metrics = all_metrics();
        for (std::size_t mi = 0; mi < metrics.size(); ++mi) {
            const PairedComparison pc = pair_outcomes(b, m, metrics[mi], k);
            ksum.paired[mi] = pc;
            ksum.p[mi] = mcnemar_exact(pc.wins, pc.losses);
            const std::size_t hits = pc.wins + pc.both;
            ksum.rate[mi] = s.n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(s.n);
            if (metrics[mi] == Metric::lasthop && s.n > 0) {
                ksum.lasthop_ci = wilson_ci(hits, s.n);
                ksum.lasthop_odds = odds_ratio(hits, pc.losses + pc.both, s.n);
            }
        }
        s.per_k.push_back(ksum);
    }
    return s;
}

std::size_t metric_index(Metric m) {
    const auto all = all_metrics();
    return static_cast<std::size_t>(std::find(all.begin(), all.end(), m) - all.begin());
}

}  // namespace

const KSummary& CellSummary::at(std::size_t k) const {
    for (const auto& ks : per_k) {
        if (ks.k == k) return ks;
    }
    throw Error("no summary at K=" + std::to_string(k));
}

SplitReport evaluate_split(Workspace& ws, std::string split, std::span<const std::size_t> query_indices,
                           std::span<const CellSpec> cells, const CellSpec& baseline) {
    ws.pools();
    SplitReport report;
    report.split = std::move(split);
    report.baseline_records = run_cell(ws, query_indices, baseline);
    for (std::size_t c = 0; c < cells.size(); ++c) {
        report.records.push_back(run_cell(ws, query_indices, cells[c]));
        report.cells.push_back(
            summarize(report.split, c, cells[c], report.records.back(), report.baseline_records, ws.config().ks));
    }
    return report;
}

std::size_t select_tune_winner(std::span<const CellSummary> cells, Metric metric, std::size_t k,
                               SelectionRule rule) {
    if (cells.empty()) throw Error("cannot select a winner from an empty report");
    const std::size_t mi = metric_index(metric);
    bool any_win = false;
    for (const auto& c : cells) any_win = any_win || c.at(k).paired[mi].wins > 0;

    auto dk_key = [](const CellSummary& c) {
        return c.cell.dk ? static_cast<double>(*c.cell.dk) : std::numeric_limits<double>::infinity();
    };
    // True when a is preferred over b on the secondary keys.
    auto tie_break = [&](const CellSummary& a, const CellSummary& b) {
        if (dk_key(a) != dk_key(b)) return dk_key(a) < dk_key(b);
        if (a.cell.alpha != b.cell.alpha) return a.cell.alpha > b.cell.alpha;
        return a.cell_index < b.cell_index;
    };
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const KSummary& ks = cells[i].at(k);
        if (rule == SelectionRule::safety && any_win && ks.paired[mi].wins == 0) continue;
        if (!best) {
            best = i;
            continue;
        }
        const KSummary& bs = cells[*best].at(k);
        bool better;
        if (rule == SelectionRule::max_metric) {
            better = ks.rate[mi] != bs.rate[mi] ? ks.rate[mi] > bs.rate[mi] : tie_break(cells[i], cells[*best]);
        } else {
            const auto l = ks.paired[mi].losses, bl = bs.paired[mi].losses;
            better = l != bl ? l < bl : tie_break(cells[i], cells[*best]);
        }
        if (better) best = i;
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

void write_report_csv(std::ostream& out, std::span<const SplitReport> reports, const std::string& hash) {
    out << "split,cell_index,cell,method,tier,k,n,failed,lasthop,fullsup,any,full,W,L,both,neither,p,"
           "ci_low,ci_high,odds_ratio,or_corrected,config_hash\n";
    char buf[512];
    for (const auto& r : reports) {
        for (const auto& c : r.cells) {
            for (const auto& k : c.per_k) {
                const auto& pc = k.paired[0];
                std::snprintf(buf, sizeof buf,
                              "%s,%zu,%s,%s,%s,%zu,%zu,%zu,%.2f,%.2f,%.2f,%.2f,%zu,%zu,%zu,%zu,%.6g,%.2f,%.2f,%.4f,%d,%s\n",
                              r.split.c_str(), c.cell_index, c.cell.id().c_str(), c.cell.method.c_str(),
                              tier_of(c.cell).c_str(), k.k, c.n, c.failed, 100.0 * k.rate[0], 100.0 * k.rate[1],
                              100.0 * k.rate[2], 100.0 * k.rate[3], pc.wins, pc.losses, pc.both, pc.neither, k.p[0],
                              100.0 * k.lasthop_ci.low, 100.0 * k.lasthop_ci.high, k.lasthop_odds.value,
                              k.lasthop_odds.corrected ? 1 : 0, hash.c_str());
                out << buf;
            }
        }
    }
    for (const auto& r : reports) {
        std::size_t failed = 0;
        for (const auto& b : r.baseline_records) failed += b.outcome ? 0 : 1;
        if (failed > 0) out << "# " << r.split << ": " << failed << " queries failed and were excluded\n";
    }
}

void write_report_json(std::ostream& out, std::span<const SplitReport> reports, const RunConfig& config,
                       const std::optional<std::size_t>& winner) {
    json j;
    j["config_hash"] = config_hash(config);
    j["config"] = run_config_to_json(config, true);
    json rs = json::array();
    for (const auto& r : reports) {
        json cells = json::array();
        for (const auto& c : r.cells) {
            json per_k = json::array();
            for (const auto& k : c.per_k) {
                json metrics = json::object();
                const auto all = all_metrics();
                for (std::size_t mi = 0; mi < all.size(); ++mi) {
                    const auto& pc = k.paired[mi];
                    metrics[std::string(to_string(all[mi]))] = {{"rate", k.rate[mi]}, {"W", pc.wins},
                                                                {"L", pc.losses},     {"both", pc.both},
                                                                {"neither", pc.neither}, {"p", k.p[mi]}};
                }
                per_k.push_back({{"k", k.k},
                                 {"metrics", metrics},
                                 {"lasthop_ci", {k.lasthop_ci.low, k.lasthop_ci.high}},
                                 {"odds_ratio", k.lasthop_odds.value},
                                 {"odds_ratio_corrected", k.lasthop_odds.corrected}});
            }
            cells.push_back({{"index", c.cell_index},
                             {"id", c.cell.id()},
                             {"tier", tier_of(c.cell)},
                             {"spec", cell_to_json(c.cell)},
                             {"n", c.n},
                             {"failed", c.failed},
                             {"per_k", per_k}});
        }
        rs.push_back({{"split", r.split}, {"cells", cells}});
    }
    j["reports"] = rs;
    if (winner && !reports.empty() && *winner < reports.front().cells.size()) {
        j["winner"] = {{"selected_on", reports.front().split},
                       {"rule", std::string(to_string(config.selection_rule))},
                       {"index", *winner},
                       {"id", reports.front().cells[*winner].cell.id()}};
    } else {
        j["winner"] = nullptr;
    }
    out << j.dump(2) << "\n";
}

void write_records_jsonl(std::ostream& out, const SplitReport& report) {
    auto emit = [&](const RunRecord& r) {
        json j = {{"query", r.query_id}, {"cell", r.cell_id}};
        if (r.outcome) {
            j["retrieved"] = r.outcome->retrieved;
            json hits = json::object();
            for (const auto& [k, h] : r.outcome->at_k) {
                hits[std::to_string(k)] = {
                    {"lasthop", h.lasthop}, {"fullsup", h.fullsup}, {"any", h.any}, {"full", h.full}};
            }
            j["hits"] = hits;
        } else {
            j["failure"] = r.failure;
        }
        out << j.dump() << "\n";
    };
    for (const auto& r : report.baseline_records) emit(r);
    for (const auto& cell : report.records) {
        for (const auto& r : cell) emit(r);
    }
}

void write_timings_csv(std::ostream& out, const SplitReport& report) {
    out << "cell,query,seconds\n";
    char buf[64];
    auto emit = [&](const RunRecord& r) {
        std::snprintf(buf, sizeof buf, "%.6f", r.seconds);
        out << r.cell_id << "," << r.query_id << "," << buf << "\n";
    };
    for (const auto& r : report.baseline_records) emit(r);
    for (const auto& cell : report.records) {
        for (const auto& r : cell) emit(r);
    }
}

void write_sweep_summary_csv(std::ostream& out, const SplitReport& report, Metric metric, std::size_t k) {
    const std::size_t mi = metric_index(metric);
    struct Tier {
        std::size_t count = 0;
        std::optional<std::size_t> best_w, best_rate;
    };
    std::map<std::string, Tier> tiers;
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
        const auto& c = report.cells[i];
        Tier& t = tiers[tier_of(c.cell)];
        ++t.count;
        const auto& ks = c.at(k);
        if (!t.best_w || ks.paired[mi].wins > report.cells[*t.best_w].at(k).paired[mi].wins) t.best_w = i;
        if (!t.best_rate || ks.rate[mi] > report.cells[*t.best_rate].at(k).rate[mi]) t.best_rate = i;
    }
    out << "split,tier,configs,metric,k,best_W,best_W_L,best_W_cell,max_metric,max_metric_cell\n";
    char buf[128];
    for (const auto& [name, t] : tiers) {
        const auto& w = report.cells[*t.best_w];
        const auto& m = report.cells[*t.best_rate];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * m.at(k).rate[mi]);
        out << report.split << "," << name << "," << t.count << "," << to_string(metric) << "," << k << ","
            << w.at(k).paired[mi].wins << "," << w.at(k).paired[mi].losses << "," << w.cell.id() << "," << buf
            << "," << m.cell.id() << "\n";
    }
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << content;
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

namespace {

template <class Fn>
std::string render(Fn fn) {
    std::ostringstream ss;
    fn(ss);
    return ss.str();
}

}  // namespace

EvalResult run_eval(const RunConfig& config, std::ostream* log) {
    std::vector<CellSpec> cells = config.cells;
    if (config.grid) {
        for (auto& c : expand_grid(*config.grid, config.cell_cap)) cells.push_back(std::move(c));
    }
    if (cells.empty()) throw Error("run config lists no cells");
    if (cells.size() > config.cell_cap) {
        throw Error(std::to_string(cells.size()) + " cells exceed the cap of " + std::to_string(config.cell_cap));
    }

    std::optional<CellSpec> baseline;
    if (config.baseline == "vector_only") {
        baseline = vector_only_cell();
    } else {
        for (const auto& c : cells) {
            if (c.id() == config.baseline) baseline = c;
        }
        if (!baseline) throw Error("baseline \"" + config.baseline + "\" matches no cell");
    }
    const bool need_linked =
        baseline->synonyms || std::any_of(cells.begin(), cells.end(), [](const CellSpec& c) { return c.synonyms; });

    Workspace ws(load_dataset(config.data), config, need_linked);
    if (log) {
        *log << "loaded " << ws.data().corpus.size() << " passages, " << ws.data().queries.size() << " queries; "
             << cells.size() << " cells\n";
    }
    const auto splits = split_indices(config, ws.data().queries);
    const std::size_t sel_k = config.selection_k.value_or(config.ks.front());
    if (std::find(config.ks.begin(), config.ks.end(), sel_k) == config.ks.end()) {
        throw Error("selection_k is not among ks");
    }

    EvalResult result;
    result.hash = config_hash(config);
    const std::string first = config.split_mode == "all" ? "all" : "tune";
    result.reports.push_back(evaluate_split(ws, first, splits.at(first), cells, *baseline));
    if (!splits.at(first).empty()) {
        result.winner = select_tune_winner(result.reports.front().cells, config.selection_metric, sel_k,
                                           config.selection_rule);
    }
    if (log) {
        *log << first << ": " << splits.at(first).size() << " queries";
        if (result.winner) *log << ", winner " << result.reports.front().cells[*result.winner].cell.id();
        *log << "\n";
    }
    if (config.split_mode == "tune_test" && config.confirm) {
        result.reports.push_back(evaluate_split(ws, "test", splits.at("test"), cells, *baseline));
        if (log) *log << "test: " << splits.at("test").size() << " queries\n";
    }

    const auto& dir = config.output_dir;
    std::filesystem::create_directories(dir);
    write_atomic(dir / "report.csv", render([&](std::ostream& o) { write_report_csv(o, result.reports, result.hash); }));
    write_atomic(dir / "report.json",
                 render([&](std::ostream& o) { write_report_json(o, result.reports, config, result.winner); }));
    for (const auto& r : result.reports) {
        write_atomic(dir / ("records_" + r.split + ".jsonl"), render([&](std::ostream& o) { write_records_jsonl(o, r); }));
        write_atomic(dir / ("timings_" + r.split + ".csv"), render([&](std::ostream& o) { write_timings_csv(o, r); }));
    }
    if (config.grid) {
        write_atomic(dir / "sweep_summary.csv", render([&](std::ostream& o) {
                         for (const auto& r : result.reports) {
                             if (&r != &result.reports.front()) {
                                 std::ostringstream tail;
                                 write_sweep_summary_csv(tail, r, config.selection_metric, sel_k);
                                 const std::string s = tail.str();
                                 o << s.substr(s.find('\n') + 1);
                             } else {
                                 write_sweep_summary_csv(o, r, config.selection_metric, sel_k);
                             }
                         }
                     }));
    }
    return result;
}

std::vector<IsingSweepCell> run_ising_sweep(Workspace& ws, std::span<const std::size_t> query_indices,
                                            const CellSpec& cell, const IsingGrid& grid, std::size_t k) {
    ws.pools();
    CellSpec plain = cell;
    plain.ising.reset();
    const std::size_t depth = std::max(k, ws.config().rerank_depth);
    std::vector<IsingQuery> queries;
    std::vector<char> baseline_hits;
    std::vector<std::size_t> used;
    for (std::size_t qi : query_indices) {
        try {
            const FusedRanking base = ws.rank(qi, vector_only_cell(), k);
            FusedRanking fused = ws.rank(qi, plain, depth);
            Coupling coupling = build_coupling(fused, ws.graph(cell.synonyms));
            baseline_hits.push_back(lasthop_at_k(base.ids(), ws.data().queries[qi].gold_chain, k));
            queries.push_back({std::move(fused), std::move(coupling)});
            used.push_back(qi);
        } catch (const Error&) {
            // failed queries are excluded from both arms
        }
    }
    const HitFn hit = [&](std::size_t i, const FusedRanking& r) {
        return lasthop_at_k(r.ids(), ws.data().queries[used[i]].gold_chain, k);
    };
    auto flags = std::make_unique<bool[]>(baseline_hits.size());
    for (std::size_t i = 0; i < baseline_hits.size(); ++i) flags[i] = baseline_hits[i] != 0;
    const IsingConfig base = cell.ising.value_or(IsingConfig{});
    return ising_sweep(queries, grid, std::span<const bool>(flags.get(), baseline_hits.size()), hit, base);
}

}  // namespace calfuse
