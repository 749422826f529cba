#pragma once

#include "calfuse/calibration.hpp"
#include "calfuse/corpus.hpp"
#include "calfuse/fusion.hpp"
#include "calfuse/ising.hpp"
#include "calfuse/metrics.hpp"
#include "calfuse/retrieval.hpp"
#include "calfuse/stats.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calfuse {

struct DataPaths {
    std::filesystem::path passages;
    std::filesystem::path annotations;
    std::filesystem::path queries;
    std::filesystem::path passage_embeddings;
    std::filesystem::path query_embeddings;
    std::filesystem::path entity_embeddings;  ///< optional; needed for synonym linking

    /// Conventional file names inside one directory, as written by `synth`.
    static DataPaths in_directory(const std::filesystem::path& dir);
};

/// One strategy/config cell. `method` is "vector_only", "graph_only" or a
/// fusion strategy name.
struct CellSpec {
    std::string method = "thermo";
    double alpha = 0.5;
    double beta = 0.0;
    std::optional<std::size_t> dk;
    Normalizer normalizer = Normalizer::pit;
    TemperatureMode temperature;
    double epsilon = kDefaultEpsilon;
    StrategyParams params;
    bool synonyms = false;
    std::optional<IsingConfig> ising;

    bool is_vector_only() const { return method == "vector_only"; }
    bool is_graph_only() const { return method == "graph_only"; }
    /// Stable, human-readable identifier listing only the knobs the method reads.
    std::string id() const;
};

CellSpec vector_only_cell();

/// Cross-product sweep description. Axes a method ignores collapse.
struct GridSpec {
    std::vector<std::string> methods{"thermo"};
    std::vector<double> alphas{0.5};
    std::vector<double> betas{0.0};
    std::vector<std::optional<std::size_t>> dks{std::nullopt};
    std::vector<Normalizer> normalizers{Normalizer::pit};
    std::vector<bool> synonyms{false};
    std::vector<std::optional<IsingConfig>> ising{std::nullopt};
    CellSpec base;  ///< everything not on an axis
};

enum class SelectionRule { max_metric, safety };

std::string_view to_string(SelectionRule r);
SelectionRule parse_selection_rule(std::string_view text);

struct RunConfig {
    DataPaths data;
    /// "tune_test" splits by MD5 of the query id; "all" evaluates every query
    /// as one set labeled "all".
    std::string split_mode = "tune_test";
    double tune_fraction = 0.5;
    std::size_t n_v = 10;
    PprConfig ppr;
    double synonym_threshold = 0.85;
    std::vector<std::size_t> ks{5, 10};
    /// Candidates fused before Ising reranking.
    std::size_t rerank_depth = 50;
    std::vector<CellSpec> cells;
    std::optional<GridSpec> grid;  ///< expanded and appended to `cells`
    std::string baseline = "vector_only";
    Metric selection_metric = Metric::lasthop;
    std::optional<std::size_t> selection_k;  ///< default: smallest K
    SelectionRule selection_rule = SelectionRule::max_metric;
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 0;
    std::size_t threads = 0;  ///< 0: hardware concurrency
    std::size_t cell_cap = 1000;
    /// Evaluate the test split (after tune selection).
    bool confirm = false;
};

RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON: keys sorted, data paths as given.
std::string run_config_json(const RunConfig& config);
/// MD5 of the canonical JSON.
std::string config_hash(const RunConfig& config);

std::string cell_json(const CellSpec& cell);
CellSpec parse_cell(std::string_view json_text);

/// Expands the grid into cells (deduplicated, in axis order). Throws when
/// more than `cap` cells would result.
std::vector<CellSpec> expand_grid(const GridSpec& grid, std::size_t cap);

/// "tier1" for thermo/rrf/linear, "tier2" for anything with Ising
/// reranking, "tier3" for the remaining strategies, "baseline" otherwise.
std::string tier_of(const CellSpec& cell);

struct Dataset {
    Corpus corpus;
    std::vector<Query> queries;
    EmbeddingStore passage_embeddings;
    EmbeddingStore query_embeddings;
    std::optional<EmbeddingStore> entity_embeddings;
};

Dataset load_dataset(const DataPaths& paths);

/// Per-query retriever output, independent of any fusion cell.
struct QueryPools {
    ScoreList vector;
    ScoreList graph;         ///< uncapped, plain entity graph
    ScoreList graph_linked;  ///< uncapped, after synonym linking (empty if unused)
    std::size_t seed_misses = 0;
    bool no_seed = false;
    std::optional<std::string> failure;
};

/// Builds graphs once and answers per-query retrieval for any cell.
class Workspace {
public:
    Workspace(Dataset data, const RunConfig& config, bool need_linked);

    const Dataset& data() const { return data_; }
    const RunConfig& config() const { return config_; }
    const EntityGraph& graph(bool linked) const;
    const LinkResult* link_result() const { return link_.get(); }

    /// Retrieve pools for every query (cached, computed in parallel).
    const std::vector<QueryPools>& pools();
    /// Vector top-n and uncapped graph lists without the N_v cut; for
    /// distribution reports.
    QueryPools retrieve(std::size_t query_index, std::size_t vector_n) const;

    /// Fused ranking for one query under `cell`, truncated to `depth`.
    FusedRanking rank(std::size_t query_index, const CellSpec& cell, std::size_t depth);

    std::size_t max_k() const;

private:
    Dataset data_;
    RunConfig config_;
    EntityGraph plain_;
    std::unique_ptr<LinkResult> link_;
    std::optional<std::vector<QueryPools>> pools_;
};

/// One (query, cell) result.
struct RunRecord {
    std::string query_id;
    std::string cell_id;
    std::optional<QueryOutcome> outcome;  ///< empty when the query failed
    std::string failure;
    double seconds = 0.0;
};

struct KSummary {
    std::size_t k = 0;
    std::array<double, 4> rate{};           ///< per Metric, fraction of evaluated queries
    std::array<PairedComparison, 4> paired{};
    std::array<double, 4> p{};              ///< exact McNemar per metric
    Interval lasthop_ci;
    OddsRatio lasthop_odds;
};

struct CellSummary {
    std::string split;
    std::size_t cell_index = 0;
    CellSpec cell;
    std::size_t n = 0;       ///< queries evaluated in both arms
    std::size_t failed = 0;  ///< excluded from both arms
    std::vector<KSummary> per_k;

    const KSummary& at(std::size_t k) const;
};

struct SplitReport {
    std::string split;
    std::vector<CellSummary> cells;
    std::vector<std::vector<RunRecord>> records;  ///< per cell, query order
    std::vector<RunRecord> baseline_records;
};

/// Evaluate every cell on the queries listed in `query_indices`.
SplitReport evaluate_split(Workspace& ws, std::string split, std::span<const std::size_t> query_indices,
                           std::span<const CellSpec> cells, const CellSpec& baseline);

/// Index into `cells` of the selected configuration. max_metric: highest
/// rate, then smaller dk (uncapped counts as largest), then larger alpha,
/// then earlier cell. safety: fewest losses among cells with W > 0 (all
/// cells if none has a win), same tie-breaks.
std::size_t select_tune_winner(std::span<const CellSummary> cells, Metric metric, std::size_t k,
                               SelectionRule rule);

void write_report_csv(std::ostream& out, std::span<const SplitReport> reports, const std::string& hash);
void write_report_json(std::ostream& out, std::span<const SplitReport> reports, const RunConfig& config,
                       const std::optional<std::size_t>& winner);
void write_records_jsonl(std::ostream& out, const SplitReport& report);
void write_timings_csv(std::ostream& out, const SplitReport& report);
void write_sweep_summary_csv(std::ostream& out, const SplitReport& report, Metric metric, std::size_t k);

/// Writes `content` to `path` via a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& content);

struct EvalResult {
    std::vector<SplitReport> reports;  ///< tune (or all) first, test when confirmed
    std::optional<std::size_t> winner;
    std::string hash;
};

/// Full protocol: pools, every cell on the tune split (or all), winner
/// selection, then the test split when `confirm` is set. Writes
/// report.csv, report.json, records_<split>.jsonl, timings_<split>.csv
/// and, for sweeps, sweep_summary.csv into the output directory.
EvalResult run_eval(const RunConfig& config, std::ostream* log = nullptr);

/// {"couplings": [...], "temperatures": [...], "blends": [...]}; missing
/// axes keep the defaults.
IsingGrid parse_ising_grid(std::string_view json_text);

/// Ising parameter sweep on top of one fused cell, paired against the
/// vector-only baseline on last-hop@K.
std::vector<IsingSweepCell> run_ising_sweep(Workspace& ws, std::span<const std::size_t> query_indices,
                                            const CellSpec& cell, const IsingGrid& grid, std::size_t k);

/// Query indices per split label, in query order.
std::map<std::string, std::vector<std::size_t>> split_indices(const RunConfig& config,
                                                              std::span<const Query> queries);

}  // namespace calfuse
