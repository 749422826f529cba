#include "calfuse/error.hpp"
#include "calfuse/harness.hpp"
#include "calfuse/rng.hpp"
#include "calfuse/synth.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <sstream>
#include <tuple>

using namespace calfuse;
using testutil::read_text;
using testutil::TempDir;
using testutil::write_text;

namespace {

/// Small generated corpus on disk, shared by the tests in this file.
const std::filesystem::path& corpus_dir() {
    static TempDir dir;
    static bool written = false;
    if (!written) {
        SynthConfig c;
        c.n_passages = 1000;
        c.n_queries = 60;
        c.entity_vocab = 1500;
        c.entities_per_passage_max = 1;
        c.dimension = 128;
        c.alias_rate = 0.3;
        write_synth(dir.path(), generate(c));
        written = true;
    }
    return dir.path();
}

RunConfig base_config(const std::filesystem::path& out) {
    RunConfig c;
    c.data = DataPaths::in_directory(corpus_dir());
    c.output_dir = out;
    c.threads = 2;
    return c;
}

CellSpec thermo(double alpha, double beta, std::optional<std::size_t> dk = std::nullopt) {
    CellSpec c;
    c.alpha = alpha;
    c.beta = beta;
    c.dk = dk;
    return c;
}

CellSummary summary(std::size_t index, double alpha, std::optional<std::size_t> dk, double rate, std::size_t w,
                    std::size_t l) {
    CellSummary s;
    s.cell_index = index;
    s.cell = thermo(alpha, 0.5, dk);
    KSummary k;
    k.k = 5;
    k.rate[0] = rate;
    k.paired[0].wins = w;
    k.paired[0].losses = l;
    s.per_k.push_back(k);
    return s;
}

}  // namespace

TEST_CASE("cell identifiers list the knobs each method reads") {
    CellSpec c = thermo(0.7, 0.5, 30);
    c.synonyms = true;
    CHECK(c.id() == "thermo;a=0.7;b=0.5;norm=pit;T=auto;dk=30;syn=1");
    CHECK(vector_only_cell().id() == "vector_only");
    CellSpec r;
    r.method = "rrf";
    CHECK(r.id() == "rrf;dk=none;syn=0;k0=60");
    CellSpec lg = thermo(0.4, 0.5);
    lg.method = "log_linear";
    CHECK(lg.id().find(";b=") == std::string::npos);
    CellSpec is = thermo(0.5, 0.0);
    is.ising = IsingConfig{1.0, 0.5, 0.25};
    CHECK(is.id() == "thermo;a=0.5;b=0;norm=pit;T=auto;dk=none;syn=0;ising=J1/T0.5/b0.25");
    CHECK(parse_cell(cell_json(is)).id() == is.id());
    CHECK_THROWS_AS(parse_cell(R"({"method": "thermo", "colour": 1})"), Error);

    CHECK(tier_of(vector_only_cell()) == "baseline");
    CHECK(tier_of(r) == "tier1");
    CHECK(tier_of(is) == "tier2");
    CHECK(tier_of(lg) == "tier3");
}

TEST_CASE("run config parsing") {
    TempDir dir;
    write_text(dir / "cfg.json", R"({
        "data": {"dir": "data"},
        "split_mode": "all",
        "ks": [10, 5, 10],
        "cells": [{"method": "thermo", "alpha": 0.7, "beta": 0.5, "dk": 30}],
        "selection_rule": "safety",
        "output_dir": "out"
    })");
    const RunConfig c = load_run_config(dir / "cfg.json");
    CHECK(c.data.passages == dir / "data" / "passages.jsonl");
    CHECK(c.data.entity_embeddings == dir / "data" / "entity_emb.bin");
    CHECK(c.output_dir == dir / "out");
    CHECK(c.ks == std::vector<std::size_t>{5, 10});
    REQUIRE(c.cells.size() == 1);
    CHECK(c.cells[0].dk == 30u);
    CHECK(c.selection_rule == SelectionRule::safety);
    CHECK(parse_run_config(run_config_json(c)).cells[0].id() == c.cells[0].id());

    CHECK_THROWS_AS(parse_run_config(R"({"n_vv": 10})"), Error);
    CHECK_THROWS_AS(parse_run_config(R"({"split_mode": "random"})"), Error);
    CHECK_THROWS_AS(parse_run_config(R"({"ks": [0]})"), Error);
    CHECK_THROWS_AS(parse_run_config("not json"), Error);

    RunConfig a = c;
    RunConfig b = c;
    b.output_dir = "elsewhere";
    b.threads = 7;
    CHECK(config_hash(a) == config_hash(b));
    b.n_v = 11;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("grid expansion") {
    GridSpec g;
    g.alphas = {0.3, 0.5, 0.7};
    g.dks = {std::nullopt, 20, 30};
    CHECK(expand_grid(g, 1000).size() == 9);
    CHECK_THROWS_WITH_AS(expand_grid(g, 8), doctest::Contains("cap"), Error);

    // rrf ignores alpha and beta: those axes collapse.
    g.methods = {"rrf"};
    g.betas = {0.0, 0.5};
    CHECK(expand_grid(g, 1000).size() == 3);
}

TEST_CASE("winner selection") {
    const std::vector<CellSummary> one{summary(0, 0.5, std::nullopt, 0.4, 1, 1)};
    CHECK(select_tune_winner(one, Metric::lasthop, 5, SelectionRule::max_metric) == 0);
    CHECK_THROWS_AS(select_tune_winner(std::vector<CellSummary>{}, Metric::lasthop, 5, SelectionRule::max_metric),
                    Error);

    const std::vector<CellSummary> pair{summary(0, 0.5, 30, 0.60, 10, 3), summary(1, 0.5, 30, 0.58, 8, 0)};
    CHECK(select_tune_winner(pair, Metric::lasthop, 5, SelectionRule::safety) == 1);
    CHECK(select_tune_winner(pair, Metric::lasthop, 5, SelectionRule::max_metric) == 0);

    // Ties: smaller dk first, then larger alpha.
    const std::vector<CellSummary> ties{summary(0, 0.7, std::nullopt, 0.5, 2, 1), summary(1, 0.4, 20, 0.5, 2, 1),
                                        summary(2, 0.7, 20, 0.5, 2, 1), summary(3, 0.7, 0, 0.4, 2, 1)};
    CHECK(select_tune_winner(ties, Metric::lasthop, 5, SelectionRule::max_metric) == 2);
    CHECK(select_tune_winner(ties, Metric::lasthop, 5, SelectionRule::safety) == 3);

    // Nobody wins: safety falls back to all cells.
    const std::vector<CellSummary> none{summary(0, 0.5, 30, 0.5, 0, 4), summary(1, 0.5, 30, 0.5, 0, 2)};
    CHECK(select_tune_winner(none, Metric::lasthop, 5, SelectionRule::safety) == 1);
}

TEST_CASE("winner selection matches an exhaustive re-scan") {
    Rng rng(42);
    const std::vector<std::optional<std::size_t>> dks{std::nullopt, 0, 20, 30, 50};
    const std::vector<double> alphas{0.3, 0.4, 0.5, 0.7, 1.0};
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<CellSummary> cells;
        for (std::size_t i = 0; i < 12; ++i) {
            cells.push_back(summary(i, alphas[rng.below(5)], dks[rng.below(5)], static_cast<double>(rng.below(4)) / 10.0,
                                    rng.below(3), rng.below(4)));
        }
        auto dk_key = [](const CellSummary& c) { return c.cell.dk ? static_cast<double>(*c.cell.dk) : 1e300; };
        auto key_max = [&](const CellSummary& c) {
            return std::make_tuple(-c.per_k[0].rate[0], dk_key(c), -c.cell.alpha, c.cell_index);
        };
        auto key_safe = [&](const CellSummary& c) {
            return std::make_tuple(c.per_k[0].paired[0].losses, dk_key(c), -c.cell.alpha, c.cell_index);
        };
        std::size_t best_max = 0;
        for (std::size_t i = 1; i < cells.size(); ++i) {
            if (key_max(cells[i]) < key_max(cells[best_max])) best_max = i;
        }
        const bool any_win = std::any_of(cells.begin(), cells.end(), [](const CellSummary& c) { return c.per_k[0].paired[0].wins > 0; });
        std::optional<std::size_t> best_safe;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (any_win && cells[i].per_k[0].paired[0].wins == 0) continue;
            if (!best_safe || key_safe(cells[i]) < key_safe(cells[*best_safe])) best_safe = i;
        }
        CHECK(select_tune_winner(cells, Metric::lasthop, 5, SelectionRule::max_metric) == best_max);
        CHECK(select_tune_winner(cells, Metric::lasthop, 5, SelectionRule::safety) == *best_safe);
    }
}

TEST_CASE("split indices") {
    TempDir out;
    RunConfig c = base_config(out.path());
    const Dataset d = load_dataset(c.data);
    const auto tt = split_indices(c, d.queries);
    CHECK(tt.at("tune").size() + tt.at("test").size() == d.queries.size());
    c.split_mode = "all";
    CHECK(split_indices(c, d.queries).at("all").size() == d.queries.size());
}

TEST_CASE("baseline against itself and the alpha-one degeneracy") {
    TempDir out;
    RunConfig c = base_config(out.path());
    Workspace ws(load_dataset(c.data), c, false);
    ws.pools();
    std::vector<std::size_t> all(ws.data().queries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::vector<CellSpec> cells{vector_only_cell(), thermo(1.0, 0.0), thermo(1.0, 0.0, 0)};
    const SplitReport r = evaluate_split(ws, "all", all, cells, vector_only_cell());
    REQUIRE(r.cells.size() == 3);
    for (const auto& cell : r.cells) {
        CHECK(cell.n == all.size());
        for (const auto& k : cell.per_k) {
            for (std::size_t m = 0; m < 4; ++m) {
                CHECK(k.paired[m].wins == 0);
                CHECK(k.paired[m].losses == 0);
                CHECK(k.p[m] == 1.0);
                CHECK(k.rate[m] == r.cells[0].at(k.k).rate[m]);
            }
        }
    }
    CHECK(ws.rank(0, thermo(1.0, 0.0), 10).ids() == ws.rank(0, vector_only_cell(), 10).ids());
}

TEST_CASE("failed queries are excluded from both arms") {
    TempDir out;
    RunConfig c = base_config(out.path());
    Dataset d = load_dataset(c.data);
    const std::string dropped = d.queries[3].id;
    EmbeddingStore kept(d.query_embeddings.dimension());
    for (std::size_t r = 0; r < d.query_embeddings.size(); ++r) {
        if (d.query_embeddings.id(r) != dropped) kept.add(d.query_embeddings.id(r), d.query_embeddings.row(r));
    }
    d.query_embeddings = std::move(kept);
    Workspace ws(std::move(d), c, false);
    CHECK(ws.pools()[3].failure);
    std::vector<std::size_t> all(ws.data().queries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::vector<CellSpec> cells{thermo(0.5, 0.5, 20)};
    const SplitReport r = evaluate_split(ws, "all", all, cells, vector_only_cell());
    CHECK(r.cells[0].failed == 1);
    CHECK(r.cells[0].n == all.size() - 1);
    CHECK(r.cells[0].at(5).paired[0].total() == all.size() - 1);
    std::ostringstream csv;
    const std::vector<SplitReport> reports{r};
    write_report_csv(csv, reports, "h");
    CHECK(csv.str().find("# all: 1 queries failed and were excluded") != std::string::npos);
}

TEST_CASE("every strategy, synonyms and ising cells run end to end") {
    TempDir out;
    RunConfig c = base_config(out.path());
    c.split_mode = "all";
    for (Strategy s : all_strategies()) {
        CellSpec cell = thermo(0.6, 0.5, 30);
        cell.method = std::string(to_string(s));
        c.cells.push_back(cell);
    }
    CellSpec syn = thermo(0.7, 0.5, 30);
    syn.synonyms = true;
    c.cells.push_back(syn);
    CellSpec is = thermo(0.7, 0.5, 30);
    is.ising = IsingConfig{};
    c.cells.push_back(is);
    CellSpec go;
    go.method = "graph_only";
    c.cells.push_back(go);
    const EvalResult r = run_eval(c);
    REQUIRE(r.reports.size() == 1);
    CHECK(r.reports[0].cells.size() == c.cells.size());
    for (const auto& cell : r.reports[0].cells) CHECK(cell.failed == 0);
    CHECK(std::filesystem::exists(out / "report.json"));
    CHECK(std::filesystem::exists(out / "records_all.jsonl"));
    CHECK(read_text(out / "report.csv").rfind("split,cell_index,cell,method,tier,k,n,failed,lasthop", 0) == 0);
}

TEST_CASE("tune and test are evaluated separately; reports are reproducible") {
    TempDir a, b;
    RunConfig c = base_config(a.path());
    GridSpec g;
    g.alphas = {0.3, 0.7};
    g.betas = {0.0, 0.5};
    g.dks = {std::nullopt, 30};
    c.grid = g;
    const EvalResult first = run_eval(c);
    CHECK(first.reports.size() == 1);
    CHECK(first.reports[0].split == "tune");
    REQUIRE(first.winner);
    CHECK(std::filesystem::exists(a / "sweep_summary.csv"));

    c.confirm = true;
    c.output_dir = b.path();
    const EvalResult second = run_eval(c);
    REQUIRE(second.reports.size() == 2);
    CHECK(second.reports[1].split == "test");
    CHECK(second.winner == first.winner);
    CHECK(second.hash == first.hash);

    TempDir again;
    c.output_dir = again.path();
    c.threads = 1;
    run_eval(c);
    CHECK(read_text(b / "report.csv") == read_text(again / "report.csv"));
    CHECK(read_text(b / "records_test.jsonl") == read_text(again / "records_test.jsonl"));
}

TEST_CASE("ising sweep on top of a fused cell") {
    TempDir out;
    RunConfig c = base_config(out.path());
    Workspace ws(load_dataset(c.data), c, false);
    std::vector<std::size_t> all(ws.data().queries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    IsingGrid grid;
    grid.couplings = {1.0};
    grid.temperatures = {1.0};
    grid.blends = {0.0, 0.5};
    const auto cells = run_ising_sweep(ws, all, thermo(0.7, 0.5, 30), grid, 5);
    REQUIRE(cells.size() == 2);
    // blend 0 leaves the fused ranking as is: its tally is the fused cell's own.
    const std::vector<CellSpec> one{thermo(0.7, 0.5, 30)};
    const SplitReport r = evaluate_split(ws, "all", all, one, vector_only_cell());
    CHECK(cells[0].wins == r.cells[0].at(5).paired[0].wins);
    CHECK(cells[0].losses == r.cells[0].at(5).paired[0].losses);
}
