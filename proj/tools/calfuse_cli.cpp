#include "calfuse/error.hpp"
#include "calfuse/harness.hpp"
#include "calfuse/stats.hpp"
#include "calfuse/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace calfuse;
using nlohmann::json;

namespace {

struct DataOptions {
    std::string config;
    std::string data_dir;
    std::string out;
    std::optional<double> damping, ppr_eps;
    std::optional<std::size_t> ppr_max_iter, n_v, threads;
    std::optional<double> synonym_threshold, tune_fraction;
    std::vector<std::size_t> ks;
    std::optional<std::string> split_mode;
    std::optional<std::uint64_t> seed;

    void add(CLI::App* app) {
        app->add_option("--config", config, "Run configuration (JSON)");
        app->add_option("--data", data_dir, "Directory with passages/queries/embeddings as written by synth");
        app->add_option("--out", out, "Output directory");
        app->add_option("--damping", damping, "PPR damping factor");
        app->add_option("--ppr-eps", ppr_eps, "PPR convergence threshold (L1)");
        app->add_option("--ppr-max-iter", ppr_max_iter, "PPR iteration cap");
        app->add_option("--n-v", n_v, "Vector candidates per query");
        app->add_option("--synonym-threshold", synonym_threshold, "Cosine threshold for synonym linking");
        app->add_option("--ks", ks, "Cutoffs K")->delimiter(',');
        app->add_option("--split-mode", split_mode, "tune_test or all");
        app->add_option("--tune-fraction", tune_fraction, "Share of queries in the tune split");
        app->add_option("--threads", threads, "Worker threads (0: all cores)");
        app->add_option("--seed", seed, "Seed recorded with the run");
    }

    RunConfig build() const {
        RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
        if (!data_dir.empty()) c.data = DataPaths::in_directory(data_dir);
        if (!out.empty()) c.output_dir = out;
        if (damping) c.ppr.damping = *damping;
        if (ppr_eps) c.ppr.epsilon = *ppr_eps;
        if (ppr_max_iter) c.ppr.max_iterations = *ppr_max_iter;
        if (n_v) c.n_v = *n_v;
        if (synonym_threshold) c.synonym_threshold = *synonym_threshold;
        if (!ks.empty()) {
            c.ks = ks;
            std::sort(c.ks.begin(), c.ks.end());
            c.ks.erase(std::unique(c.ks.begin(), c.ks.end()), c.ks.end());
        }
        if (split_mode) c.split_mode = *split_mode;
        if (tune_fraction) c.tune_fraction = *tune_fraction;
        if (threads) c.threads = *threads;
        if (seed) c.seed = *seed;
        if (c.data.passages.empty()) throw Error("no input data: pass --config or --data");
        return c;
    }
};

struct CellOptions {
    std::optional<std::string> strategy, dk, normalizer, temperature, copula_theta;
    std::optional<double> alpha, beta, epsilon, rrf_k0, power_p, tsallis_q, t0, gamma,
        quantum_theta, ising_j, ising_t, ising_blend;
    bool synonyms = false;

    void add(CLI::App* app) {
        app->add_option("--strategy", strategy, "vector_only, graph_only or a fusion strategy");
        app->add_option("--alpha", alpha, "Vector weight");
        app->add_option("--beta", beta, "Consensus boost");
        app->add_option("--dk", dk, "Graph-only candidate cap (integer or none)");
        app->add_option("--normalizer", normalizer, "pit, minmax or rawmax");
        app->add_option("--temperature", temperature, "auto or a positive value");
        app->add_option("--epsilon", epsilon, "Energy floor");
        app->add_option("--rrf-k0", rrf_k0, "RRF rank offset");
        app->add_option("--power-p", power_p, "Power-mean exponent");
        app->add_option("--tsallis-q", tsallis_q, "Tsallis entropic index");
        app->add_option("--copula-theta", copula_theta, "Gumbel copula theta: auto (Kendall tau) or >= 1");
        app->add_option("--t0", t0, "Base temperature for wasserstein_t");
        app->add_option("--gamma", gamma, "Distance gain for wasserstein_t");
        app->add_option("--quantum-theta", quantum_theta, "Interference phase");
        app->add_flag("--synonyms", synonyms, "Fuse the synonym-linked graph");
        app->add_option("--ising-j", ising_j, "Enable Ising reranking with this coupling");
        app->add_option("--ising-t", ising_t, "Ising temperature");
        app->add_option("--ising-blend", ising_blend, "Ising blend weight");
    }

    bool given() const {
        return strategy || alpha || beta || dk || normalizer || temperature || synonyms || ising_j || ising_t ||
               ising_blend;
    }

    CellSpec build(CellSpec c = {}) const {
        if (strategy) c.method = *strategy;
        if (c.method != "vector_only" && c.method != "graph_only") parse_strategy(c.method);
        if (alpha) c.alpha = *alpha;
        if (beta) c.beta = *beta;
        if (dk) {
            if (*dk == "none") {
                c.dk.reset();
            } else {
                c.dk = std::stoul(*dk);
            }
        }
        if (normalizer) c.normalizer = parse_normalizer(*normalizer);
        if (temperature) c.temperature = parse_temperature(*temperature);
        if (epsilon) c.epsilon = *epsilon;
        if (rrf_k0) c.params.rrf_k0 = *rrf_k0;
        if (power_p) c.params.power_p = *power_p;
        if (tsallis_q) c.params.tsallis_q = *tsallis_q;
        if (copula_theta) {
            if (*copula_theta == "auto") {
                c.params.copula_theta.reset();
            } else {
                c.params.copula_theta = std::stod(*copula_theta);
                if (!(*c.params.copula_theta >= 1.0)) throw Error("--copula-theta must be auto or >= 1");
            }
        }
        if (t0) c.params.t0 = *t0;
        if (gamma) c.params.gamma = *gamma;
        if (quantum_theta) c.params.quantum_theta = *quantum_theta;
        if (synonyms) c.synonyms = true;
        if (ising_j || ising_t || ising_blend) {
            IsingConfig ic = c.ising.value_or(IsingConfig{});
            if (ising_j) ic.coupling = *ising_j;
            if (ising_t) ic.temperature = *ising_t;
            if (ising_blend) ic.blend = *ising_blend;
            validate(ic);
            c.ising = ic;
        }
        return c;
    }
};

json score_list_json(const ScoreList& l, std::size_t limit) {
    json a = json::array();
    for (std::size_t i = 0; i < l.size() && i < limit; ++i) a.push_back({l.entries[i].id, l.entries[i].score});
    return a;
}

void print_report(const std::filesystem::path& dir) {
    std::ifstream in(dir / "report.json");
    if (!in) throw Error("no report.json in " + dir.string());
    const json j = json::parse(in);
    std::printf("config %s\n", j.at("config_hash").get<std::string>().c_str());
    for (const auto& r : j.at("reports")) {
        std::printf("\n[%s]\n%-60s %4s %5s %8s %8s %4s %4s %9s\n", r.at("split").get<std::string>().c_str(), "cell",
                    "K", "n", "lasthop", "fullsup", "W", "L", "p");
        for (const auto& c : r.at("cells")) {
            for (const auto& k : c.at("per_k")) {
                const auto& lh = k.at("metrics").at("lasthop");
                std::printf("%-60s %4zu %5zu %7.1f%% %7.1f%% %4zu %4zu %9.3g\n", c.at("id").get<std::string>().c_str(),
                            k.at("k").get<std::size_t>(), c.at("n").get<std::size_t>(),
                            100.0 * lh.at("rate").get<double>(),
                            100.0 * k.at("metrics").at("fullsup").at("rate").get<double>(),
                            lh.at("W").get<std::size_t>(), lh.at("L").get<std::size_t>(), lh.at("p").get<double>());
            }
        }
    }
    if (!j.at("winner").is_null()) {
        std::printf("\nwinner (%s, %s): %s\n", j.at("winner").at("selected_on").get<std::string>().c_str(),
                    j.at("winner").at("rule").get<std::string>().c_str(),
                    j.at("winner").at("id").get<std::string>().c_str());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Calibrated fusion of dense and graph retrieval"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate raw inputs and write them in canonical form");
    std::string in_passages, in_annotations, in_queries, in_pemb, in_qemb, in_eemb, ingest_out;
    ingest->add_option("--passages", in_passages)->required();
    ingest->add_option("--annotations", in_annotations);
    ingest->add_option("--queries", in_queries)->required();
    ingest->add_option("--passage-emb", in_pemb)->required();
    ingest->add_option("--query-emb", in_qemb)->required();
    ingest->add_option("--entity-emb", in_eemb);
    ingest->add_option("--out", ingest_out)->required();

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-hop corpus");
    std::string synth_config, synth_out;
    std::optional<std::uint64_t> synth_seed;
    std::optional<std::size_t> synth_queries, synth_passages;
    std::optional<double> synth_alias, synth_density;
    bool synth_print = false;
    synth->add_option("--synth-config", synth_config, "Generator configuration (JSON)");
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--seed", synth_seed);
    synth->add_option("--n-queries", synth_queries);
    synth->add_option("--n-passages", synth_passages);
    synth->add_option("--alias-rate", synth_alias);
    synth->add_option("--distractor-density", synth_density);
    synth->add_flag("--print-config", synth_print, "Print the effective configuration and exit");

    // retrieve
    auto* retrieve = app.add_subcommand("retrieve", "Run both retrievers and dump candidate lists");
    DataOptions retrieve_data;
    retrieve_data.add(retrieve);
    std::size_t retrieve_limit = 20;
    std::string retrieve_query, regime_csv;
    std::size_t regime_n = 200;
    bool retrieve_linked = false;
    retrieve->add_option("--limit", retrieve_limit, "Entries per list in the dump");
    retrieve->add_option("--query", retrieve_query, "Only this query id");
    retrieve->add_flag("--synonyms", retrieve_linked, "Also link synonyms and dump the linked graph list");
    retrieve->add_option("--regime", regime_csv, "Write score-distribution histograms to this CSV");
    retrieve->add_option("--regime-n", regime_n, "Vector candidates per query for the distribution report");

    // fuse
    auto* fuse = app.add_subcommand("fuse", "Fuse the two retrievers under one cell and dump rankings");
    DataOptions fuse_data;
    fuse_data.add(fuse);
    CellOptions fuse_cell;
    fuse_cell.add(fuse);
    std::string fuse_query;
    fuse->add_option("--query", fuse_query, "Only this query id");
    std::optional<std::size_t> fuse_k;
    fuse->add_option("--k", fuse_k, "Ranking depth (default: largest K)");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate cells against the baseline on tune/test splits");
    DataOptions eval_data;
    eval_data.add(eval);
    CellOptions eval_cell;
    eval_cell.add(eval);
    bool eval_confirm = false;
    std::optional<std::string> ising_sweep_grid;
    std::optional<std::string> eval_baseline, eval_rule, eval_metric;
    eval->add_flag("--confirm", eval_confirm, "Evaluate the test split after tune selection");
    eval->add_option("--baseline", eval_baseline, "Baseline cell id (default vector_only)");
    eval->add_option("--rule", eval_rule, "Tune selection rule: max_metric or safety");
    eval->add_option("--metric", eval_metric, "Selection metric");
    eval->add_option("--ising-sweep", ising_sweep_grid,
                     "Sweep Ising J/T/blend on top of the cell instead; optional grid file")
        ->expected(0, 1)
        ->default_str("");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Evaluate a strategy x configuration grid");
    DataOptions sweep_data;
    sweep_data.add(sweep);
    bool sweep_confirm = false;
    std::vector<std::string> sweep_methods, sweep_dks;
    std::vector<double> sweep_alphas, sweep_betas;
    std::optional<std::size_t> sweep_cap;
    std::optional<std::string> sweep_rule;
    sweep->add_flag("--confirm", sweep_confirm, "Evaluate the test split after tune selection");
    sweep->add_option("--methods", sweep_methods)->delimiter(',');
    sweep->add_option("--alphas", sweep_alphas)->delimiter(',');
    sweep->add_option("--betas", sweep_betas)->delimiter(',');
    sweep->add_option("--dks", sweep_dks, "Caps; 'none' for uncapped")->delimiter(',');
    sweep->add_option("--cell-cap", sweep_cap, "Refuse grids larger than this");
    sweep->add_option("--rule", sweep_rule, "Tune selection rule: max_metric or safety");

    // report
    auto* report = app.add_subcommand("report", "Print a saved report as a table");
    std::string report_dir;
    report->add_option("dir", report_dir, "Output directory of eval or sweep")->required();

    // stats
    auto* stats = app.add_subcommand("stats", "Standalone statistics");
    stats->require_subcommand(1);
    auto* s_mc = stats->add_subcommand("mcnemar", "Exact McNemar p-value for W wins and L losses");
    std::size_t mc_w = 0, mc_l = 0;
    s_mc->add_option("W", mc_w)->required();
    s_mc->add_option("L", mc_l)->required();
    auto* s_wilson = stats->add_subcommand("wilson", "Wilson score interval");
    std::size_t w_s = 0, w_n = 0;
    double w_z = 1.96;
    s_wilson->add_option("successes", w_s)->required();
    s_wilson->add_option("n", w_n)->required();
    s_wilson->add_option("--z", w_z);
    auto* s_odds = stats->add_subcommand("odds", "Odds ratio of two success counts out of n");
    std::size_t o_a = 0, o_b = 0, o_n = 0;
    s_odds->add_option("method", o_a)->required();
    s_odds->add_option("baseline", o_b)->required();
    s_odds->add_option("n", o_n)->required();
    auto* s_boot = stats->add_subcommand("bootstrap", "Percentile bootstrap CI of the mean");
    std::vector<double> b_values;
    std::string b_file;
    std::size_t b_resamples = 10000;
    std::uint64_t b_seed = 0;
    s_boot->add_option("values", b_values);
    s_boot->add_option("--file", b_file, "One value per line");
    s_boot->add_option("--resamples", b_resamples);
    s_boot->add_option("--seed", b_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            Corpus corpus = load_corpus(in_passages, in_annotations);
            const auto queries = load_queries(in_queries, corpus);
            const EmbeddingStore pe = load_embeddings(in_pemb);
            const EmbeddingStore qe = load_embeddings(in_qemb, pe.dimension());
            const DataPaths out = DataPaths::in_directory(ingest_out);
            std::filesystem::create_directories(ingest_out);
            write_passages(out.passages, corpus);
            write_annotations(out.annotations, corpus);
            write_queries(out.queries, queries);
            write_embeddings_binary(out.passage_embeddings, pe);
            write_embeddings_binary(out.query_embeddings, qe);
            if (!in_eemb.empty()) write_embeddings_binary(out.entity_embeddings, load_embeddings(in_eemb));
            std::printf("%zu passages, %zu queries, %zu passage vectors (dim %zu), %zu query vectors\n", corpus.size(),
                        queries.size(), pe.size(), pe.dimension(), qe.size());
        } else if (*synth) {
            SynthConfig c = synth_config.empty() ? SynthConfig{} : load_synth_config(synth_config);
            if (synth_seed) c.seed = *synth_seed;
            if (synth_queries) c.n_queries = *synth_queries;
            if (synth_passages) c.n_passages = *synth_passages;
            if (synth_alias) c.alias_rate = *synth_alias;
            if (synth_density) c.distractor_density = *synth_density;
            validate(c);
            if (synth_print) {
                std::printf("%s\n", synth_config_json(c).c_str());
                return 0;
            }
            if (synth_out.empty()) throw Error("synth needs --out");
            const SynthData data = generate(c);
            write_synth(synth_out, data);
            write_atomic(std::filesystem::path(synth_out) / "synth_config.json", synth_config_json(c) + "\n");
            std::printf("%zu passages, %zu queries, %zu entities -> %s\n", data.corpus.size(), data.queries.size(),
                        data.entity_embeddings.size(), synth_out.c_str());
        } else if (*retrieve) {
            const RunConfig c = retrieve_data.build();
            Workspace ws(load_dataset(c.data), c, retrieve_linked);
            const auto& pools = ws.pools();
            std::ostringstream out;
            for (std::size_t i = 0; i < pools.size(); ++i) {
                const Query& q = ws.data().queries[i];
                if (!retrieve_query.empty() && q.id != retrieve_query) continue;
                json j = {{"query", q.id}, {"graph_pool", pools[i].graph.size()}, {"no_seed", pools[i].no_seed}};
                if (pools[i].failure) j["failure"] = *pools[i].failure;
                j["vector"] = score_list_json(pools[i].vector, retrieve_limit);
                j["graph"] = score_list_json(pools[i].graph, retrieve_limit);
                if (retrieve_linked) {
                    j["graph_linked_pool"] = pools[i].graph_linked.size();
                    j["graph_linked"] = score_list_json(pools[i].graph_linked, retrieve_limit);
                }
                out << j.dump() << "\n";
            }
            if (retrieve_data.out.empty()) {
                std::cout << out.str();
            } else {
                write_atomic(std::filesystem::path(retrieve_data.out) / "retrieval.jsonl", out.str());
            }
            if (!regime_csv.empty()) {
                std::vector<ScoreList> v, g;
                for (std::size_t i = 0; i < ws.data().queries.size(); ++i) {
                    QueryPools p = ws.retrieve(i, regime_n);
                    v.push_back(std::move(p.vector));
                    g.push_back(std::move(p.graph));
                }
                const RegimeReport r = regime_report(v, g);
                std::ostringstream csv;
                write_regime_csv(csv, r);
                write_atomic(regime_csv, csv.str());
                std::fprintf(stderr, "KS(vector pit)=%.4f over %zu lists, KS(graph pit)=%.4f over %zu lists, "
                             "graph min-max lowest decile=%.3f\n",
                             r.ks_vector_pit, r.vector_lists_used, r.ks_graph_pit, r.graph_lists_used,
                             r.graph_minmax_lowest_decile);
            }
        } else if (*fuse) {
            const RunConfig c = fuse_data.build();
            const CellSpec cell = fuse_cell.build();
            Workspace ws(load_dataset(c.data), c, cell.synonyms);
            ws.pools();
            std::ostringstream out;
            for (std::size_t i = 0; i < ws.data().queries.size(); ++i) {
                const Query& q = ws.data().queries[i];
                if (!fuse_query.empty() && q.id != fuse_query) continue;
                json j = {{"query", q.id}, {"cell", cell.id()}};
                try {
                    const FusedRanking r = ws.rank(i, cell, fuse_k.value_or(ws.max_k()));
                    json entries = json::array();
                    for (const auto& e : r.entries) {
                        entries.push_back({{"id", e.id}, {"score", e.score}, {"consensus", e.consensus}});
                    }
                    j["ranking"] = entries;
                    j["downgraded"] = r.downgraded;
                } catch (const Error& e) {
                    j["failure"] = e.what();
                }
                out << j.dump() << "\n";
            }
            if (fuse_data.out.empty()) {
                std::cout << out.str();
            } else {
                write_atomic(std::filesystem::path(fuse_data.out) / "fused.jsonl", out.str());
            }
        } else if (*eval) {
            RunConfig c = eval_data.build();
            if (eval_cell.given()) c.cells = {eval_cell.build()};
            if (eval_confirm) c.confirm = true;
            if (eval_baseline) c.baseline = *eval_baseline;
            if (eval_rule) c.selection_rule = parse_selection_rule(*eval_rule);
            if (eval_metric) c.selection_metric = parse_metric(*eval_metric);
            if (ising_sweep_grid) {
                if (c.cells.empty()) throw Error("--ising-sweep needs a cell");
                const bool linked = c.cells.front().synonyms;
                Workspace ws(load_dataset(c.data), c, linked);
                const auto splits = split_indices(c, ws.data().queries);
                const std::string split = c.split_mode == "all" ? "all" : "tune";
                IsingGrid grid;
                if (!ising_sweep_grid->empty()) {
                    std::ifstream in(*ising_sweep_grid);
                    if (!in) throw Error("cannot read " + *ising_sweep_grid);
                    grid = parse_ising_grid(std::string(std::istreambuf_iterator<char>(in), {}));
                }
                const auto cells = run_ising_sweep(ws, splits.at(split), c.cells.front(), grid, c.ks.front());
                std::ostringstream csv;
                write_ising_sweep_csv(csv, cells);
                write_atomic(c.output_dir / "ising_sweep.csv", csv.str());
                std::cout << csv.str();
                return 0;
            }
            const EvalResult r = run_eval(c, &std::cerr);
            print_report(c.output_dir);
            (void)r;
        } else if (*sweep) {
            RunConfig c = sweep_data.build();
            if (!c.grid) c.grid = GridSpec{};
            if (!sweep_methods.empty()) c.grid->methods = sweep_methods;
            if (!sweep_alphas.empty()) c.grid->alphas = sweep_alphas;
            if (!sweep_betas.empty()) c.grid->betas = sweep_betas;
            if (!sweep_dks.empty()) {
                c.grid->dks.clear();
                for (const auto& d : sweep_dks) {
                    c.grid->dks.push_back(d == "none" ? std::nullopt : std::optional<std::size_t>(std::stoul(d)));
                }
            }
            if (sweep_cap) c.cell_cap = *sweep_cap;
            if (sweep_rule) c.selection_rule = parse_selection_rule(*sweep_rule);
            if (sweep_confirm) c.confirm = true;
            run_eval(c, &std::cerr);
            std::ifstream summary(c.output_dir / "sweep_summary.csv");
            std::cout << summary.rdbuf();
        } else if (*report) {
            print_report(report_dir);
        } else if (*s_mc) {
            std::printf("W=%zu L=%zu p=%.6g\n", mc_w, mc_l, mcnemar_exact(mc_w, mc_l));
        } else if (*s_wilson) {
            const Interval ci = wilson_ci(w_s, w_n, w_z);
            std::printf("%zu/%zu = %.2f%% [%.2f%%, %.2f%%]\n", w_s, w_n, 100.0 * w_s / w_n, 100.0 * ci.low,
                        100.0 * ci.high);
        } else if (*s_odds) {
            const OddsRatio o = odds_ratio(o_a, o_b, o_n);
            std::printf("odds ratio %.4f%s\n", o.value, o.corrected ? " (0.5 correction applied)" : "");
        } else if (*s_boot) {
            if (!b_file.empty()) {
                std::ifstream in(b_file);
                if (!in) throw Error("cannot open " + b_file);
                double x;
                while (in >> x) b_values.push_back(x);
            }
            const Interval ci = bootstrap_ci(b_values, b_resamples, b_seed);
            std::printf("mean CI [%.6g, %.6g] (%zu resamples, seed %llu)\n", ci.low, ci.high, b_resamples,
                        static_cast<unsigned long long>(b_seed));
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
