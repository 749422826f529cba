#include "calfuse/metrics.hpp"

#include "calfuse/error.hpp"

#include <algorithm>
#include <array>
#include <unordered_map>

namespace calfuse {

namespace {

void check(std::span<const std::string> gold_chain, std::size_t k) {
    if (gold_chain.empty()) throw Error("gold chain is empty");
    if (k < 1) throw Error("K must be at least 1");
}

bool in_top(std::span<const std::string> retrieved, const std::string& id, std::size_t k) {
    const auto top = retrieved.first(std::min(k, retrieved.size()));
    return std::find(top.begin(), top.end(), id) != top.end();
}

constexpr std::array kMetrics{Metric::lasthop, Metric::fullsup, Metric::any, Metric::full};

}  // namespace

bool lasthop_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
                  std::size_t k) {
    check(gold_chain, k);
    return in_top(retrieved, gold_chain.back(), k);
}

bool fullsup_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
                  std::size_t k) {
    check(gold_chain, k);
    return std::all_of(gold_chain.begin(), gold_chain.end(),
                       [&](const std::string& g) { return in_top(retrieved, g, k); });
}

bool any_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
              std::size_t k) {
    check(gold_chain, k);
    return std::any_of(gold_chain.begin(), gold_chain.end(),
                       [&](const std::string& g) { return in_top(retrieved, g, k); });
}

bool full_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
               std::size_t k) {
    return fullsup_at_k(retrieved, gold_chain, k);
}

std::string_view to_string(Metric m) {
    switch (m) {
        case Metric::lasthop: return "lasthop";
        case Metric::fullsup: return "fullsup";
        case Metric::any: return "any";
        case Metric::full: return "full";
    }
    return "lasthop";
}

Metric parse_metric(std::string_view text) {
    for (Metric m : kMetrics) {
        if (to_string(m) == text) return m;
    }
    throw Error("unknown metric \"" + std::string(text) + "\"");
}

std::span<const Metric> all_metrics() { return kMetrics; }

bool MetricHits::get(Metric m) const {
    switch (m) {
        case Metric::lasthop: return lasthop;
        case Metric::fullsup: return fullsup;
        case Metric::any: return any;
        case Metric::full: return full;
    }
    return false;
}

bool QueryOutcome::hit(Metric m, std::size_t k) const {
    auto it = at_k.find(k);
    if (it == at_k.end()) throw Error("outcome for \"" + query_id + "\" has no K=" + std::to_string(k));
    return it->second.get(m);
}

QueryOutcome make_outcome(std::string query_id, std::vector<std::string> retrieved,
                          std::span<const std::string> gold_chain, std::span<const std::size_t> ks) {
    QueryOutcome o;
    o.query_id = std::move(query_id);
    o.retrieved = std::move(retrieved);
    for (std::size_t k : ks) {
        o.at_k[k] = {lasthop_at_k(o.retrieved, gold_chain, k), fullsup_at_k(o.retrieved, gold_chain, k),
                     any_at_k(o.retrieved, gold_chain, k), full_at_k(o.retrieved, gold_chain, k)};
    }
    return o;
}

PairedComparison pair_outcomes(std::span<const QueryOutcome> baseline,
                               std::span<const QueryOutcome> method, Metric metric, std::size_t k) {
    std::unordered_map<std::string, const QueryOutcome*> base;
    for (const auto& o : baseline) {
        if (!base.emplace(o.query_id, &o).second) throw Error("duplicate query \"" + o.query_id + "\" in baseline");
    }
    if (base.size() != method.size()) {
        throw Error("paired runs cover different query sets (" + std::to_string(base.size()) + " vs " +
                    std::to_string(method.size()) + ")");
    }
    PairedComparison pc;
    for (const auto& o : method) {
        auto it = base.find(o.query_id);
        if (it == base.end()) throw Error("query \"" + o.query_id + "\" missing from baseline run");
        const bool m = o.hit(metric, k);
        const bool b = it->second->hit(metric, k);
        if (m && b) {
            ++pc.both;
        } else if (m) {
            ++pc.wins;
        } else if (b) {
            ++pc.losses;
        } else {
            ++pc.neither;
        }
    }
    if (pc.total() != base.size()) throw Error("duplicate query in method run");
    return pc;
}

}  // namespace calfuse
