#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace calfuse {

// Retrieval metrics. All take the ranked ids and the gold chain in hop
// order; K >= 1 and a non-empty chain are required.

/// The last element of the gold chain is among the first K retrieved.
bool lasthop_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
                  std::size_t k);
/// Every gold passage is among the first K.
bool fullsup_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
                  std::size_t k);
/// At least one gold passage is among the first K.
bool any_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
              std::size_t k);
/// Same predicate as fullsup_at_k; kept separately for report parity.
bool full_at_k(std::span<const std::string> retrieved, std::span<const std::string> gold_chain,
               std::size_t k);

enum class Metric { lasthop, fullsup, any, full };

std::string_view to_string(Metric m);
Metric parse_metric(std::string_view text);
std::span<const Metric> all_metrics();

struct MetricHits {
    bool lasthop = false;
    bool fullsup = false;
    bool any = false;
    bool full = false;

    bool get(Metric m) const;
};

struct QueryOutcome {
    std::string query_id;
    std::vector<std::string> retrieved;
    std::map<std::size_t, MetricHits> at_k;

    bool hit(Metric m, std::size_t k) const;
};

QueryOutcome make_outcome(std::string query_id, std::vector<std::string> retrieved,
                          std::span<const std::string> gold_chain, std::span<const std::size_t> ks);

/// Paired 2x2 tally of method vs baseline on one metric.
struct PairedComparison {
    std::size_t wins = 0;     ///< method hit, baseline miss
    std::size_t losses = 0;   ///< baseline hit, method miss
    std::size_t both = 0;
    std::size_t neither = 0;

    std::size_t total() const { return wins + losses + both + neither; }
    friend bool operator==(const PairedComparison&, const PairedComparison&) = default;
};

/// Pairs by query id; throws unless both runs cover exactly the same queries.
PairedComparison pair_outcomes(std::span<const QueryOutcome> baseline,
                               std::span<const QueryOutcome> method, Metric metric, std::size_t k);

}  // namespace calfuse
