#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenrank/binary_io.hpp"
#include "tokenrank/engine.hpp"
#include "tokenrank/manifest.hpp"

namespace tokenrank {

/// Per-query measurements. Ranks are 1-based; 0 means no relevant item
/// was retrieved.
struct QueryMetrics {
  std::string query_id;
  double ap = 0.0;
  std::size_t first_relevant_rank = 0;
  std::size_t relevant_count = 0;

  friend bool operator==(const QueryMetrics&, const QueryMetrics&) = default;
};

/// AP with |R(q)| as divisor: relevants missing from the run contribute 0.
/// Throws kProtocol when the query is unknown or has no relevant gallery
/// image.
double average_precision(const RunRanking& run, const RelevanceManifest& manifest);

QueryMetrics measure_query(const RunRanking& run, const RelevanceManifest& manifest);

/// Fraction of queries with at least one relevant image in the top k.
double recall_at_k(std::span<const RunRanking> runs, const RelevanceManifest& manifest,
                   std::size_t k);

double mean_average_precision(std::span<const RunRanking> runs, const RelevanceManifest& manifest);

/// Shortlist recall over the first S items of each run. `fraction` is the
/// mean over queries of |R(q) & top-S| / |R(q)|; `hit_rate` the share of
/// queries with at least one relevant item in the top S.
struct ShortlistRecall {
  double fraction = 0.0;
  double hit_rate = 0.0;

  friend bool operator==(const ShortlistRecall&, const ShortlistRecall&) = default;
};

ShortlistRecall shortlist_recall(std::span<const RunRanking> shortlists,
                                 const RelevanceManifest& manifest, std::size_t s);

struct ReportConfig {
  std::vector<std::size_t> recall_ks{1, 5, 10};
  std::optional<std::size_t> shortlist;  // computes R@S when set
  Json echo = Json::object();            // pooling, K, S, codec, ...
  std::string label = "run";
};

struct MetricsReport {
  std::string label;
  std::size_t queries = 0;
  double map = 0.0;
  std::map<std::size_t, double> recall_at;
  std::optional<std::pair<std::size_t, ShortlistRecall>> shortlist_recall;
  std::vector<QueryMetrics> per_query;  // run order
  Json config = Json::object();

  Json to_json() const;
  static MetricsReport from_json(const Json& j);
  /// Aligned table: label, S, R@S, R@k..., mAP.
  std::string to_text() const;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Throws kProtocol on an empty run set, duplicate queries, or items
/// outside the manifest gallery (runs over a different gallery).
MetricsReport emit_report(std::span<const RunRanking> runs, const RelevanceManifest& manifest,
                          const ReportConfig& config, unsigned threads = 1);

}  // namespace tokenrank
