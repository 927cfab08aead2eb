#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenrank/aggregation.hpp"
#include "tokenrank/binary_io.hpp"
#include "tokenrank/engine.hpp"
#include "tokenrank/manifest.hpp"
#include "tokenrank/pooling.hpp"

namespace tokenrank {

// Batch helpers shared by the command-line driver and the benchmarks. Each
// runs a pure per-image (or per-query) function over worker threads and
// returns results in input order.

std::vector<InstanceTokenSet> aggregate_all(std::span<const TokenSet> sets,
                                            const AggregationConfig& cfg, unsigned threads,
                                            std::uint64_t* similarity_evaluations = nullptr);

std::vector<GlobalDescriptor> pool_all(std::span<const TokenSet> sets, const PoolOptions& opts,
                                       unsigned threads);

/// Keeps the items whose id has the given role in the manifest, in input
/// order. Throws kProtocol for ids the manifest does not know.
template <typename T>
std::vector<T> select_role(std::vector<T> items, const RelevanceManifest& manifest, Role role) {
  std::vector<T> out;
  for (auto& it : items) {
    const auto* e = manifest.find(it.image_id);
    require(e != nullptr, ErrorKind::kProtocol, "'" + it.image_id + "' is not in the manifest");
    if (e->role == role) out.push_back(std::move(it));
  }
  return out;
}

enum class SearchMode { kTwoStage, kStage1, kExhaustive };

std::string_view to_string(SearchMode m);
SearchMode parse_search_mode(std::string_view s);

/// Runs every query of `query_ids` through the searcher. Query descriptors
/// and tokens are looked up by id; a missing one is a kProtocol error.
std::vector<RunRanking> run_queries(const TwoStageSearcher& searcher,
                                    const std::vector<std::string>& query_ids,
                                    std::span<const GlobalDescriptor> query_descriptors,
                                    std::span<const InstanceTokenSet> query_tokens,
                                    std::size_t s, SearchMode mode, unsigned threads);

/// Stage-1 rankings only, without a multi-vector store.
std::vector<RunRanking> run_stage1_queries(const FlatIndex& index,
                                           const std::vector<std::string>& query_ids,
                                           std::span<const GlobalDescriptor> query_descriptors,
                                           std::size_t s, unsigned threads);

/// {stage1_ms_mean, stage2_ms_mean, total_ms_mean, S, K}.
Json timing_summary(std::span<const RunRanking> runs, std::size_t s, std::size_t k);

}  // namespace tokenrank
