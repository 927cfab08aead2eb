#include "tokenrank/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <functional>
#include <unordered_map>

namespace tokenrank {

std::vector<InstanceTokenSet> aggregate_all(std::span<const TokenSet> sets,
                                            const AggregationConfig& cfg, unsigned threads,
                                            std::uint64_t* similarity_evaluations) {
  std::vector<InstanceTokenSet> out(sets.size());
  std::vector<std::uint64_t> evals(sets.size(), 0);
  parallel_for(sets.size(), threads, [&](std::size_t i) {
    try {
      out[i] = build_instance_tokens(sets[i], cfg, &evals[i]);
    } catch (const Error& e) {
      fail(e.kind(), "record " + std::to_string(i) + " ('" + sets[i].image_id + "'): " + e.what());
    }
  });
  if (similarity_evaluations != nullptr) {
    std::uint64_t total = 0;
    for (auto e : evals) total += e;
    *similarity_evaluations = total;
  }
  return out;
}

std::vector<GlobalDescriptor> pool_all(std::span<const TokenSet> sets, const PoolOptions& opts,
                                       unsigned threads) {
  std::vector<GlobalDescriptor> out(sets.size());
  parallel_for(sets.size(), threads, [&](std::size_t i) {
    try {
      out[i] = pool(sets[i], opts);
    } catch (const Error& e) {
      fail(e.kind(), "record " + std::to_string(i) + " ('" + sets[i].image_id + "'): " + e.what());
    }
  });
  return out;
}

namespace {

constexpr std::size_t kQueryBatch = 32;

// Stage-1 shortlists for batches of queries; `fn(i, hits, ms)` receives each
// query's hits and its share of the batch's search time.
void for_each_query_batch(const FlatIndex& index, const std::vector<const GlobalDescriptor*>& qd,
                          std::size_t s,
                          unsigned threads,
                          const std::function<void(std::size_t, std::vector<Hit>, double)>& fn) {
  require(s >= 1, ErrorKind::kValidation, "shortlist size must be >= 1");
  const std::size_t batches = (qd.size() + kQueryBatch - 1) / kQueryBatch;
  parallel_for(batches, threads, [&](std::size_t b) {
    const std::size_t lo = b * kQueryBatch, hi = std::min(qd.size(), lo + kQueryBatch);
    Matrix queries(0, index.dim());
    for (std::size_t i = lo; i < hi; ++i) {
      require(qd[i]->vector.size() == index.dim(), ErrorKind::kValidation,
              "query '" + qd[i]->image_id + "' has dim " + std::to_string(qd[i]->vector.size()) +
                  ", index has " + std::to_string(index.dim()));
      queries.append_row(qd[i]->vector);
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto hits = search_flat_batch(index, queries, s);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
        static_cast<double>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) fn(i, std::move(hits[i - lo]), ms);
  });
}

}  // namespace

std::string_view to_string(SearchMode m) {
  switch (m) {
    case SearchMode::kTwoStage: return "two-stage";
    case SearchMode::kStage1: return "stage1";
    case SearchMode::kExhaustive: return "exhaustive";
  }
  return "?";
}

SearchMode parse_search_mode(std::string_view s) {
  if (s == "two-stage") return SearchMode::kTwoStage;
  if (s == "stage1") return SearchMode::kStage1;
  if (s == "exhaustive") return SearchMode::kExhaustive;
  fail(ErrorKind::kValidation, "unknown search mode '" + std::string(s) +
                                   "' (expected two-stage|stage1|exhaustive)");
}

std::vector<RunRanking> run_queries(const TwoStageSearcher& searcher,
                                    const std::vector<std::string>& query_ids,
                                    std::span<const GlobalDescriptor> query_descriptors,
                                    std::span<const InstanceTokenSet> query_tokens,
                                    std::size_t s, SearchMode mode, unsigned threads) {
  std::unordered_map<std::string, const GlobalDescriptor*> desc;
  for (const auto& d : query_descriptors) desc.emplace(d.image_id, &d);
  std::unordered_map<std::string, const InstanceTokenSet*> toks;
  for (const auto& t : query_tokens) toks.emplace(t.image_id, &t);

  std::vector<const GlobalDescriptor*> qd(query_ids.size());
  std::vector<const InstanceTokenSet*> qt(query_ids.size(), nullptr);
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    const auto d = desc.find(query_ids[i]);
    require(d != desc.end(), ErrorKind::kProtocol,
            "no query descriptor for '" + query_ids[i] + "'");
    qd[i] = d->second;
    if (mode != SearchMode::kStage1) {
      const auto t = toks.find(query_ids[i]);
      require(t != toks.end(), ErrorKind::kProtocol,
              "no query instance tokens for '" + query_ids[i] + "'");
      qt[i] = t->second;
    }
  }

  std::vector<RunRanking> runs(query_ids.size());
  if (mode == SearchMode::kExhaustive) {
    parallel_for(query_ids.size(), threads, [&](std::size_t i) {
      runs[i] = searcher.exhaustive(qd[i]->vector, qt[i]->tokens);
      runs[i].query_id = query_ids[i];
    });
    return runs;
  }
  const FlatIndex& index = searcher.index();
  for_each_query_batch(index, qd, s, threads, [&](std::size_t i, std::vector<Hit> hits, double ms) {
    runs[i] = mode == SearchMode::kStage1 ? stage1_ranking(index, hits)
                                          : searcher.rescore(std::move(hits), qt[i]->tokens);
    runs[i].stage1_ms = ms;
    runs[i].query_id = query_ids[i];
  });
  return runs;
}

std::vector<RunRanking> run_stage1_queries(const FlatIndex& index,
                                           const std::vector<std::string>& query_ids,
                                           std::span<const GlobalDescriptor> query_descriptors,
                                           std::size_t s, unsigned threads) {
  std::unordered_map<std::string, const GlobalDescriptor*> desc;
  for (const auto& d : query_descriptors) desc.emplace(d.image_id, &d);
  std::vector<const GlobalDescriptor*> qd(query_ids.size());
  for (std::size_t i = 0; i < query_ids.size(); ++i) {
    const auto d = desc.find(query_ids[i]);
    require(d != desc.end(), ErrorKind::kProtocol,
            "no query descriptor for '" + query_ids[i] + "'");
    qd[i] = d->second;
  }
  std::vector<RunRanking> runs(query_ids.size());
  for_each_query_batch(index, qd, s, threads, [&](std::size_t i, std::vector<Hit> hits, double ms) {
    runs[i] = stage1_ranking(index, hits);
    runs[i].stage1_ms = ms;
    runs[i].query_id = query_ids[i];
  });
  return runs;
}

Json timing_summary(std::span<const RunRanking> runs, std::size_t s, std::size_t k) {
  double s1 = 0.0, s2 = 0.0;
  for (const auto& r : runs) {
    s1 += r.stage1_ms;
    s2 += r.stage2_ms;
  }
  const double n = runs.empty() ? 1.0 : static_cast<double>(runs.size());
  Json j;
  j["stage1_ms_mean"] = s1 / n;
  j["stage2_ms_mean"] = s2 / n;
  j["total_ms_mean"] = (s1 + s2) / n;
  j["S"] = s;
  j["K"] = k;
  return j;
}

}  // namespace tokenrank
