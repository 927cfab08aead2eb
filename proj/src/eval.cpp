#include "tokenrank/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <unordered_set>

namespace tokenrank {

namespace {

struct Tally {
  QueryMetrics m;
  std::vector<std::size_t> relevant_ranks;  // ascending, 1-based
};

Tally tally(const RunRanking& run, const RelevanceManifest& manifest) {
  const auto rel = manifest.relevant_set(run.query_id);
  require(!rel.empty(), ErrorKind::kProtocol,
          "query '" + run.query_id + "' has no relevant gallery image");
  const std::unordered_set<std::string> rel_set(rel.begin(), rel.end());
  Tally t;
  t.m.query_id = run.query_id;
  t.m.relevant_count = rel.size();
  double sum = 0.0;
  for (std::size_t r = 0; r < run.items.size(); ++r) {
    if (!rel_set.contains(run.items[r].image_id)) continue;
    t.relevant_ranks.push_back(r + 1);
    sum += static_cast<double>(t.relevant_ranks.size()) / static_cast<double>(r + 1);
  }
  t.m.ap = sum / static_cast<double>(rel.size());
  t.m.first_relevant_rank = t.relevant_ranks.empty() ? 0 : t.relevant_ranks.front();
  return t;
}

void require_runs(std::span<const RunRanking> runs) {
  require(!runs.empty(), ErrorKind::kProtocol, "no queries to evaluate");
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

QueryMetrics measure_query(const RunRanking& run, const RelevanceManifest& manifest) {
  return tally(run, manifest).m;
}

double average_precision(const RunRanking& run, const RelevanceManifest& manifest) {
  return tally(run, manifest).m.ap;
}

double recall_at_k(std::span<const RunRanking> runs, const RelevanceManifest& manifest,
                   std::size_t k) {
  require_runs(runs);
  std::size_t hits = 0;
  for (const auto& run : runs) {
    const auto m = measure_query(run, manifest);
    if (m.first_relevant_rank != 0 && m.first_relevant_rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(runs.size());
}

double mean_average_precision(std::span<const RunRanking> runs, const RelevanceManifest& manifest) {
  require_runs(runs);
  double sum = 0.0;
  for (const auto& run : runs) sum += average_precision(run, manifest);
  return sum / static_cast<double>(runs.size());
}

ShortlistRecall shortlist_recall(std::span<const RunRanking> shortlists,
                                 const RelevanceManifest& manifest, std::size_t s) {
  require_runs(shortlists);
  double frac = 0.0;
  std::size_t hits = 0;
  for (const auto& run : shortlists) {
    const auto t = tally(run, manifest);
    const auto inside = static_cast<std::size_t>(
        std::upper_bound(t.relevant_ranks.begin(), t.relevant_ranks.end(), s) -
        t.relevant_ranks.begin());
    frac += static_cast<double>(inside) / static_cast<double>(t.m.relevant_count);
    if (inside > 0) ++hits;
  }
  const auto n = static_cast<double>(shortlists.size());
  return {frac / n, static_cast<double>(hits) / n};
}

MetricsReport emit_report(std::span<const RunRanking> runs, const RelevanceManifest& manifest,
                          const ReportConfig& config, unsigned threads) {
  require_runs(runs);
  std::unordered_set<std::string> seen;
  for (const auto& run : runs) {
    require(seen.insert(run.query_id).second, ErrorKind::kProtocol,
            "query '" + run.query_id + "' appears in more than one run");
    std::unordered_set<std::string> items;
    for (const auto& it : run.items) {
      require(manifest.is_gallery(it.image_id), ErrorKind::kProtocol,
              "run for '" + run.query_id + "' retrieves '" + it.image_id +
                  "', which is not in the manifest gallery");
      require(items.insert(it.image_id).second, ErrorKind::kProtocol,
              "run for '" + run.query_id + "' lists '" + it.image_id + "' twice");
    }
  }

  std::vector<Tally> tallies(runs.size());
  parallel_for(runs.size(), threads, [&](std::size_t i) { tallies[i] = tally(runs[i], manifest); });

  MetricsReport rep;
  rep.label = config.label;
  rep.queries = runs.size();
  rep.config = config.echo;
  const auto n = static_cast<double>(runs.size());
  double ap_sum = 0.0;
  for (const auto& t : tallies) {
    ap_sum += t.m.ap;
    rep.per_query.push_back(t.m);
  }
  rep.map = ap_sum / n;
  for (const auto k : config.recall_ks) {
    require(k >= 1, ErrorKind::kValidation, "recall cutoff must be >= 1");
    std::size_t hits = 0;
    for (const auto& t : tallies) {
      if (t.m.first_relevant_rank != 0 && t.m.first_relevant_rank <= k) ++hits;
    }
    rep.recall_at[k] = static_cast<double>(hits) / n;
  }
  if (config.shortlist) {
    rep.shortlist_recall.emplace(*config.shortlist, shortlist_recall(runs, manifest, *config.shortlist));
  }
  return rep;
}

Json MetricsReport::to_json() const {
  Json j;
  j["label"] = label;
  j["queries"] = queries;
  j["mAP"] = map;
  Json rec = Json::object();
  for (const auto& [k, v] : recall_at) rec[std::to_string(k)] = v;
  j["recall_at"] = rec;
  if (shortlist_recall) {
    const auto& [s, sr] = *shortlist_recall;
    j["shortlist_recall"] = {{"S", s}, {"fraction", sr.fraction}, {"hit_rate", sr.hit_rate}};
  } else {
    j["shortlist_recall"] = nullptr;
  }
  j["config"] = config;
  Json pq = Json::array();
  for (const auto& q : per_query) {
    pq.push_back({{"query_id", q.query_id},
                  {"ap", q.ap},
                  {"first_relevant_rank", q.first_relevant_rank},
                  {"relevant", q.relevant_count}});
  }
  j["per_query"] = pq;
  return j;
}

MetricsReport MetricsReport::from_json(const Json& j) {
  MetricsReport r;
  try {
    r.label = j.at("label").get<std::string>();
    r.queries = j.at("queries").get<std::size_t>();
    r.map = j.at("mAP").get<double>();
    for (const auto& [k, v] : j.at("recall_at").items()) {
      r.recall_at[std::stoul(k)] = v.get<double>();
    }
    const auto& sr = j.at("shortlist_recall");
    if (!sr.is_null()) {
      r.shortlist_recall.emplace(sr.at("S").get<std::size_t>(),
                                 ShortlistRecall{sr.at("fraction").get<double>(),
                                                 sr.at("hit_rate").get<double>()});
    }
    r.config = j.at("config");
    for (const auto& q : j.at("per_query")) {
      r.per_query.push_back({q.at("query_id").get<std::string>(), q.at("ap").get<double>(),
                             q.at("first_relevant_rank").get<std::size_t>(),
                             q.at("relevant").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed metrics report: ") + e.what());
  } catch (const std::logic_error& e) {
    fail(ErrorKind::kFormat, std::string("malformed metrics report: ") + e.what());
  }
  require(r.per_query.size() == r.queries, ErrorKind::kFormat,
          "metrics report query count does not match its per-query table");
  return r;
}

std::string MetricsReport::to_text() const {
  std::vector<std::string> head{"Method", "S", "R@S"};
  std::vector<std::string> row{label};
  if (shortlist_recall) {
    row.push_back(std::to_string(shortlist_recall->first));
    row.push_back(fixed3(shortlist_recall->second.fraction));
  } else {
    row.push_back("-");
    row.push_back("-");
  }
  for (const auto& [k, v] : recall_at) {
    head.push_back("R@" + std::to_string(k));
    row.push_back(fixed3(v));
  }
  head.push_back("mAP");
  row.push_back(fixed3(map));

  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::size_t w = std::max(head[c].size(), row[c].size());
      if (c > 0) out << "  ";
      if (c == 0) {
        out << cells[c] << std::string(w - cells[c].size(), ' ');
      } else {
        out << std::string(w - cells[c].size(), ' ') << cells[c];
      }
    }
    out << '\n';
  };
  emit(head);
  emit(row);
  if (shortlist_recall) {
    out << "shortlist hit-rate @" << shortlist_recall->first << ": "
        << fixed3(shortlist_recall->second.hit_rate) << '\n';
  }
  out << "queries: " << queries << '\n';
  return out.str();
}

}  // namespace tokenrank
