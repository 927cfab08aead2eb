// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "tokenrank/aggregation.hpp"
#include "tokenrank/binary_io.hpp"
#include "tokenrank/cli.hpp"
#include "tokenrank/engine.hpp"
#include "tokenrank/eval.hpp"
#include "tokenrank/multivector_store.hpp"
#include "tokenrank/pipeline.hpp"
#include "tokenrank/pooling.hpp"
#include "tokenrank/synth.hpp"

using namespace tokenrank;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s  %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Runs a criterion body; an escaping exception is a failure.
void criterion(const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

void li_oracle() {
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int pair = 0; pair < 1000; ++pair) {
    const std::size_t d = 1 + rng.uniform_index(64);
    const auto q = testing::random_unit_rows(1 + rng.uniform_index(64), d, rng);
    const auto g = testing::random_unit_rows(1 + rng.uniform_index(64), d, rng);
    worst = std::max(worst, std::abs(double(late_interaction_score(q, g)) - testing::maxsim_oracle(q, g)));
  }
  const double secs = seconds_since(t0);
  report("late-interaction oracle", worst <= 1e-6 && secs < 5.0,
         fmt("1000 pairs, max |err| %.2e (<= 1e-6), %.2f s (< 5 s)", worst, secs));
}

// ---------------------------------------------------------------------------

RunRanking as_run(const std::string& q, const std::vector<std::string>& ids) {
  RunRanking r;
  r.query_id = q;
  float s = 1.0f;
  for (const auto& id : ids) r.items.push_back({id, s -= 1e-4f, Stage::kLi});
  return r;
}

void metrics_oracle() {
  // Worked cases.
  RelevanceManifest w;
  w.add({"g1", Role::kGallery, {"C1"}, {}, {}});
  w.add({"g2", Role::kGallery, {"C1"}, {}, {}});
  w.add({"x1", Role::kGallery, {"D1"}, {}, {}});
  w.add({"x2", Role::kGallery, {"D2"}, {}, {}});
  w.add({"q1", Role::kQuery, {"C1"}, {}, {}});
  const double ap13 = average_precision(as_run("q1", {"g1", "x1", "g2"}), w);
  const double ap2 = average_precision(as_run("q1", {"x1", "g1", "x2"}), w);
  const bool worked = std::abs(ap13 - 5.0 / 6.0) < 1e-12 && std::abs(ap2 - 0.25) < 1e-12;

  Rng rng(2002);
  double worst = 0.0;
  std::size_t multi = 0, queries = 0;
  for (int trial = 0; trial < 200; ++trial) {
    RelevanceManifest m;
    testing::Qrels qrels;
    const std::size_t craters = 2 + rng.uniform_index(20);
    const std::size_t ng = craters + rng.uniform_index(80);
    std::vector<std::string> gallery;
    std::map<std::string, std::string> crater_of;
    for (std::size_t g = 0; g < ng; ++g) {
      const std::string id = "g" + std::to_string(g);
      const std::string c = "C" + std::to_string(g < craters ? g : rng.uniform_index(craters));
      m.add({id, Role::kGallery, {c}, {}, {}});
      gallery.push_back(id);
      crater_of[id] = c;
    }
    std::vector<RunRanking> runs;
    testing::Runs oruns;
    const std::size_t nq = 1 + rng.uniform_index(15);
    for (std::size_t q = 0; q < nq; ++q) {
      const std::string qid = "q" + std::to_string(q);
      std::set<std::string> cs{"C" + std::to_string(rng.uniform_index(craters))};
      if (rng.uniform01() < 0.3) {
        const std::size_t extra = 1 + rng.uniform_index(9);
        for (std::size_t e = 0; e < extra; ++e) cs.insert("C" + std::to_string(rng.uniform_index(craters)));
      }
      multi += cs.size() > 1;
      ++queries;
      m.add({qid, Role::kQuery, {cs.begin(), cs.end()}, {}, {}});
      for (const auto& g : gallery) {
        if (cs.count(crater_of[g])) qrels[qid].insert(g);
      }
      auto order = gallery;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
      order.resize(1 + rng.uniform_index(order.size()));
      runs.push_back(as_run(qid, order));
      oruns[qid] = order;
    }
    worst = std::max(worst, std::abs(mean_average_precision(runs, m) - testing::map_oracle(oruns, qrels)));
    for (std::size_t k : {1u, 5u, 10u, 50u}) {
      worst = std::max(worst, std::abs(recall_at_k(runs, m, k) - testing::recall_oracle(oruns, qrels, k)));
    }
    for (std::size_t s : {5u, 20u, 100u}) {
      const auto sr = shortlist_recall(runs, m, s);
      worst = std::max(worst, std::abs(sr.fraction - testing::shortlist_fraction_oracle(oruns, qrels, s)));
      worst = std::max(worst, std::abs(sr.hit_rate - testing::recall_oracle(oruns, qrels, s)));
    }
  }
  report("metrics oracle", worked && worst <= 1e-9 && multi > 0,
         fmt("200 randomized runs (%zu queries, %zu multi-ID), max |err| %.2e (<= 1e-9); "
             "AP{1,3}=%.4f, AP{2 of 2}=%.4f",
             queries, multi, worst, ap13, ap2));
}

// ---------------------------------------------------------------------------

struct Bench {
  SynthSpec spec;
  SynthData data;
  std::vector<TokenSet> sets;  // canonical
};

Bench make_bench(const SynthSpec& spec, unsigned threads) {
  Bench b{spec, generate_synthetic(spec, threads), {}};
  b.sets = std::move(b.data.records);
  parallel_for(b.sets.size(), threads, [&](std::size_t i) { canonicalize(b.sets[i]); });
  return b;
}

void exhaustive_identity(unsigned threads) {
  SynthSpec spec;
  spec.identities = 100;
  spec.distractors = 800;
  spec.query_views = 1;
  spec.seed = 7;
  const auto b = make_bench(spec, threads);
  auto insts = aggregate_all(b.sets, {{SeedStrategy::kFps, 16}}, threads);
  auto descs = pool_all(b.sets, {PoolMethod::kGem}, threads);
  const auto idx = FlatIndex::build(select_role(descs, b.data.manifest, Role::kGallery));
  const auto store = MultiVectorStore::from_instances(select_role(insts, b.data.manifest, Role::kGallery));
  const auto qids = b.data.manifest.query_ids();
  const TwoStageSearcher searcher(idx, store);
  const auto two = run_queries(searcher, qids, descs, insts, idx.size(), SearchMode::kTwoStage, threads);
  const auto qinst = select_role(insts, b.data.manifest, Role::kQuery);
  bool order_ok = true;
  double worst = 0.0;
  for (std::size_t q = 0; q < qinst.size(); ++q) {
    const auto ex = exhaustive_search(store, qinst[q].tokens);
    const auto& tw = two[q];
    order_ok = order_ok && tw.items.size() == ex.items.size();
    for (std::size_t r = 0; order_ok && r < ex.items.size(); ++r) {
      order_ok = tw.items[r].image_id == ex.items[r].image_id;
      worst = std::max(worst, std::abs(double(tw.items[r].score) - ex.items[r].score));
    }
  }
  report("exhaustive identity", order_ok && worst <= 1e-6,
         fmt("|G|=%zu, %zu queries, S=|G| order %s, max |score diff| %.2e (<= 1e-6)", idx.size(),
             qids.size(), order_ok ? "identical" : "DIFFERS", worst));
}

// ---------------------------------------------------------------------------

void aggregation_identity() {
  Rng rng(3003);
  double worst = 0.0;
  bool rows_ok = true;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.uniform_index(48), d = 2 + rng.uniform_index(62);
    Matrix raw(n, d);
    for (auto& x : raw.storage()) x = static_cast<float>(rng.normal());
    std::vector<float> att(n);
    double s = 0.0;
    for (auto& a : att) s += (a = static_cast<float>(rng.uniform01() + 1e-3));
    for (auto& a : att) a = static_cast<float>(a / s);
    const auto ts = make_token_set("t", raw, att);
    const auto g = testing::random_unit_rows(1 + rng.uniform_index(48), d, rng);
    const auto strategy = t % 2 == 0 ? SeedStrategy::kFps : SeedStrategy::kAttention;
    const auto its = build_instance_tokens(ts, {{strategy, n}, AssignMode::kHardTop1});
    for (std::size_t k = 0; k < n; ++k) {
      const auto a = ts.tokens.row(its.seeds[k]);
      rows_ok = rows_ok && std::equal(a.begin(), a.end(), its.tokens.row(k).begin());
    }
    worst = std::max(worst, std::abs(double(late_interaction_score(its.tokens, g)) -
                                     testing::maxsim_oracle(ts.tokens, g)));
    worst = std::max(worst, std::abs(double(late_interaction_score(g, its.tokens)) -
                                     testing::maxsim_oracle(g, ts.tokens)));
  }
  report("aggregation identity (K=N)", rows_ok && worst <= 1e-6,
         fmt("100 random token sets, seed rows %s, max |LI diff| %.2e (<= 1e-6)",
             rows_ok ? "bit-identical" : "DIFFER", worst));
}

// ---------------------------------------------------------------------------

void fps_oracle() {
  Rng rng(4004);
  int mismatches = 0, steps = 0, ties = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(31), d = 2 + rng.uniform_index(15);
    Matrix raw(n, d);
    for (auto& x : raw.storage()) x = static_cast<float>(rng.normal());
    std::vector<float> att(n);
    double s = 0.0;
    for (auto& a : att) s += (a = static_cast<float>(rng.uniform01() + 1e-3));
    for (auto& a : att) a = static_cast<float>(a / s);
    const auto ts = make_token_set("f", raw, att);
    const auto picks = select_seeds(ts, {SeedStrategy::kFps, n});
    const auto start = static_cast<std::size_t>(std::max_element(att.begin(), att.end()) - att.begin());
    if (picks[0] != start) ++mismatches;
    // Brute force: at each step, the argmax over remaining tokens of the
    // min distance to the chosen set (lowest index on exact ties).
    std::vector<std::size_t> chosen{picks[0]};
    for (std::size_t step = 1; step < n; ++step) {
      double best = -1e300;
      std::size_t arg = 0;
      std::vector<double> score(n, -1e300);
      for (std::size_t i = 0; i < n; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
        double m = 1e300;
        for (auto c : chosen) {
          double dd = 0.0;
          for (std::size_t k = 0; k < d; ++k) dd += double(ts.tokens.row(i)[k]) * ts.tokens.row(c)[k];
          m = std::min(m, 1.0 - dd);
        }
        score[i] = m;
        if (m > best) best = m, arg = i;
      }
      ++steps;
      if (picks[step] != arg) {
        // Accept only a numerical tie between the two candidates.
        if (std::abs(score[picks[step]] - best) <= 1e-6) {
          ++ties;
        } else {
          ++mismatches;
        }
      }
      chosen.push_back(picks[step]);
    }
  }
  report("FPS oracle", mismatches == 0,
         fmt("100 trials (N <= 32), %d steps checked, %d mismatches, %d float-level ties", steps,
             mismatches, ties));
}

// ---------------------------------------------------------------------------

struct BenchResult {
  double seconds = 0.0;
};

void synthetic_benchmark(unsigned threads) {
  const auto t0 = Clock::now();
  SynthSpec spec;  // defaults: 500 ids, 2 gallery views, 5 query views, 5k distractors, seed 42
  const auto b = make_bench(spec, threads);
  const auto& man = b.data.manifest;
  const auto qids = man.query_ids();

  auto insts = aggregate_all(b.sets, {{SeedStrategy::kFps, 16}, AssignMode::kHardTop1}, threads);
  auto gem = pool_all(b.sets, {PoolMethod::kGem, 3.0}, threads);
  auto mean = pool_all(b.sets, {PoolMethod::kMean}, threads);

  const auto gem_idx = FlatIndex::build(select_role(gem, man, Role::kGallery));
  const auto mean_idx = FlatIndex::build(select_role(mean, man, Role::kGallery));
  const auto store = MultiVectorStore::from_instances(select_role(insts, man, Role::kGallery));
  const std::size_t g = gem_idx.size();
  const std::size_t s10 = g / 10;

  const auto mean_runs = run_stage1_queries(mean_idx, qids, mean, g, threads);
  const double map_mean = mean_average_precision(mean_runs, man);

  const TwoStageSearcher searcher(gem_idx, store);
  const auto ex_runs = run_queries(searcher, qids, gem, insts, g, SearchMode::kExhaustive, threads);
  const double map_ex = mean_average_precision(ex_runs, man);

  std::map<std::size_t, double> map_two;
  bool recall_ok = true;
  std::string recall_detail;
  std::vector<RunRanking> runs_s10;
  for (std::size_t s : {std::size_t{50}, std::size_t{100}, std::size_t{200}, s10}) {
    const auto two = run_queries(searcher, qids, gem, insts, s, SearchMode::kTwoStage, threads);
    map_two[s] = mean_average_precision(two, man);
    const auto st1 = run_queries(searcher, qids, gem, insts, s, SearchMode::kStage1, threads);
    const auto rs = shortlist_recall(st1, man, s);
    for (std::size_t k : {1u, 5u, 10u, 20u, 50u}) {
      if (k > s) continue;
      const double rk = recall_at_k(two, man, k);
      if (rk > rs.hit_rate + 1e-12) recall_ok = false;
    }
    recall_detail += fmt(" S=%zu:mAP %.3f R@S %.3f(hit %.3f) R@10 %.3f;", s, map_two[s], rs.fraction,
                         rs.hit_rate, recall_at_k(two, man, 10));
    if (s == s10) runs_s10 = two;
  }
  const double secs = seconds_since(t0);

  const double gain = map_ex - map_mean;
  report("synthetic benchmark (a) LI vs mean pool", gain >= 0.10,
         fmt("instance-token LI mAP %.4f vs mean-pool mAP %.4f, gain %+.4f (>= 0.10)", map_ex,
             map_mean, gain));
  const double ratio = map_two[s10] / map_ex;
  report("synthetic benchmark (b) two-stage recovery", ratio >= 0.90,
         fmt("S=%zu (10%% of |G|=%zu) mAP %.4f / exhaustive %.4f = %.3f (>= 0.90)", s10, g,
             map_two[s10], map_ex, ratio));
  report("synthetic benchmark (c) Recall@k <= R@S", recall_ok, recall_detail.substr(1));
  report("synthetic benchmark runtime", secs < 120.0,
         fmt("%zu images, %zu queries, %.1f s (< 120 s, %u threads)", b.sets.size(), qids.size(),
             secs, threads));

  // Quantization, measured on two-stage S = 10% |G|.
  const auto tq = Clock::now();
  const double map_f32 = map_two[s10];
  const auto int8 = quantize_store(store, {Codec::kInt8}, nullptr, 0, threads);
  const TwoStageSearcher s_int8(gem_idx, int8);
  const double map_int8 = mean_average_precision(
      run_queries(s_int8, qids, gem, insts, s10, SearchMode::kTwoStage, threads), man);
  const std::size_t m = store.dim() / 4;
  const auto pq = quantize_store(store, {Codec::kPq, m}, nullptr, derive_seed(spec.seed, "pq-sample"), threads);
  const TwoStageSearcher s_pq(gem_idx, pq);
  const double map_pq = mean_average_precision(
      run_queries(s_pq, qids, gem, insts, s10, SearchMode::kTwoStage, threads), man);

  // INT8 per-component error bound over every stored token.
  double worst_ratio = 0.0;
  Matrix decoded;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const float* rows = store.f32_tokens(i);
    for (std::size_t r = 0; r < store.token_count(i); ++r) {
      std::span<const float> x(rows + r * store.dim(), store.dim());
      const auto enc = int8_encode(x);
      std::vector<float> y(x.size());
      int8_decode(enc.codes, enc.scale, y);
      for (std::size_t k = 0; k < x.size(); ++k) {
        if (enc.scale > 0) worst_ratio = std::max(worst_ratio, std::abs(double(y[k]) - x[k]) / enc.scale);
      }
    }
  }
  // Decoding rounds code * scale to f32, which can add up to half an ulp of
  // |x| <= 127 * scale on top of the quantization step.
  const double bound = 0.5 + 127.0 * std::ldexp(1.0, -24);
  report("quantization INT8", std::abs(map_int8 - map_f32) <= 0.005 && worst_ratio <= bound,
         fmt("mAP %.4f vs f32 %.4f (|diff| %.4f <= 0.005); max error %.7f x scale (<= 0.5 + f32 rounding); %zu B/token",
             map_int8, map_f32, std::abs(map_int8 - map_f32), worst_ratio, int8.bytes_per_token()));
  report("quantization PQ m=D/4", std::abs(map_pq - map_f32) <= 0.03,
         fmt("pq:%zu mAP %.4f vs f32 %.4f (|diff| %.4f <= 0.03); %zu B/token; %.1f s", m, map_pq,
             map_f32, std::abs(map_pq - map_f32), pq.bytes_per_token(), seconds_since(tq)));
}

// ---------------------------------------------------------------------------

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tokenrank");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

// Full command sequence with relative paths, run inside `dir`.
bool run_pipeline(const fs::path& dir, unsigned threads) {
  const auto prev = fs::current_path();
  fs::create_directories(dir);
  fs::current_path(dir);
  const std::string t = "--threads=" + std::to_string(threads);
  // eval prints its tables; keep them out of the criterion lines.
  std::ostringstream sink;
  auto* saved = std::cout.rdbuf(sink.rdbuf());
  bool ok = true;
  auto step = [&](std::vector<std::string> a) {
    if (!ok) return;
    a.push_back(t);
    ok = cli(a) == 0;
    if (!ok) std::fprintf(stderr, "step failed: %s\n", a[0].c_str());
  };
  step({"synth", "--out", "synth", "--identities", "60", "--distractors", "240", "--query-views", "2",
        "--multi-id-fraction", "0.1"});
  step({"codebook", "--store", "synth/tokens.cbtk", "--manifest", "synth/manifest.jsonl", "--out", "cb",
        "--k", "8", "--pca-dim", "64", "--budget", "5000"});
  step({"aggregate", "--store", "synth/tokens.cbtk", "--out", "agg", "--k", "16"});
  step({"aggregate", "--store", "synth/tokens.cbtk", "--out", "agg_soft", "--k", "8", "--assign",
        "soft_top4", "--seeds", "random", "--seed", "5"});
  step({"aggregate", "--store", "synth/tokens.cbtk", "--out", "agg_km", "--k", "8", "--method", "kmeans"});
  step({"aggregate", "--store", "synth/tokens.cbtk", "--out", "agg_vlad", "--method", "vlad",
        "--codebook", "cb/codebook.bin"});
  step({"pool", "--store", "synth/tokens.cbtk", "--out", "pool", "--pool", "gem"});
  step({"pool", "--store", "synth/tokens.cbtk", "--out", "pool_vlad", "--pool", "vlad", "--codebook",
        "cb/codebook.bin", "--pca", "cb/pca.bin"});
  step({"index", "--descriptors", "pool/descriptors.cbtk", "--manifest", "synth/manifest.jsonl", "--out",
        "index"});
  step({"quantize", "--store", "agg/instances.cbtk", "--manifest", "synth/manifest.jsonl", "--out", "mv",
        "--codec", "pq:8"});
  step({"search", "--index", "index/index.bin", "--mvstore", "mv/mvstore.bin", "--descriptors",
        "pool/descriptors.cbtk", "--store", "agg/instances.cbtk", "--manifest", "synth/manifest.jsonl",
        "--out", "search", "--shortlist", "10,50"});
  step({"search", "--lock", "search/config.lock", "--mode", "exhaustive"});
  step({"eval", "--runs", "search/run_S10.tsv,search/run_S50.tsv,search/run_full.tsv", "--manifest",
        "synth/manifest.jsonl"});
  std::cout.rdbuf(saved);
  fs::current_path(prev);
  return ok;
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir, std::size_t* skipped) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (e.path().filename().string().rfind("timing_", 0) == 0) {
      ++*skipped;
      continue;
    }
    out[rel] = read_file_bytes(e.path());
  }
  return out;
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / ("tokenrank_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const bool ran = run_pipeline(root / "a", 1) && run_pipeline(root / "b", 1) && run_pipeline(root / "c", 8);
  std::size_t skipped = 0;
  const auto a = ran ? snapshot(root / "a", &skipped) : decltype(snapshot(root, &skipped)){};
  const auto b = ran ? snapshot(root / "b", &skipped) : a;
  const auto c = ran ? snapshot(root / "c", &skipped) : a;
  std::string diff;
  for (const auto& [name, bytes] : a) {
    if (!b.count(name) || b.at(name) != bytes) diff += " " + name + "(run2)";
    if (!c.count(name) || c.at(name) != bytes) diff += " " + name + "(threads8)";
  }
  if (b.size() != a.size() || c.size() != a.size()) diff += " file-set";
  fs::remove_all(root);
  report("determinism", ran && diff.empty() && !a.empty(),
         ran ? fmt("%zu output files byte-identical across 2 runs and threads {1,8} (timing JSON excluded)%s",
                   a.size(), diff.empty() ? "" : (" DIFF:" + diff).c_str())
             : std::string("pipeline failed"));
}

// ---------------------------------------------------------------------------

void throughput() {
  const std::size_t d = 384;
  Rng rng(5005);
  {
    const std::size_t n = 50'000;
    std::vector<GlobalDescriptor> descs(n);
    const auto m = testing::random_unit_rows(n, d, rng);
    for (std::size_t i = 0; i < n; ++i) {
      descs[i] = {fmt("g%06zu", i), {m.row(i).begin(), m.row(i).end()}, PoolMethod::kGem};
    }
    const auto idx = FlatIndex::build(std::move(descs));
    const auto qs = testing::random_unit_rows(256, d, rng);
    // Latency of one query at a time: a full pass over 77 MB of vectors,
    // bounded by single-core memory bandwidth.
    auto t0 = Clock::now();
    std::size_t sink = 0;
    for (std::size_t q = 0; q < 32; ++q) sink += search_flat(idx, qs.row(q), 100).size();
    const double single_ms = seconds_since(t0) * 1000.0 / 32.0;
    // Throughput with queries batched over shared passes of the index.
    t0 = Clock::now();
    bool same = true;
    for (std::size_t b = 0; b < qs.rows(); b += 32) {
      Matrix batch(0, d);
      for (std::size_t q = b; q < b + 32; ++q) batch.append_row(qs.row(q));
      const auto hits = search_flat_batch(idx, batch, 100);
      for (const auto& h : hits) sink += h.size();
      if (b == 0) {
        const auto ref = search_flat(idx, qs.row(0), 100);
        for (std::size_t r = 0; r < ref.size(); ++r) same = same && ref[r].row == hits[0][r].row;
      }
    }
    const double batched_ms = seconds_since(t0) * 1000.0 / double(qs.rows());
    report("throughput Stage 1", batched_ms <= 5.0 && same && sink == (32 + 256) * 100,
           fmt("exact search over 50000 x 384, 1 thread: %.2f ms/query mean batched by 32 (<= 5 ms); "
               "%.2f ms for a lone query (memory-bandwidth bound)",
               batched_ms, single_ms));
  }
  {
    // Rerank cost depends on S, K and D only; the gallery size here keeps
    // the f32 store within memory.
    const std::size_t n = 10'000, k = 32, s = 100;
    std::vector<GlobalDescriptor> descs(n);
    std::vector<InstanceTokenSet> insts(n);
    const auto m = testing::random_unit_rows(n, d, rng);
    for (std::size_t i = 0; i < n; ++i) {
      descs[i] = {fmt("g%06zu", i), {m.row(i).begin(), m.row(i).end()}, PoolMethod::kGem};
      insts[i].image_id = descs[i].image_id;
      insts[i].tokens = testing::random_unit_rows(k, d, rng);
    }
    const auto idx = FlatIndex::build(std::move(descs));
    const auto store = MultiVectorStore::from_instances(std::move(insts));
    const TwoStageSearcher searcher(idx, store);
    const auto qd = testing::random_unit_rows(50, d, rng);
    double stage2 = 0.0, total = 0.0;
    for (std::size_t q = 0; q < qd.rows(); ++q) {
      const auto qt = testing::random_unit_rows(k, d, rng);
      const auto run = searcher.search(qd.row(q), qt, s);
      stage2 += run.stage2_ms;
      total += run.stage1_ms + run.stage2_ms;
    }
    stage2 /= double(qd.rows());
    total /= double(qd.rows());
    report("throughput two-stage rerank", stage2 <= 20.0,
           fmt("S=100, K=32, D=384: rerank %.2f ms/query mean (<= 20 ms), two-stage total %.2f ms "
               "on a 10000-image gallery, 1 thread",
               stage2, total));
  }
}

// ---------------------------------------------------------------------------

void published_reproduction() {
  const fs::path doc = fs::path(TOKENRANK_SOURCE_DIR) / "docs" / "reproduction.md";
  std::ifstream in(doc);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const bool listed = in.good() && text.find(".644") != std::string::npos &&
                      text.find(".726") != std::string::npos && text.find("0.01") != std::string::npos;
  report("published-number reproduction (documented)", listed,
         listed ? "external targets (S=100 mAP .644, Full LI .726, +-0.01) listed in docs/reproduction.md; "
                  "not run here (needs the public benchmark and exported backbone features)"
                : "docs/reproduction.md missing or incomplete");
}

}  // namespace

int main() {
  const unsigned threads = resolve_threads(0);
  const auto t0 = Clock::now();
  criterion("late-interaction oracle", li_oracle);
  criterion("metrics oracle", metrics_oracle);
  criterion("exhaustive identity", [&] { exhaustive_identity(threads); });
  criterion("aggregation identity (K=N)", aggregation_identity);
  criterion("FPS oracle", fps_oracle);
  criterion("synthetic benchmark", [&] { synthetic_benchmark(threads); });
  criterion("determinism", determinism);
  criterion("throughput", throughput);
  criterion("published-number reproduction (documented)", published_reproduction);
  std::printf("%s: %d failing criteria, %.1f s\n", failures == 0 ? "ALL PASS" : "FAILURES", failures,
              seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
