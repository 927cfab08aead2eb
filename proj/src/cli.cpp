#include "tokenrank/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <regex>
#include <sstream>
#include <unordered_set>

#include <CLI11.hpp>

#include "tokenrank/codebook.hpp"
#include "tokenrank/eval.hpp"
#include "tokenrank/multivector_store.hpp"
#include "tokenrank/pipeline.hpp"
#include "tokenrank/synth.hpp"

namespace tokenrank {

namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kCorruption: return 3;
    case ErrorKind::kValidation:
    case ErrorKind::kFormat:
    case ErrorKind::kCapacity:
    case ErrorKind::kDegenerate:
    case ErrorKind::kProtocol: return 2;
  }
  return 1;
}

namespace {

constexpr std::size_t kBatch = 1024;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Options that make up a command's effective configuration. Each is echoed
// to config.lock and can be replayed from it.
class Params {
 public:
  explicit Params(CLI::App* app) : app_(app) {}

  CLI::Option* add(const std::string& name, std::string& ref, const std::string& help) {
    getters_.emplace_back(name, [&ref] { return Json(ref); });
    return app_->add_option("--" + name, ref, help)->capture_default_str();
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  CLI::Option* add(const std::string& name, T& ref, const std::string& help) {
    getters_.emplace_back(name, [&ref] { return Json(ref); });
    return app_->add_option("--" + name, ref, help)->capture_default_str();
  }
  CLI::Option* add(const std::string& name, std::vector<std::string>& ref, const std::string& help) {
    getters_.emplace_back(name, [&ref] {
      std::string s;
      for (std::size_t i = 0; i < ref.size(); ++i) s += (i ? "," : "") + ref[i];
      return Json(s);
    });
    return app_->add_option("--" + name, ref, help)->delimiter(',');
  }
  CLI::Option* add(const std::string& name, std::vector<std::size_t>& ref, const std::string& help) {
    getters_.emplace_back(name, [&ref] { return Json(join(ref)); });
    return app_->add_option("--" + name, ref, help)->delimiter(',')->capture_default_str();
  }

  Json effective() const {
    Json j = Json::object();
    for (const auto& [name, get] : getters_) j[name] = get();
    return j;
  }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<Json()>>> getters_;
};

void write_lock(const fs::path& out_dir, const std::string& command, const Params& p,
                const std::string& name = "config.lock") {
  Json lock;
  lock["command"] = command;
  lock["params"] = p.effective();
  std::ofstream f(out_dir / name, std::ios::binary | std::ios::trunc);
  f << lock.dump(2) << '\n';
  require(f.good(), ErrorKind::kValidation, "cannot write " + (out_dir / name).string());
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << j.dump(2) << '\n';
  require(f.good(), ErrorKind::kValidation, "cannot write " + path.string());
}

fs::path prepare_out(const std::string& out) {
  require(!out.empty(), ErrorKind::kValidation, "--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

void require_file(const std::string& path, const std::string& flag) {
  require(!path.empty(), ErrorKind::kValidation, flag + " is required");
  require(fs::exists(path), ErrorKind::kValidation, flag + " " + path + " does not exist");
}

Json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::kValidation, "cannot open " + path.string());
  try {
    return Json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

// Applies `fn` to batches of records streamed from a store.
void for_each_batch(const fs::path& store, const std::function<void(std::vector<TokenSet>&)>& fn) {
  TokenStoreReader reader(store, AccessMode::kMapped);
  std::vector<TokenSet> batch;
  while (auto ts = reader.next()) {
    batch.push_back(std::move(*ts));
    if (batch.size() == kBatch) {
      fn(batch);
      batch.clear();
    }
  }
  if (!batch.empty()) fn(batch);
}

std::vector<GlobalDescriptor> read_descriptors(const fs::path& path, PoolMethod method) {
  std::vector<GlobalDescriptor> out;
  for (const auto& ts : read_store(path, AccessMode::kMapped)) out.push_back(from_token_set(ts, method));
  return out;
}

PoolMethod descriptor_method(const fs::path& descriptors) {
  const fs::path side = descriptors.string() + ".json";
  if (!fs::exists(side)) return PoolMethod::kMean;
  return parse_pool_method(read_json_file(side).at("pool").get<std::string>());
}

std::optional<double> soft_alpha(double alpha) {
  if (alpha > 0.0) return alpha;
  return std::nullopt;
}

// --- synth ----------------------------------------------------------------

struct SynthArgs {
  SynthSpec spec;
  std::string out;
};

void cmd_synth(const SynthArgs& a, const Params& p, unsigned threads) {
  const auto t0 = Clock::now();
  const auto dir = prepare_out(a.out);
  const auto data = generate_synthetic(a.spec, threads);
  const auto bytes = write_store(data.records, dir / "tokens.cbtk");
  save_manifest(data.manifest, dir / "manifest.jsonl");
  write_lock(dir, "synth", p);
  std::fprintf(stderr, "synth: %zu images (%zu queries, %zu gallery), %llu bytes in %.2f s\n",
               data.records.size(), data.manifest.query_ids().size(), data.manifest.gallery_size(),
               static_cast<unsigned long long>(bytes), seconds_since(t0));
}

// --- aggregate ------------------------------------------------------------

struct AggregateArgs {
  std::string store, out, method = "instance", seeds = "fps", assign = "hard_top1", codebook;
  std::size_t k = 16;
  double tau = 1.0;
  int iters = 20;
  double soft_alpha = 0.0;
  std::uint64_t seed = 0;
};

void cmd_aggregate(const AggregateArgs& a, const Params& p, unsigned threads) {
  require_file(a.store, "--store");
  const auto dir = prepare_out(a.out);
  require(a.k >= 1, ErrorKind::kValidation, "--k must be >= 1");

  AggregationConfig cfg;
  cfg.seeds.strategy = parse_seed_strategy(a.seeds);
  cfg.seeds.k = a.k;
  cfg.seeds.rng_seed = derive_seed(a.seed, "aggregate");
  cfg.mode = parse_assign_mode(a.assign);
  cfg.tau = a.tau;

  std::optional<Codebook> cb;
  if (a.method == "vlad") {
    require_file(a.codebook, "--codebook");
    cb = load_codebook(a.codebook);
  } else {
    require(a.method == "instance" || a.method == "select" || a.method == "kmeans" ||
                a.method == "medoid",
            ErrorKind::kValidation,
            "unknown --method '" + a.method + "' (instance|select|kmeans|medoid|vlad)");
  }

  const std::uint32_t dim = TokenStoreReader(a.store).header().dim;
  TokenStoreWriter writer(dir / "instances.cbtk", dim, 0);
  const auto t0 = Clock::now();
  std::uint64_t images = 0, evals = 0, degenerate = 0;
  for_each_batch(a.store, [&](std::vector<TokenSet>& batch) {
    std::vector<InstanceTokenSet> res(batch.size());
    std::vector<std::uint64_t> ev(batch.size(), 0), dg(batch.size(), 0);
    parallel_for(batch.size(), threads, [&](std::size_t i) {
      const TokenSet& ts = batch[i];
      try {
        if (a.method == "instance") {
          res[i] = build_instance_tokens(ts, cfg, &ev[i]);
        } else if (a.method == "select") {
          res[i] = select_tokens(ts, select_seeds(ts, cfg.seeds));
        } else if (a.method == "kmeans" || a.method == "medoid") {
          res[i] = kmeans_per_image(ts, a.k, a.iters, derive_seed(a.seed, "kmeans"),
                                    a.method == "kmeans" ? KMeansVariant::kCentroid
                                                         : KMeansVariant::kMedoid);
        } else {
          std::size_t blocks = 0;
          res[i] = vlad_encode_mv(ts, *cb, {soft_alpha(a.soft_alpha)}, &blocks);
          dg[i] = blocks;
        }
      } catch (const Error& e) {
        fail(e.kind(), "record " + std::to_string(images + i) + " ('" + ts.image_id + "'): " + e.what());
      }
    });
    for (std::size_t i = 0; i < res.size(); ++i) {
      writer.append(to_token_set(res[i]));
      evals += ev[i];
      degenerate += dg[i];
    }
    images += batch.size();
  });
  writer.finish();
  const double secs = seconds_since(t0);

  Json prov;
  prov["method"] = a.method;
  prov["seeds"] = a.seeds;
  prov["assign"] = a.assign;
  prov["k"] = a.k;
  prov["tau"] = a.tau;
  prov["seed"] = a.seed;
  prov["images"] = images;
  if (a.method == "instance") prov["similarity_evaluations"] = evals;
  if (a.method == "vlad") {
    prov["codebook"] = a.codebook;
    prov["soft_alpha"] = a.soft_alpha;
    prov["degenerate_blocks"] = degenerate;
  }
  write_json(dir / "provenance.json", prov);
  write_lock(dir, "aggregate", p);
  std::fprintf(stderr, "aggregate: %llu images in %.2f s (%.0f images/s)",
               static_cast<unsigned long long>(images), secs, secs > 0 ? images / secs : 0.0);
  if (a.method == "instance") {
    std::fprintf(stderr, ", %llu token-seed similarities", static_cast<unsigned long long>(evals));
  }
  std::fprintf(stderr, "\n");
  if (degenerate > 0) {
    std::fprintf(stderr, "warning: %llu VLAD blocks had zero residual; centroid directions used\n",
                 static_cast<unsigned long long>(degenerate));
  }
}

// --- pool -----------------------------------------------------------------

struct PoolArgs {
  std::string store, out, pool = "gem", gem_sign = "clamp", codebook, pca;
  double gem_p = 3.0;
  double soft_alpha = 0.0;
};

void cmd_pool(const PoolArgs& a, const Params& p, unsigned threads) {
  require_file(a.store, "--store");
  const auto dir = prepare_out(a.out);
  const PoolMethod method = parse_pool_method(a.pool);
  PoolOptions opts;
  opts.method = method;
  opts.gem_p = a.gem_p;
  require(a.gem_sign == "clamp" || a.gem_sign == "signed", ErrorKind::kValidation,
          "--gem-sign must be clamp or signed");
  opts.gem_sign = a.gem_sign == "clamp" ? GemSign::kClamp : GemSign::kSigned;

  std::optional<Codebook> cb;
  std::optional<PcaModel> pca;
  std::uint32_t dim = TokenStoreReader(a.store).header().dim;
  if (method == PoolMethod::kVlad) {
    require_file(a.codebook, "--codebook");
    require_file(a.pca, "--pca");
    cb = load_codebook(a.codebook);
    pca = load_pca(a.pca);
    dim = static_cast<std::uint32_t>(pca->out_dim());
  }

  TokenStoreWriter writer(dir / "descriptors.cbtk", dim, 0);
  const auto t0 = Clock::now();
  std::uint64_t images = 0;
  for_each_batch(a.store, [&](std::vector<TokenSet>& batch) {
    std::vector<GlobalDescriptor> res;
    if (method == PoolMethod::kVlad) {
      res.resize(batch.size());
      parallel_for(batch.size(), threads, [&](std::size_t i) {
        res[i] = vlad_encode_sv(batch[i], *cb, *pca, {soft_alpha(a.soft_alpha)});
      });
    } else {
      res = pool_all(batch, opts, threads);
    }
    for (const auto& g : res) writer.append(to_token_set(g));
    images += batch.size();
  });
  writer.finish();
  Json side;
  side["pool"] = a.pool == "gap" ? "mean" : a.pool;
  side["gem_p"] = a.gem_p;
  side["gem_sign"] = a.gem_sign;
  write_json(dir / "descriptors.cbtk.json", side);
  write_lock(dir, "pool", p);
  std::fprintf(stderr, "pool: %llu images in %.2f s\n", static_cast<unsigned long long>(images),
               seconds_since(t0));
}

// --- codebook -------------------------------------------------------------

struct CodebookArgs {
  std::string store, manifest, out;
  std::size_t k = 64;
  int iters = 25;
  std::size_t budget = kDefaultTokenBudget;
  std::size_t pca_dim = 0;
  double soft_alpha = 0.0;
  std::uint64_t seed = 0;
};

void cmd_codebook(const CodebookArgs& a, const Params& p, unsigned threads) {
  require_file(a.store, "--store");
  const auto dir = prepare_out(a.out);
  auto sets = read_store(a.store, AccessMode::kMapped);
  if (!a.manifest.empty()) {
    require_file(a.manifest, "--manifest");
    sets = select_role(std::move(sets), load_manifest(a.manifest), Role::kGallery);
  }
  require(!sets.empty(), ErrorKind::kValidation, "no token sets to train on");
  const auto t0 = Clock::now();
  const Matrix sample = sample_tokens(sets, a.budget, derive_seed(a.seed, "codebook-sample"));
  const Codebook cb = train_codebook(sample, a.k, a.iters, derive_seed(a.seed, "codebook"));
  save_codebook(cb, dir / "codebook.bin");
  std::fprintf(stderr, "codebook: k=%zu on %zu tokens, %d iterations, %.2f s\n", a.k, sample.rows(),
               cb.iterations, seconds_since(t0));
  if (a.pca_dim > 0) {
    Matrix flats(sets.size(), a.k * cb.dim());
    parallel_for(sets.size(), threads, [&](std::size_t i) {
      const auto f = vlad_flat(sets[i], cb, {soft_alpha(a.soft_alpha)});
      std::copy(f.begin(), f.end(), flats.row(i).begin());
    });
    save_pca(fit_pca(flats, a.pca_dim), dir / "pca.bin");
    std::fprintf(stderr, "codebook: PCA %zu -> %zu on %zu images\n", flats.cols(), a.pca_dim,
                 flats.rows());
  }
  write_lock(dir, "codebook", p);
}

// --- index ----------------------------------------------------------------

struct IndexArgs {
  std::string descriptors, manifest, out;
};

void cmd_index(const IndexArgs& a, const Params& p) {
  require_file(a.descriptors, "--descriptors");
  const auto dir = prepare_out(a.out);
  auto desc = read_descriptors(a.descriptors, descriptor_method(a.descriptors));
  if (!a.manifest.empty()) {
    require_file(a.manifest, "--manifest");
    desc = select_role(std::move(desc), load_manifest(a.manifest), Role::kGallery);
  }
  const auto idx = FlatIndex::build(std::move(desc));
  save_index(idx, dir / "index.bin");
  write_lock(dir, "index", p);
  std::fprintf(stderr, "index: %zu vectors, dim %zu\n", idx.size(), idx.dim());
}

// --- quantize -------------------------------------------------------------

struct QuantizeArgs {
  std::string store, manifest, out, codec = "f32";
  std::size_t pq_budget = kDefaultPqTrainBudget;
  std::uint64_t seed = 0;
};

void cmd_quantize(const QuantizeArgs& a, const Params& p, unsigned threads) {
  require_file(a.store, "--store");
  const auto dir = prepare_out(a.out);
  auto sets = read_store(a.store, AccessMode::kMapped);
  if (!a.manifest.empty()) {
    require_file(a.manifest, "--manifest");
    sets = select_role(std::move(sets), load_manifest(a.manifest), Role::kGallery);
  }
  std::vector<InstanceTokenSet> inst;
  inst.reserve(sets.size());
  for (const auto& ts : sets) inst.push_back(instance_from_token_set(ts));
  sets.clear();
  const auto t0 = Clock::now();
  const auto f32 = MultiVectorStore::from_instances(std::move(inst));
  const CodecSpec codec = CodecSpec::parse(a.codec);
  std::optional<Matrix> sample;
  if (codec.codec == Codec::kPq && a.pq_budget != kDefaultPqTrainBudget) {
    // Explicit budget: draw it from the decoded store tokens.
    std::vector<TokenSet> all;
    for (std::size_t i = 0; i < f32.size(); ++i) {
      Matrix m;
      f32.decode(i, m);
      all.push_back(TokenSet{f32.ids()[i], std::move(m), {}, {}, {}});
    }
    sample = sample_tokens(all, a.pq_budget, derive_seed(a.seed, "pq-sample"));
  }
  const auto store = codec.codec == Codec::kF32
                         ? f32
                         : quantize_store(f32, codec, sample ? &*sample : nullptr, a.seed, threads);
  save_mvstore(store, dir / "mvstore.bin");
  write_lock(dir, "quantize", p);
  std::fprintf(stderr, "quantize: %zu images, %zu tokens, codec %s, %zu bytes/token, %.2f s\n",
               store.size(), store.total_tokens(), codec.to_string().c_str(),
               store.bytes_per_token(), seconds_since(t0));
}

// --- search ---------------------------------------------------------------

struct SearchArgs {
  std::string index, mvstore, descriptors, store, manifest, out, mode = "two-stage";
  std::vector<std::size_t> shortlist{50, 100, 200, 500};
};

void cmd_search(const SearchArgs& a, const Params& p, unsigned threads) {
  require_file(a.index, "--index");
  require_file(a.descriptors, "--descriptors");
  require_file(a.manifest, "--manifest");
  const SearchMode mode = parse_search_mode(a.mode);
  const auto dir = prepare_out(a.out);
  const auto manifest = load_manifest(a.manifest);
  const auto idx = load_index(a.index);
  require(idx.ids() == manifest.gallery_ids(), ErrorKind::kValidation,
          "index gallery does not match the manifest gallery");

  auto qdesc = select_role(read_descriptors(a.descriptors, idx.method()), manifest, Role::kQuery);
  const auto qids = manifest.query_ids();
  std::vector<InstanceTokenSet> qtok;
  std::optional<MultiVectorStore> store;
  std::optional<TwoStageSearcher> searcher;
  if (mode != SearchMode::kStage1) {
    require_file(a.mvstore, "--mvstore");
    require_file(a.store, "--store");
    store = load_mvstore(a.mvstore);
    searcher.emplace(idx, *store);
    for (const auto& ts : select_role(read_store(a.store, AccessMode::kMapped), manifest, Role::kQuery)) {
      qtok.push_back(instance_from_token_set(ts));
    }
  }
  const std::size_t k = qtok.empty() ? 0 : qtok.front().size();

  auto emit = [&](const std::string& stem, const std::vector<RunRanking>& runs, std::size_t s) {
    write_run_tsv(runs, dir / ("run_" + stem + ".tsv"));
    const Json t = timing_summary(runs, s, k);
    write_json(dir / ("timing_" + stem + ".json"), t);
    std::fprintf(stderr, "search %s: %zu queries, stage1 %.3f ms, stage2 %.3f ms per query\n",
                 stem.c_str(), runs.size(), t["stage1_ms_mean"].get<double>(),
                 t["stage2_ms_mean"].get<double>());
  };

  if (mode == SearchMode::kExhaustive) {
    emit("full", run_queries(*searcher, qids, qdesc, qtok, idx.size(), mode, threads), idx.size());
  } else {
    require(!a.shortlist.empty(), ErrorKind::kValidation, "--shortlist needs at least one size");
    for (const auto s : a.shortlist) {
      require(s >= 1, ErrorKind::kValidation, "shortlist sizes must be >= 1");
      const std::string stem = (mode == SearchMode::kStage1 ? "stage1_S" : "S") + std::to_string(s);
      emit(stem,
           mode == SearchMode::kStage1 ? run_stage1_queries(idx, qids, qdesc, s, threads)
                                       : run_queries(*searcher, qids, qdesc, qtok, s, mode, threads),
           s);
    }
  }
  write_lock(dir, "search", p);
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string manifest, out;
  std::vector<std::string> runs;
  std::vector<std::size_t> recall{1, 5, 10};
  std::size_t shortlist = 0;
};

void cmd_eval(const EvalArgs& a, const Params& p, unsigned threads) {
  require_file(a.manifest, "--manifest");
  require(!a.runs.empty(), ErrorKind::kValidation, "--runs needs at least one run file");
  const auto manifest = load_manifest(a.manifest);
  const std::regex s_in_name(".*_S([0-9]+)$");
  for (const auto& run_path : a.runs) {
    require_file(run_path, "--runs");
    const auto runs = read_run_tsv(run_path);
    ReportConfig cfg;
    cfg.recall_ks = a.recall;
    cfg.label = fs::path(run_path).stem().string();
    std::smatch m;
    if (a.shortlist > 0) {
      cfg.shortlist = a.shortlist;
    } else if (std::regex_match(cfg.label, m, s_in_name)) {
      cfg.shortlist = std::stoul(m[1].str());
    }
    cfg.echo = {{"run", run_path}, {"manifest", a.manifest}};
    const fs::path lock = fs::path(run_path).parent_path() / "config.lock";
    if (fs::exists(lock)) cfg.echo["search"] = read_json_file(lock);
    const auto report = emit_report(runs, manifest, cfg, threads);
    const fs::path dir = a.out.empty() ? fs::path(run_path).parent_path() : prepare_out(a.out);
    write_json(dir / (cfg.label + ".report.json"), report.to_json());
    const std::string text = report.to_text();
    std::ofstream(dir / (cfg.label + ".report.txt"), std::ios::binary | std::ios::trunc) << text;
    std::cout << text;
    // Kept apart from the search lock that may share the directory.
    write_lock(dir, "eval", p, "eval.lock");
  }
}

// --- lock replay ----------------------------------------------------------

// Turns a config.lock into arguments placed before the user's own, so any
// option given explicitly still wins (last value is taken).
std::vector<std::string> expand_lock(const std::vector<std::string>& args) {
  std::string lock_path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--lock" && i + 1 < args.size()) {
      lock_path = args[++i];
    } else if (args[i].rfind("--lock=", 0) == 0) {
      lock_path = args[i].substr(7);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (lock_path.empty()) return args;
  const Json lock = read_json_file(lock_path);
  require(lock.contains("command") && lock.contains("params"), ErrorKind::kFormat,
          lock_path + ": not a config.lock");
  const auto command = lock["command"].get<std::string>();
  std::vector<std::string> out;
  std::size_t at = 0;
  if (!rest.empty() && rest[0].rfind("-", 0) != 0) {
    require(rest[0] == command, ErrorKind::kValidation,
            "lock is for '" + command + "', not '" + rest[0] + "'");
    at = 1;
  }
  out.push_back(command);
  for (const auto& [key, value] : lock["params"].items()) {
    const std::string v = value.is_string() ? value.get<std::string>() : value.dump();
    if (value.is_string() && v.empty()) continue;
    out.push_back("--" + key + "=" + v);
  }
  out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(at), rest.end());
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"tokenrank: training-free multi-vector image retrieval"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  unsigned threads = 0;
  std::string lock_unused;

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--threads", threads, "worker threads (default: TOKENRANK_THREADS or all cores)");
    s->add_option("--lock", lock_unused, "replay parameters from a config.lock");
    return s;
  };

  SynthArgs synth;
  auto* s_synth = sub("synth", "generate a synthetic token store and manifest");
  Params p_synth(s_synth);
  p_synth.add("out", synth.out, "output directory");
  p_synth.add("identities", synth.spec.identities, "identities with query and gallery views");
  p_synth.add("gallery-views", synth.spec.gallery_views, "gallery views per identity");
  p_synth.add("query-views", synth.spec.query_views, "query views per identity");
  p_synth.add("distractors", synth.spec.distractors, "gallery-only distractor images");
  p_synth.add("tokens", synth.spec.tokens, "tokens per image (N)");
  p_synth.add("dim", synth.spec.dim, "token dimension (D)");
  p_synth.add("identity-tokens", synth.spec.identity_tokens, "identity rows per image");
  p_synth.add("prototypes", synth.spec.prototypes, "shared background directions");
  p_synth.add("sigma-deg", synth.spec.sigma_deg, "mean per-token perturbation angle, degrees");
  p_synth.add("mixture-skew", synth.spec.mixture_skew, "spread of per-view background mixtures");
  p_synth.add("part-library", synth.spec.part_library, "shared identity part library size (0: unique)");
  p_synth.add("photometric", synth.spec.photometric, "norm of a per-view shift on every row");
  p_synth.add("multi-id-fraction", synth.spec.multi_id_fraction, "queries showing two identities");
  p_synth.add("seed", synth.spec.seed, "random seed");

  AggregateArgs agg;
  auto* s_agg = sub("aggregate", "compress token sets into instance tokens");
  Params p_agg(s_agg);
  p_agg.add("store", agg.store, "input CBTK token store");
  p_agg.add("out", agg.out, "output directory");
  p_agg.add("method", agg.method, "instance|select|kmeans|medoid|vlad");
  p_agg.add("k", agg.k, "instance tokens per image");
  p_agg.add("seeds", agg.seeds, "attention|fps|norm|norm_x_attn|random|grid|cls_sim|cls_dist");
  p_agg.add("assign", agg.assign, "hard_top1|soft_top2|soft_top4|group_dense");
  p_agg.add("tau", agg.tau, "softmax temperature for soft and dense assignment");
  p_agg.add("iters", agg.iters, "Lloyd iterations (kmeans, medoid)");
  p_agg.add("codebook", agg.codebook, "codebook for vlad");
  p_agg.add("soft-alpha", agg.soft_alpha, "soft VLAD sharpness; 0 = hard assignment");
  p_agg.add("seed", agg.seed, "random seed");

  PoolArgs pl;
  auto* s_pool = sub("pool", "collapse token sets into global descriptors");
  Params p_pool(s_pool);
  p_pool.add("store", pl.store, "input CBTK token store");
  p_pool.add("out", pl.out, "output directory");
  p_pool.add("pool", pl.pool, "cls|mean|max|gem|vlad");
  p_pool.add("gem-p", pl.gem_p, "GeM power");
  p_pool.add("gem-sign", pl.gem_sign, "clamp|signed handling of negative values in GeM");
  p_pool.add("codebook", pl.codebook, "codebook for vlad");
  p_pool.add("pca", pl.pca, "PCA model for vlad");
  p_pool.add("soft-alpha", pl.soft_alpha, "soft VLAD sharpness; 0 = hard assignment");

  CodebookArgs cbk;
  auto* s_cb = sub("codebook", "train a VLAD codebook (and optional PCA whitening)");
  Params p_cb(s_cb);
  p_cb.add("store", cbk.store, "input CBTK token store");
  p_cb.add("manifest", cbk.manifest, "restrict training to gallery images");
  p_cb.add("out", cbk.out, "output directory");
  p_cb.add("k", cbk.k, "codebook size");
  p_cb.add("iters", cbk.iters, "k-means iterations");
  p_cb.add("budget", cbk.budget, "token sample size");
  p_cb.add("pca-dim", cbk.pca_dim, "fit PCA whitening to this many dims (0: skip)");
  p_cb.add("soft-alpha", cbk.soft_alpha, "soft VLAD sharpness for the PCA fit");
  p_cb.add("seed", cbk.seed, "random seed");

  IndexArgs ix;
  auto* s_ix = sub("index", "build the exact flat Stage-1 index");
  Params p_ix(s_ix);
  p_ix.add("descriptors", ix.descriptors, "descriptor CBTK store from pool");
  p_ix.add("manifest", ix.manifest, "restrict to gallery images");
  p_ix.add("out", ix.out, "output directory");

  QuantizeArgs qz;
  auto* s_qz = sub("quantize", "encode instance tokens into a multi-vector store");
  Params p_qz(s_qz);
  p_qz.add("store", qz.store, "instance-token CBTK store from aggregate");
  p_qz.add("manifest", qz.manifest, "restrict to gallery images");
  p_qz.add("out", qz.out, "output directory");
  p_qz.add("codec", qz.codec, "f32|fp16|int8|pq:<m>");
  p_qz.add("pq-budget", qz.pq_budget, "PQ training sample size");
  p_qz.add("seed", qz.seed, "random seed");

  SearchArgs se;
  auto* s_se = sub("search", "run queries through the two-stage pipeline");
  Params p_se(s_se);
  p_se.add("index", se.index, "flat index from index");
  p_se.add("mvstore", se.mvstore, "multi-vector store from quantize");
  p_se.add("descriptors", se.descriptors, "descriptor store holding the query descriptors");
  p_se.add("store", se.store, "instance-token store holding the query tokens");
  p_se.add("manifest", se.manifest, "relevance manifest");
  p_se.add("out", se.out, "output directory");
  p_se.add("shortlist", se.shortlist, "shortlist sizes, comma separated");
  p_se.add("mode", se.mode, "two-stage|stage1|exhaustive");

  EvalArgs ev;
  auto* s_ev = sub("eval", "score run files against a manifest");
  Params p_ev(s_ev);
  p_ev.add("manifest", ev.manifest, "relevance manifest");
  p_ev.add("out", ev.out, "output directory (default: next to each run file)");
  p_ev.add("recall", ev.recall, "Recall@K cutoffs, comma separated");
  p_ev.add("shortlist", ev.shortlist, "S for shortlist recall (0: from run_S<S> file names)");
  p_ev.add("runs", ev.runs, "run TSV files, comma separated");

  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    args = expand_lock(args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  }

  try {
    const unsigned t = resolve_threads(threads);
    if (*s_synth) cmd_synth(synth, p_synth, t);
    if (*s_agg) cmd_aggregate(agg, p_agg, t);
    if (*s_pool) cmd_pool(pl, p_pool, t);
    if (*s_cb) cmd_codebook(cbk, p_cb, t);
    if (*s_ix) cmd_index(ix, p_ix);
    if (*s_qz) cmd_quantize(qz, p_qz, t);
    if (*s_se) cmd_search(se, p_se, t);
    if (*s_ev) cmd_eval(ev, p_ev, t);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace tokenrank
