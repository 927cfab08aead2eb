#include "tokenrank/engine.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tokenrank/binary_io.hpp"
#include "lanes.hpp"

namespace tokenrank {

// --- late interaction -----------------------------------------------------

LateInteractionQuery::LateInteractionQuery(const Matrix& query_tokens)
    : kq_(query_tokens.rows()), dim_(query_tokens.cols()) {
  require(kq_ >= 1, ErrorKind::kValidation, "late interaction needs a non-empty query set");
  padded_ = (kq_ + kLanes - 1) / kLanes * kLanes;
  // Block-major layout: block b holds lanes [8b, 8b + 8) as dim x 8.
  transposed_.assign(dim_ * padded_, 0.0f);
  for (std::size_t i = 0; i < kq_; ++i) {
    const auto r = query_tokens.row(i);
    float* block = transposed_.data() + (i / kLanes) * dim_ * kLanes;
    for (std::size_t d = 0; d < dim_; ++d) block[d * kLanes + i % kLanes] = r[d];
  }
}

using detail::Lanes;
using detail::lane_max;
using detail::load_lanes;
using detail::splat;

float LateInteractionQuery::score(const float* candidate, std::size_t kg) const {
  require(kg >= 1, ErrorKind::kValidation, "late interaction needs a non-empty candidate set");
  static_assert(kLanes == 8);
  const std::size_t blocks = padded_ / kLanes;
  const std::size_t dim = dim_;
  float sum = 0.0f;
  for (std::size_t b = 0; b < blocks; ++b) {
    const float* qb = transposed_.data() + b * dim * kLanes;
    Lanes best = splat(-std::numeric_limits<float>::infinity());

    // Four candidate rows at a time; each lane is still one inner product
    // accumulated over ascending dimensions.
    std::size_t j = 0;
    for (; j + 4 <= kg; j += 4) {
      const float* g0 = candidate + j * dim;
      const float* g1 = g0 + dim;
      const float* g2 = g1 + dim;
      const float* g3 = g2 + dim;
      Lanes a0{}, a1{}, a2{}, a3{};
      for (std::size_t d = 0; d < dim; ++d) {
        const Lanes q = load_lanes(qb + d * kLanes);
        a0 += splat(g0[d]) * q;
        a1 += splat(g1[d]) * q;
        a2 += splat(g2[d]) * q;
        a3 += splat(g3[d]) * q;
      }
      best = lane_max(best, lane_max(lane_max(a0, a1), lane_max(a2, a3)));
    }
    for (; j < kg; ++j) {
      const float* g0 = candidate + j * dim;
      Lanes a0{};
      for (std::size_t d = 0; d < dim; ++d) a0 += splat(g0[d]) * load_lanes(qb + d * kLanes);
      best = lane_max(best, a0);
    }
    const std::size_t live = std::min(kLanes, kq_ - b * kLanes);
    for (std::size_t l = 0; l < live; ++l) sum += best[l];
  }
  return sum / static_cast<float>(kq_);
}

float LateInteractionQuery::score(const Matrix& candidate) const {
  require(candidate.cols() == dim_, ErrorKind::kValidation,
          "late interaction dim mismatch: " + std::to_string(dim_) + " vs " +
              std::to_string(candidate.cols()));
  return score(candidate.data(), candidate.rows());
}

float late_interaction_score(const Matrix& query_tokens, const Matrix& gallery_tokens) {
  require(!query_tokens.empty() && !gallery_tokens.empty(), ErrorKind::kValidation,
          "late interaction needs non-empty token sets");
  return LateInteractionQuery(query_tokens).score(gallery_tokens);
}

// --- flat index -----------------------------------------------------------

FlatIndex FlatIndex::build(std::vector<GlobalDescriptor> descriptors) {
  std::sort(descriptors.begin(), descriptors.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  FlatIndex idx;
  if (descriptors.empty()) return idx;
  const std::size_t d = descriptors.front().vector.size();
  idx.method_ = descriptors.front().method;
  idx.vectors_ = Matrix(0, d);
  idx.vectors_.storage().reserve(descriptors.size() * d);
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    const auto& g = descriptors[i];
    require(i == 0 || g.image_id != descriptors[i - 1].image_id, ErrorKind::kValidation,
            "duplicate image id '" + g.image_id + "' in index build");
    require(g.vector.size() == d, ErrorKind::kValidation,
            "descriptor '" + g.image_id + "' has dim " + std::to_string(g.vector.size()) +
                ", expected " + std::to_string(d));
    require(std::abs(l2_norm(g.vector) - 1.0) <= 1e-4, ErrorKind::kValidation,
            "descriptor '" + g.image_id + "' is not unit norm");
    idx.ids_.push_back(g.image_id);
    idx.vectors_.append_row(g.vector);
  }
  return idx;
}

namespace {

float reduce_lanes(detail::Lanes a) {
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
}

// out[i] = dot(q, row i) for n row-major rows, four rows per pass. Each
// lane sums the same products in the same order as dot(), so the results
// are bit-identical to it.
void score_rows(const float* q, const float* rows, std::size_t n, std::size_t d, float* out) {
  using detail::Lanes;
  using detail::load_lanes;
  const std::size_t full = d / detail::kLaneCount * detail::kLaneCount;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float* r0 = rows + i * d;
    const float* r1 = r0 + d;
    const float* r2 = r1 + d;
    const float* r3 = r2 + d;
    Lanes a0{}, a1{}, a2{}, a3{};
    for (std::size_t k = 0; k < full; k += detail::kLaneCount) {
      const Lanes qv = load_lanes(q + k);
      a0 += qv * load_lanes(r0 + k);
      a1 += qv * load_lanes(r1 + k);
      a2 += qv * load_lanes(r2 + k);
      a3 += qv * load_lanes(r3 + k);
    }
    for (std::size_t k = full, l = 0; k < d; ++k, ++l) {
      a0[l] += q[k] * r0[k];
      a1[l] += q[k] * r1[k];
      a2[l] += q[k] * r2[k];
      a3[l] += q[k] * r3[k];
    }
    out[i] = reduce_lanes(a0);
    out[i + 1] = reduce_lanes(a1);
    out[i + 2] = reduce_lanes(a2);
    out[i + 3] = reduce_lanes(a3);
  }
  for (; i < n; ++i) out[i] = dot(q, rows + i * d, d);
}

void check_query(const FlatIndex& idx, std::size_t dim) {
  require(idx.size() > 0, ErrorKind::kValidation, "empty index");
  require(dim == idx.dim(), ErrorKind::kValidation,
          "query dim " + std::to_string(dim) + " does not match index dim " +
              std::to_string(idx.dim()));
}

// Rows are in ascending id order, so row order is the id tie-break.
std::vector<Hit> top_s(const float* scores, std::size_t n, std::size_t s) {
  s = std::min(s, n);
  std::vector<Hit> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = {static_cast<std::uint32_t>(i), scores[i]};
  auto better = [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.row < b.row;
  };
  if (s < n) {
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(s), all.end(), better);
    all.resize(s);
  }
  std::sort(all.begin(), all.end(), better);
  return all;
}

}  // namespace

std::vector<Hit> search_flat(const FlatIndex& idx, std::span<const float> query, std::size_t s) {
  check_query(idx, query.size());
  std::vector<float> scores(idx.size());
  score_rows(query.data(), idx.vectors().data(), idx.size(), idx.dim(), scores.data());
  return top_s(scores.data(), idx.size(), s);
}

std::vector<std::vector<Hit>> search_flat_batch(const FlatIndex& idx, const Matrix& queries,
                                                std::size_t s) {
  check_query(idx, queries.cols());
  const std::size_t n = idx.size(), d = idx.dim(), nq = queries.rows();
  // Row blocks sized to stay cache resident while every query visits them.
  const std::size_t block = std::max<std::size_t>(4, (256 * 1024 / (4 * std::max<std::size_t>(d, 1))) / 4 * 4);
  std::vector<float> scores(nq * n);
  for (std::size_t b = 0; b < n; b += block) {
    const std::size_t len = std::min(block, n - b);
    for (std::size_t q = 0; q < nq; ++q) {
      score_rows(queries.row(q).data(), idx.vectors().row(b).data(), len, d, scores.data() + q * n + b);
    }
  }
  std::vector<std::vector<Hit>> out(nq);
  for (std::size_t q = 0; q < nq; ++q) out[q] = top_s(scores.data() + q * n, n, s);
  return out;
}

void save_index(const FlatIndex& idx, const std::filesystem::path& path) {
  Container c;
  c.header["kind"] = "flat_index";
  c.header["dim"] = idx.dim();
  c.header["count"] = idx.size();
  c.header["method"] = std::string(to_string(idx.method()));
  c.header["ids"] = idx.ids();
  put_f32s(c.payload, idx.vectors().values());
  write_container(path, c);
}

FlatIndex load_index(const std::filesystem::path& path) {
  const auto c = read_container(path, "flat_index");
  FlatIndex idx;
  const auto d = c.header.at("dim").get<std::size_t>();
  const auto n = c.header.at("count").get<std::size_t>();
  idx.ids_ = c.header.at("ids").get<std::vector<std::string>>();
  idx.method_ = parse_pool_method(c.header.at("method").get<std::string>());
  require(idx.ids_.size() == n && c.payload.size() == n * d * 4, ErrorKind::kCorruption,
          path.string() + ": index payload size mismatch");
  idx.vectors_ = Matrix(n, d);
  get_f32s(c.payload.data(), idx.vectors_.storage());
  return idx;
}

// --- run files ------------------------------------------------------------

std::string_view to_string(Stage s) { return s == Stage::kSv ? "sv" : "li"; }

std::string format_score(float score) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, score);
  return std::string(buf, res.ptr);
}

void write_run_tsv(std::span<const RunRanking> runs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kValidation, "cannot create " + path.string());
  for (const auto& run : runs) {
    for (std::size_t r = 0; r < run.items.size(); ++r) {
      const auto& it = run.items[r];
      out << run.query_id << '\t' << (r + 1) << '\t' << it.image_id << '\t'
          << format_score(it.score) << '\t' << to_string(it.stage) << '\n';
    }
  }
  require(out.good(), ErrorKind::kValidation, "write failed on " + path.string());
}

std::vector<RunRanking> read_run_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kValidation, "cannot open run file " + path.string());
  std::vector<RunRanking> runs;
  std::unordered_set<std::string> closed;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) f.push_back(cell);
    require(f.size() == 5, ErrorKind::kValidation, where + "expected 5 tab-separated fields");

    if (runs.empty() || runs.back().query_id != f[0]) {
      if (!runs.empty()) closed.insert(runs.back().query_id);
      require(!closed.contains(f[0]), ErrorKind::kValidation,
              where + "rows for query '" + f[0] + "' are not contiguous");
      runs.push_back({f[0], {}, 0, 0.0, 0.0});
    }
    auto& run = runs.back();
    std::size_t rank = 0;
    const auto rr = std::from_chars(f[1].data(), f[1].data() + f[1].size(), rank);
    require(rr.ec == std::errc{} && rank == run.items.size() + 1, ErrorKind::kValidation,
            where + "ranks must be contiguous from 1");
    float score = 0.0f;
    const auto sr = std::from_chars(f[3].data(), f[3].data() + f[3].size(), score);
    require(sr.ec == std::errc{}, ErrorKind::kValidation, where + "bad score '" + f[3] + "'");
    Stage stage;
    if (f[4] == "sv") {
      stage = Stage::kSv;
    } else if (f[4] == "li") {
      stage = Stage::kLi;
    } else {
      fail(ErrorKind::kValidation, where + "unknown stage '" + f[4] + "'");
    }
    require(run.items.empty() || score <= run.items.back().score, ErrorKind::kValidation,
            where + "scores must be non-increasing");
    run.items.push_back({f[2], score, stage});
    run.shortlist_size = run.items.size();
  }
  return runs;
}

// --- two-stage ------------------------------------------------------------

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct Scored {
  std::uint32_t row;
  float li;
};

void order_final(std::vector<Scored>& v) {
  std::sort(v.begin(), v.end(), [](const Scored& a, const Scored& b) {
    if (a.li != b.li) return a.li > b.li;
    return a.row < b.row;
  });
}

}  // namespace

TwoStageSearcher::TwoStageSearcher(const FlatIndex& index, const MultiVectorStore& store)
    : index_(index), store_(store) {
  require(index.ids() == store.ids(), ErrorKind::kValidation,
          "index and multi-vector store cover different image ids");
}

const MultiVectorStore& TwoStageSearcher::decoded_store() const {
  std::call_once(decoded_once_, [this] {
    if (store_.codec().codec != Codec::kF32) decoded_ = store_.decoded();
  });
  return decoded_ ? *decoded_ : store_;
}

RunRanking TwoStageSearcher::rerank(const std::string& query_id, std::vector<Hit> shortlist,
                                    const Matrix& query_tokens, bool use_cache) const {
  const LateInteractionQuery q(query_tokens);
  require(q.dim() == store_.dim(), ErrorKind::kValidation,
          "query token dim does not match the store");
  const MultiVectorStore& src = use_cache ? decoded_store() : store_;
  std::vector<Scored> scored;
  scored.reserve(shortlist.size());
  Matrix buf;
  for (const auto& h : shortlist) {
    float li;
    if (src.codec().codec == Codec::kF32) {
      li = q.score(src.f32_tokens(h.row), src.token_count(h.row));
    } else {
      src.decode(h.row, buf);
      li = q.score(buf);
    }
    scored.push_back({h.row, li});
  }
  order_final(scored);

  RunRanking run;
  run.query_id = query_id;
  run.shortlist_size = shortlist.size();
  run.items.reserve(scored.size());
  for (const auto& s : scored) run.items.push_back({index_.ids()[s.row], s.li, Stage::kLi});
  return run;
}

RunRanking TwoStageSearcher::rescore(std::vector<Hit> shortlist, const Matrix& query_tokens) const {
  for (const auto& h : shortlist) {
    require(h.row < index_.size(), ErrorKind::kValidation, "shortlist row outside the index");
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto run = rerank({}, std::move(shortlist), query_tokens, false);
  run.stage2_ms = ms_since(t0);
  return run;
}

RunRanking TwoStageSearcher::search(std::span<const float> query_descriptor,
                                    const Matrix& query_tokens, std::size_t s) const {
  require(s >= 1, ErrorKind::kValidation, "shortlist size must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  auto shortlist = search_flat(index_, query_descriptor, s);
  const double stage1 = ms_since(t0);
  const auto t1 = std::chrono::steady_clock::now();
  auto run = rerank({}, std::move(shortlist), query_tokens, false);
  run.stage2_ms = ms_since(t1);
  run.stage1_ms = stage1;
  return run;
}

RunRanking stage1_search(const FlatIndex& idx, std::span<const float> query, std::size_t s) {
  require(s >= 1, ErrorKind::kValidation, "shortlist size must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  auto run = stage1_ranking(idx, search_flat(idx, query, s));
  run.stage1_ms = ms_since(t0);
  return run;
}

RunRanking stage1_ranking(const FlatIndex& idx, const std::vector<Hit>& hits) {
  RunRanking run;
  run.shortlist_size = hits.size();
  run.items.reserve(hits.size());
  for (const auto& h : hits) run.items.push_back({idx.ids()[h.row], h.score, Stage::kSv});
  return run;
}

RunRanking TwoStageSearcher::stage1(std::span<const float> query_descriptor, std::size_t s) const {
  return stage1_search(index_, query_descriptor, s);
}

RunRanking TwoStageSearcher::exhaustive(std::span<const float> query_descriptor,
                                        const Matrix& query_tokens) const {
  const auto t0 = std::chrono::steady_clock::now();
  auto all = search_flat(index_, query_descriptor, index_.size());
  const double stage1 = ms_since(t0);
  const auto t1 = std::chrono::steady_clock::now();
  auto run = rerank({}, std::move(all), query_tokens, true);
  run.stage1_ms = stage1;
  run.stage2_ms = ms_since(t1);
  return run;
}

RunRanking two_stage_search(const FlatIndex& index, const MultiVectorStore& store,
                            std::span<const float> query_descriptor, const Matrix& query_tokens,
                            std::size_t s) {
  return TwoStageSearcher(index, store).search(query_descriptor, query_tokens, s);
}

RunRanking exhaustive_search(const MultiVectorStore& store, const Matrix& query_tokens) {
  require(store.size() > 0, ErrorKind::kValidation, "empty multi-vector store");
  const LateInteractionQuery q(query_tokens);
  require(q.dim() == store.dim(), ErrorKind::kValidation,
          "query token dim does not match the store");
  const MultiVectorStore dec = store.decoded();
  std::vector<Scored> scored(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    scored[i] = {static_cast<std::uint32_t>(i), q.score(dec.f32_tokens(i), dec.token_count(i))};
  }
  order_final(scored);
  RunRanking run;
  run.shortlist_size = scored.size();
  for (const auto& s : scored) run.items.push_back({store.ids()[s.row], s.li, Stage::kLi});
  return run;
}

}  // namespace tokenrank
