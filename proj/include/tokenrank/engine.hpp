#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenrank/multivector_store.hpp"
#include "tokenrank/pooling.hpp"

namespace tokenrank {

// ---------------------------------------------------------------------------
// Late interaction
// ---------------------------------------------------------------------------

/// A query token set prepared for repeated MaxSim scoring. Tokens are kept
/// transposed so one pass over a candidate token updates every query
/// token's running max. Every inner product is an f32 sum in ascending
/// dimension order; the outer sum runs over query tokens in index order.
class LateInteractionQuery {
 public:
  explicit LateInteractionQuery(const Matrix& query_tokens);

  std::size_t size() const noexcept { return kq_; }
  std::size_t dim() const noexcept { return dim_; }

  /// s = (1/Kq) sum_i max_j <q_i, g_j> over kg row-major candidate rows.
  float score(const float* candidate, std::size_t kg) const;
  float score(const Matrix& candidate) const;

 private:
  static constexpr std::size_t kLanes = 8;
  std::size_t kq_ = 0;
  std::size_t padded_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> transposed_;  // padded / 8 blocks of dim x 8
};

/// Throws kValidation on empty sets or dim mismatch. Asymmetric in its
/// arguments.
float late_interaction_score(const Matrix& query_tokens, const Matrix& gallery_tokens);

// ---------------------------------------------------------------------------
// Stage 1: exact flat inner-product index
// ---------------------------------------------------------------------------

class FlatIndex {
 public:
  FlatIndex() = default;

  /// Rows sorted by ascending image id. Throws on duplicate ids, mixed
  /// dims, or rows that are not unit norm (1 +- 1e-4).
  static FlatIndex build(std::vector<GlobalDescriptor> descriptors);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return vectors_.cols(); }
  PoolMethod method() const noexcept { return method_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const Matrix& vectors() const noexcept { return vectors_; }

  friend bool operator==(const FlatIndex&, const FlatIndex&) = default;

 private:
  std::vector<std::string> ids_;
  Matrix vectors_;
  PoolMethod method_ = PoolMethod::kMean;

  friend FlatIndex load_index(const std::filesystem::path&);
};

struct Hit {
  std::uint32_t row = 0;  // position in the index (ascending id order)
  float score = 0.0f;
};

/// Exact top-S by inner product, ties by ascending image id. S is clamped
/// to the index size. Throws on an empty index or dim mismatch.
std::vector<Hit> search_flat(const FlatIndex& idx, std::span<const float> query, std::size_t s);

/// search_flat for every row of `queries`. The index is scanned once in
/// cache-sized blocks shared by all queries; results equal per-query calls.
std::vector<std::vector<Hit>> search_flat_batch(const FlatIndex& idx, const Matrix& queries,
                                                std::size_t s);

void save_index(const FlatIndex& idx, const std::filesystem::path& path);
FlatIndex load_index(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

enum class Stage { kSv, kLi };

std::string_view to_string(Stage s);

struct RankedItem {
  std::string image_id;
  float score = 0.0f;
  Stage stage = Stage::kLi;
};

/// One query's ranked list. Ranks are positions + 1.
struct RunRanking {
  std::string query_id;
  std::vector<RankedItem> items;
  std::size_t shortlist_size = 0;
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
};

/// TSV rows: query_id, rank, image_id, score, stage. Scores are written in
/// shortest round-trip form.
void write_run_tsv(std::span<const RunRanking> runs, const std::filesystem::path& path);
std::vector<RunRanking> read_run_tsv(const std::filesystem::path& path);
std::string format_score(float score);

/// search_flat as a timed ranking tagged sv.
RunRanking stage1_search(const FlatIndex& idx, std::span<const float> query, std::size_t s);

/// Hits as a ranking tagged sv.
RunRanking stage1_ranking(const FlatIndex& idx, const std::vector<Hit>& hits);

// ---------------------------------------------------------------------------
// Two-stage search
// ---------------------------------------------------------------------------

/// Binds a Stage-1 index to the Stage-2 store; both must cover the same ids.
/// Immutable and safe to share between threads.
class TwoStageSearcher {
 public:
  TwoStageSearcher(const FlatIndex& index, const MultiVectorStore& store);

  /// Stage-1 shortlist of size S, rescored by late interaction on decoded
  /// tokens. Order: LI desc, then image id asc.
  RunRanking search(std::span<const float> query_descriptor, const Matrix& query_tokens,
                    std::size_t s) const;

  /// Stage-1 ranking only (stage tag sv).
  RunRanking stage1(std::span<const float> query_descriptor, std::size_t s) const;

  /// Late interaction over the whole gallery, ordered like search().
  RunRanking exhaustive(std::span<const float> query_descriptor, const Matrix& query_tokens) const;

  /// Stage 2 over a precomputed Stage-1 shortlist (index rows).
  RunRanking rescore(std::vector<Hit> shortlist, const Matrix& query_tokens) const;

  std::size_t gallery_size() const noexcept { return index_.size(); }
  const FlatIndex& index() const noexcept { return index_; }

 private:
  const FlatIndex& index_;
  const MultiVectorStore& store_;
  mutable std::once_flag decoded_once_;
  mutable std::optional<MultiVectorStore> decoded_;

  const MultiVectorStore& decoded_store() const;
  RunRanking rerank(const std::string& query_id, std::vector<Hit> shortlist,
                    const Matrix& query_tokens, bool use_cache) const;
};

/// Convenience wrapper over TwoStageSearcher::search.
RunRanking two_stage_search(const FlatIndex& index, const MultiVectorStore& store,
                            std::span<const float> query_descriptor, const Matrix& query_tokens,
                            std::size_t s);

/// Late interaction against every store entry, ties by ascending id. For
/// use without a Stage-1 index.
RunRanking exhaustive_search(const MultiVectorStore& store, const Matrix& query_tokens);

}  // namespace tokenrank
