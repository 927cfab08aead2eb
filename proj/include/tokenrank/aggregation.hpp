#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenrank/token_store.hpp"

namespace tokenrank {

enum class SeedStrategy {
  kAttention,   // top-K by CLS->patch attention
  kFps,         // farthest-point sampling in cosine space
  kNorm,        // top-K by pre-normalization norm
  kNormXAttn,   // top-K by norm * attention
  kRandom,      // seeded draw without replacement
  kGrid,        // stride over flattened token order
  kClsSim,      // most similar to CLS
  kClsDist,     // least similar to CLS
};

std::string_view to_string(SeedStrategy s);
SeedStrategy parse_seed_strategy(std::string_view s);

struct SeedSelection {
  SeedStrategy strategy = SeedStrategy::kFps;
  std::size_t k = 16;
  std::uint64_t rng_seed = 0;  // random strategy only
};

/// Returns K distinct token indices in selection order (seed rank order).
/// Ties break toward the lowest token index.
std::vector<std::uint32_t> select_seeds(const TokenSet& ts, const SeedSelection& sel);

enum class AssignMode { kHardTop1, kSoftTop2, kSoftTop4, kGroupDense };

std::string_view to_string(AssignMode m);
AssignMode parse_assign_mode(std::string_view s);

/// Token-to-seed weights for every non-seed token, stored CSR-style.
/// Cluster numbers are seed ranks (positions in the seed list).
struct Assignment {
  AssignMode mode = AssignMode::kHardTop1;
  double tau = 1.0;
  std::size_t k = 0;
  std::vector<std::uint32_t> tokens;   // non-seed token indices, ascending
  std::vector<std::uint32_t> offsets;  // tokens.size() + 1 entries
  std::vector<std::uint32_t> clusters;
  std::vector<double> weights;
  /// Token-to-seed cosine evaluations performed (N * K).
  std::uint64_t similarity_evaluations = 0;
};

/// hard_top1: nearest seed, ties to the lower seed rank. soft_top{2,4}:
/// softmax(cos / tau) over the M most similar seeds. group_dense: the same
/// softmax over all seeds. Seeds themselves are never assigned.
Assignment assign_tokens(const TokenSet& ts, std::span<const std::uint32_t> seeds,
                         AssignMode mode, double tau = 1.0);

struct Provenance {
  std::string method = "instance";  // instance | select | kmeans | medoid | vlad
  SeedStrategy strategy = SeedStrategy::kFps;
  AssignMode mode = AssignMode::kHardTop1;
  std::size_t k = 0;
  double tau = 1.0;
  std::uint64_t rng_seed = 0;
};

struct InstanceTokenSet {
  std::string image_id;
  Matrix tokens;                      // K x D, unit rows
  std::vector<std::uint32_t> seeds;   // empty for centroid variants
  Provenance provenance;

  std::size_t size() const noexcept { return tokens.rows(); }
  std::size_t dim() const noexcept { return tokens.cols(); }
};

/// Seed-plus-mean aggregation:
///   z_k = l2(t_{s_k} + sum_i w_ik t_i / max(sum_i w_ik, 1))
/// An empty cluster returns the seed row bit-for-bit. Throws kDegenerate
/// when the bracket vanishes.
InstanceTokenSet aggregate(const TokenSet& ts, std::span<const std::uint32_t> seeds,
                           const Assignment& asg);

/// Raw selection baseline: the seed tokens themselves.
InstanceTokenSet select_tokens(const TokenSet& ts, std::span<const std::uint32_t> seeds);

enum class KMeansVariant { kCentroid, kMedoid };

/// Per-image K-means baseline. Seeded by rng_seed ^ fnv1a(image_id);
/// centroid variant returns L2-normalized cluster means, medoid variant
/// the member token closest to each mean.
InstanceTokenSet kmeans_per_image(const TokenSet& ts, std::size_t k, int iters,
                                  std::uint64_t rng_seed, KMeansVariant variant);

/// Full pipeline used by the CLI: select, assign, aggregate.
struct AggregationConfig {
  SeedSelection seeds;
  AssignMode mode = AssignMode::kHardTop1;
  double tau = 1.0;
};

InstanceTokenSet build_instance_tokens(const TokenSet& ts, const AggregationConfig& cfg,
                                       std::uint64_t* similarity_evaluations = nullptr);

/// Instance tokens as a CBTK record (N = K, no optional channels).
TokenSet to_token_set(const InstanceTokenSet& its);
InstanceTokenSet instance_from_token_set(const TokenSet& ts);

}  // namespace tokenrank
