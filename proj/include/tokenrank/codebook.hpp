#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "tokenrank/aggregation.hpp"
#include "tokenrank/pooling.hpp"
#include "tokenrank/token_store.hpp"

namespace tokenrank {

/// Global dictionary for VLAD.
struct Codebook {
  Matrix centroids;  // K x D
  std::size_t sample_size = 0;
  std::uint64_t rng_seed = 0;
  int iterations = 0;
  std::vector<double> sse_history;

  std::size_t k() const noexcept { return centroids.rows(); }
  std::size_t dim() const noexcept { return centroids.cols(); }
};

inline constexpr std::size_t kDefaultTokenBudget = 500'000;

/// Uniform sample without replacement of at most `budget` tokens across
/// the given token sets (selection sampling, output in input order).
Matrix sample_tokens(std::span<const TokenSet> sets, std::size_t budget, std::uint64_t seed);

Codebook train_codebook(const Matrix& token_sample, std::size_t k, int iters,
                        std::uint64_t rng_seed);

void save_codebook(const Codebook& cb, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);

/// Mean-centred PCA with whitening y_j = c_j . (x - mean) / sqrt(lambda_j + floor).
struct PcaModel {
  std::vector<float> mean;        // in_dim
  Matrix components;              // out_dim x in_dim, orthonormal rows
  std::vector<float> eigenvalues; // out_dim, descending, clamped at 0
  double floor = 1e-8;

  std::size_t in_dim() const noexcept { return components.cols(); }
  std::size_t out_dim() const noexcept { return components.rows(); }

  std::vector<float> transform(std::span<const float> x) const;
  std::vector<float> inverse_transform(std::span<const float> y) const;
};

inline constexpr std::size_t kDefaultPcaDim = 384;

/// Eigendecomposition of the sample covariance (or of the Gram matrix when
/// there are fewer samples than input dims). Each component's largest-
/// magnitude entry is made positive. Needs rows >= out_dim.
PcaModel fit_pca(const Matrix& descriptors, std::size_t out_dim = kDefaultPcaDim);

void save_pca(const PcaModel& pca, const std::filesystem::path& path);
PcaModel load_pca(const std::filesystem::path& path);

struct VladOptions {
  /// Unset = hard nearest-centroid; set = softmax(alpha * cos) weights.
  std::optional<double> soft_alpha;
};

inline constexpr double kDefaultSoftAlpha = 10.0;

/// Nearest centroid by cosine for every token (ties to the lower index).
std::vector<std::uint32_t> vlad_assign(const TokenSet& ts, const Codebook& cb);

/// Per-cluster residual sums, each block L2-normalized; empty or
/// cancelling blocks stay exactly zero. Returns K x D.
Matrix vlad_residuals(const TokenSet& ts, const Codebook& cb, const VladOptions& opts);

/// Concatenated, L2-normalized residual blocks (K*D). Input to fit_pca.
std::vector<float> vlad_flat(const TokenSet& ts, const Codebook& cb, const VladOptions& opts);

/// Single-vector VLAD: flat residuals through PCA whitening, then L2.
GlobalDescriptor vlad_encode_sv(const TokenSet& ts, const Codebook& cb, const PcaModel& pca,
                                const VladOptions& opts);

/// Multi-vector VLAD: the K residual blocks as an instance-token set. Zero
/// blocks are replaced by the unit centroid direction so every row is unit
/// norm; their number is reported through `degenerate_blocks`.
InstanceTokenSet vlad_encode_mv(const TokenSet& ts, const Codebook& cb, const VladOptions& opts,
                                std::size_t* degenerate_blocks = nullptr);

}  // namespace tokenrank
