#pragma once

#include <cstdint>
#include <vector>

#include "tokenrank/core.hpp"

namespace tokenrank {

struct KMeansOptions {
  std::size_t k = 1;
  int max_iters = 20;
  std::uint64_t seed = 0;
  unsigned threads = 1;  // assignment step workers; results do not depend on it
};

struct KMeansResult {
  Matrix centroids;                  // k x dim, unnormalized means
  std::vector<std::uint32_t> labels; // per input row
  /// Within-cluster SSE measured at each assignment step.
  std::vector<double> sse_history;
  int iterations = 0;
  bool converged = false;
};

/// Squared Euclidean distance with a fixed summation order: eight
/// interleaved partial sums combined pairwise.
inline float squared_distance(const float* a, const float* b, std::size_t n) noexcept {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const float t = a[i + l] - b[i + l];
      acc[l] += t * t;
    }
  }
  for (std::size_t l = 0; i < n; ++i, ++l) {
    const float t = a[i] - b[i];
    acc[l] += t * t;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// k-means++ seeding followed by Lloyd iterations under squared Euclidean
/// distance (assignment distances are summed over ascending dimensions). Stops early once an assignment step changes no label. Empty
/// clusters are refilled with the point farthest from its own centroid.
/// Ties always resolve to the lowest index. Requires rows >= k.
KMeansResult lloyd_kmeans(const Matrix& data, const KMeansOptions& opts);

}  // namespace tokenrank
