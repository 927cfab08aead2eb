#include "tokenrank/kmeans.hpp"

#include <algorithm>
#include <limits>

#include "lanes.hpp"

namespace tokenrank {

namespace {

Matrix plus_plus_init(const Matrix& data, std::size_t k, Rng& rng) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  Matrix centroids(k, d);
  std::vector<bool> chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  std::size_t pick = rng.uniform_index(n);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += d2[i];
      pick = n;
      if (total > 0.0) {
        const double target = rng.uniform01() * total;
        double cum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          cum += d2[i];
          pick = i;
          if (cum > target) break;
        }
      }
      if (pick == n) {
        // Every remaining point coincides with a centroid.
        pick = 0;
        while (pick < n && chosen[pick]) ++pick;
        if (pick == n) pick = c % n;
      }
    }
    chosen[pick] = true;
    std::copy_n(data.row(pick).data(), d, centroids.row(c).data());
    for (std::size_t i = 0; i < n; ++i) {
      const double dist = squared_distance(data.row(i).data(), centroids.row(c).data(), d);
      d2[i] = std::min(d2[i], dist);
    }
  }
  return centroids;
}

void recompute_means(const Matrix& data, const std::vector<std::uint32_t>& labels,
                     Matrix& centroids, std::vector<std::size_t>& counts) {
  const std::size_t d = data.cols();
  const std::size_t k = centroids.rows();
  std::vector<double> acc(k * d, 0.0);
  counts.assign(k, 0);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto r = data.row(i);
    double* a = acc.data() + labels[i] * d;
    for (std::size_t j = 0; j < d; ++j) a[j] += r[j];
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    auto row = centroids.row(c);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(acc[c * d + j] / counts[c]);
  }
}

// Centroids regrouped in blocks of eight as dim x 8, padding lanes at
// +inf so they never win.
std::vector<float> centroid_blocks(const Matrix& centroids) {
  const std::size_t k = centroids.rows(), d = centroids.cols();
  const std::size_t blocks = (k + detail::kLaneCount - 1) / detail::kLaneCount;
  std::vector<float> out(blocks * d * detail::kLaneCount, std::numeric_limits<float>::infinity());
  for (std::size_t c = 0; c < k; ++c) {
    float* blk = out.data() + (c / detail::kLaneCount) * d * detail::kLaneCount;
    for (std::size_t j = 0; j < d; ++j) blk[j * detail::kLaneCount + c % detail::kLaneCount] = centroids.row(c)[j];
  }
  return out;
}

// Nearest centroid by squared distance summed over ascending dimensions;
// ties go to the lower centroid index.
std::uint32_t nearest(const float* x, const std::vector<float>& blocks, std::size_t d,
                      float& best_d) {
  using detail::Lanes;
  typedef int Index __attribute__((vector_size(32)));
  constexpr std::size_t L = detail::kLaneCount;
  Lanes best_v = detail::splat(std::numeric_limits<float>::infinity());
  Index best_i{0, 1, 2, 3, 4, 5, 6, 7};
  Index idx{0, 1, 2, 3, 4, 5, 6, 7};
  const std::size_t nblk = blocks.size() / (d * L);
  for (std::size_t b = 0; b < nblk; ++b, idx += static_cast<int>(L)) {
    const float* cb = blocks.data() + b * d * L;
    Lanes acc{};
    for (std::size_t j = 0; j < d; ++j) {
      const Lanes diff = detail::splat(x[j]) - detail::load_lanes(cb + j * L);
      acc += diff * diff;
    }
    const auto better = acc < best_v;
    best_v = better ? acc : best_v;
    best_i = better ? idx : best_i;
  }
  std::uint32_t best = static_cast<std::uint32_t>(best_i[0]);
  best_d = best_v[0];
  for (std::size_t l = 1; l < L; ++l) {
    const auto i = static_cast<std::uint32_t>(best_i[l]);
    if (best_v[l] < best_d || (best_v[l] == best_d && i < best)) {
      best_d = best_v[l];
      best = i;
    }
  }
  return best;
}

}  // namespace

KMeansResult lloyd_kmeans(const Matrix& data, const KMeansOptions& opts) {
  const std::size_t n = data.rows();
  const std::size_t d = data.cols();
  const std::size_t k = opts.k;
  require(k >= 1, ErrorKind::kValidation, "k-means needs k >= 1");
  require(n >= k, ErrorKind::kValidation,
          "k-means needs at least k=" + std::to_string(k) + " points, got " + std::to_string(n));

  Rng rng(opts.seed);
  KMeansResult res;
  res.centroids = plus_plus_init(data, k, rng);
  res.labels.assign(n, 0);
  std::vector<float> own_dist(n, 0.0f);
  std::vector<std::size_t> counts;

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    const std::vector<std::uint32_t> previous = res.labels;
    const std::size_t chunk = 4096;
    const auto blocks = centroid_blocks(res.centroids);
    parallel_for((n + chunk - 1) / chunk, opts.threads, [&](std::size_t blk) {
      const std::size_t hi = std::min(n, (blk + 1) * chunk);
      for (std::size_t i = blk * chunk; i < hi; ++i) {
        float best_d = 0.0f;
        res.labels[i] = nearest(data.row(i).data(), blocks, d, best_d);
        own_dist[i] = best_d;
      }
    });
    bool changed = iter == 0 || previous != res.labels;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) sse += own_dist[i];
    res.sse_history.push_back(sse);
    res.iterations = iter + 1;
    if (!changed) {
      res.converged = true;
      break;
    }

    recompute_means(data, res.labels, res.centroids, counts);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t victim = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.labels[i]] <= 1) continue;
        if (victim == n || own_dist[i] > own_dist[victim]) victim = i;
      }
      if (victim == n) continue;  // cannot happen while n >= k
      const std::uint32_t donor = res.labels[victim];
      res.labels[victim] = static_cast<std::uint32_t>(c);
      own_dist[victim] = 0.0f;
      --counts[donor];
      counts[c] = 1;
      recompute_means(data, res.labels, res.centroids, counts);
    }
  }
  return res;
}

}  // namespace tokenrank
