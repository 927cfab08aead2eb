#include "tokenrank/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tokenrank/kmeans.hpp"

namespace tokenrank {

std::string_view to_string(SeedStrategy s) {
  switch (s) {
    case SeedStrategy::kAttention: return "attention";
    case SeedStrategy::kFps: return "fps";
    case SeedStrategy::kNorm: return "norm";
    case SeedStrategy::kNormXAttn: return "norm_x_attn";
    case SeedStrategy::kRandom: return "random";
    case SeedStrategy::kGrid: return "grid";
    case SeedStrategy::kClsSim: return "cls_sim";
    case SeedStrategy::kClsDist: return "cls_dist";
  }
  return "?";
}

SeedStrategy parse_seed_strategy(std::string_view s) {
  for (auto v : {SeedStrategy::kAttention, SeedStrategy::kFps, SeedStrategy::kNorm,
                 SeedStrategy::kNormXAttn, SeedStrategy::kRandom, SeedStrategy::kGrid,
                 SeedStrategy::kClsSim, SeedStrategy::kClsDist}) {
    if (to_string(v) == s) return v;
  }
  fail(ErrorKind::kValidation, "unknown seed strategy '" + std::string(s) + "'");
}

std::string_view to_string(AssignMode m) {
  switch (m) {
    case AssignMode::kHardTop1: return "hard_top1";
    case AssignMode::kSoftTop2: return "soft_top2";
    case AssignMode::kSoftTop4: return "soft_top4";
    case AssignMode::kGroupDense: return "group_dense";
  }
  return "?";
}

AssignMode parse_assign_mode(std::string_view s) {
  for (auto v : {AssignMode::kHardTop1, AssignMode::kSoftTop2, AssignMode::kSoftTop4,
                 AssignMode::kGroupDense}) {
    if (to_string(v) == s) return v;
  }
  fail(ErrorKind::kValidation, "unknown assignment mode '" + std::string(s) + "'");
}

namespace {

// Indices of the k largest scores; ties toward the lower index.
std::vector<std::uint32_t> top_k_desc(const std::vector<double>& score, std::size_t k) {
  std::vector<std::uint32_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (score[a] != score[b]) return score[a] > score[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

const std::vector<float>& need_attention(const TokenSet& ts, SeedStrategy s) {
  require(ts.attention.has_value(), ErrorKind::kValidation,
          std::string(to_string(s)) + " seeds need attention, '" + ts.image_id + "' has none");
  return *ts.attention;
}

const std::vector<float>& need_cls(const TokenSet& ts, SeedStrategy s) {
  require(ts.cls.has_value(), ErrorKind::kValidation,
          std::string(to_string(s)) + " seeds need a CLS vector, '" + ts.image_id + "' has none");
  return *ts.cls;
}

std::size_t argmax_lowest(const std::vector<float>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::vector<std::uint32_t> farthest_point_seeds(const TokenSet& ts, std::size_t k) {
  const std::size_t n = ts.size();
  const std::size_t d = ts.dim();
  std::size_t start = 0;
  if (ts.attention) {
    start = argmax_lowest(*ts.attention);
  } else if (!ts.raw_norms.empty()) {
    start = argmax_lowest(ts.raw_norms);
  }

  std::vector<std::uint32_t> out{static_cast<std::uint32_t>(start)};
  std::vector<bool> chosen(n, false);
  chosen[start] = true;
  std::vector<float> min_dist(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    min_dist[i] = 1.0f - dot(ts.tokens.row(i).data(), ts.tokens.row(start).data(), d);
  }
  while (out.size() < k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      if (best == n || min_dist[i] > min_dist[best]) best = i;
    }
    chosen[best] = true;
    out.push_back(static_cast<std::uint32_t>(best));
    const float* b = ts.tokens.row(best).data();
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], 1.0f - dot(ts.tokens.row(i).data(), b, d));
    }
  }
  return out;
}

std::vector<std::uint32_t> grid_seeds(std::size_t n, std::size_t k) {
  std::vector<bool> used(n, false);
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < k; ++i) {
    // round(i * n / k), halves rounded up
    const std::size_t idx = (2 * i * n + k) / (2 * k);
    if (!used[idx]) {
      used[idx] = true;
      out.push_back(static_cast<std::uint32_t>(idx));
    }
  }
  for (std::size_t i = 0; i < n && out.size() < k; ++i) {
    if (!used[i]) {
      used[i] = true;
      out.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return out;
}

std::uint64_t image_seed(std::uint64_t rng_seed, const std::string& image_id) {
  return rng_seed ^ fnv1a64(image_id);
}

}  // namespace

std::vector<std::uint32_t> select_seeds(const TokenSet& ts, const SeedSelection& sel) {
  const std::size_t n = ts.size();
  const std::size_t k = sel.k;
  require(k >= 1, ErrorKind::kValidation, "K must be >= 1");
  require(k <= n, ErrorKind::kValidation,
          "K=" + std::to_string(k) + " exceeds the " + std::to_string(n) +
              " tokens of '" + ts.image_id + "'");

  std::vector<double> score(n);
  switch (sel.strategy) {
    case SeedStrategy::kAttention: {
      const auto& a = need_attention(ts, sel.strategy);
      for (std::size_t i = 0; i < n; ++i) score[i] = a[i];
      return top_k_desc(score, k);
    }
    case SeedStrategy::kNorm:
      for (std::size_t i = 0; i < n; ++i) score[i] = ts.raw_norms.at(i);
      return top_k_desc(score, k);
    case SeedStrategy::kNormXAttn: {
      const auto& a = need_attention(ts, sel.strategy);
      for (std::size_t i = 0; i < n; ++i) {
        score[i] = static_cast<double>(ts.raw_norms.at(i)) * a[i];
      }
      return top_k_desc(score, k);
    }
    case SeedStrategy::kClsSim:
    case SeedStrategy::kClsDist: {
      const auto& cls = need_cls(ts, sel.strategy);
      const double sign = sel.strategy == SeedStrategy::kClsSim ? 1.0 : -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        score[i] = sign * dot(ts.tokens.row(i).data(), cls.data(), ts.dim());
      }
      return top_k_desc(score, k);
    }
    case SeedStrategy::kRandom: {
      std::vector<std::uint32_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0u);
      Rng rng(image_seed(sel.rng_seed, ts.image_id));
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.uniform_index(n - i);
        std::swap(perm[i], perm[j]);
      }
      perm.resize(k);
      return perm;
    }
    case SeedStrategy::kGrid:
      return grid_seeds(n, k);
    case SeedStrategy::kFps:
      return farthest_point_seeds(ts, k);
  }
  fail(ErrorKind::kValidation, "unhandled seed strategy");
}

Assignment assign_tokens(const TokenSet& ts, std::span<const std::uint32_t> seeds,
                         AssignMode mode, double tau) {
  const std::size_t n = ts.size();
  const std::size_t d = ts.dim();
  const std::size_t k = seeds.size();
  require(k >= 1, ErrorKind::kValidation, "assignment needs at least one seed");
  std::vector<bool> is_seed(n, false);
  for (auto s : seeds) {
    require(s < n, ErrorKind::kValidation, "seed index out of range");
    require(!is_seed[s], ErrorKind::kValidation, "duplicate seed index");
    is_seed[s] = true;
  }
  std::size_t m = 1;
  switch (mode) {
    case AssignMode::kHardTop1: m = 1; break;
    case AssignMode::kSoftTop2: m = 2; break;
    case AssignMode::kSoftTop4: m = 4; break;
    case AssignMode::kGroupDense: m = k; break;
  }
  if (mode != AssignMode::kHardTop1) {
    require(tau > 0.0 && std::isfinite(tau), ErrorKind::kValidation,
            "temperature must be > 0");
    require(m <= k, ErrorKind::kValidation,
            std::string(to_string(mode)) + " needs at least " + std::to_string(m) + " seeds");
  }

  Assignment asg;
  asg.mode = mode;
  asg.tau = tau;
  asg.k = k;
  asg.offsets.push_back(0);

  // Full N x K similarity table, seeds included, so the offline cost is
  // exactly N * K evaluations.
  std::vector<float> sim(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const float* t = ts.tokens.row(i).data();
    for (std::size_t c = 0; c < k; ++c) sim[i * k + c] = dot(t, ts.tokens.row(seeds[c]).data(), d);
  }
  asg.similarity_evaluations = static_cast<std::uint64_t>(n) * k;

  std::vector<std::uint32_t> order(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (is_seed[i]) continue;
    const float* row = sim.data() + i * k;
    asg.tokens.push_back(static_cast<std::uint32_t>(i));
    if (mode == AssignMode::kHardTop1) {
      std::uint32_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (row[c] > row[best]) best = static_cast<std::uint32_t>(c);
      }
      asg.clusters.push_back(best);
      asg.weights.push_back(1.0);
    } else {
      std::iota(order.begin(), order.end(), 0u);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                        [&](std::uint32_t a, std::uint32_t b) {
                          if (row[a] != row[b]) return row[a] > row[b];
                          return a < b;
                        });
      // Softmax shifted by the top similarity for stability.
      const double top = row[order[0]];
      double total = 0.0;
      std::vector<double> w(m);
      for (std::size_t j = 0; j < m; ++j) {
        w[j] = std::exp((row[order[j]] - top) / tau);
        total += w[j];
      }
      for (std::size_t j = 0; j < m; ++j) {
        asg.clusters.push_back(order[j]);
        asg.weights.push_back(w[j] / total);
      }
    }
    asg.offsets.push_back(static_cast<std::uint32_t>(asg.clusters.size()));
  }
  return asg;
}

InstanceTokenSet aggregate(const TokenSet& ts, std::span<const std::uint32_t> seeds,
                           const Assignment& asg) {
  const std::size_t d = ts.dim();
  const std::size_t k = seeds.size();
  require(asg.k == k, ErrorKind::kValidation, "assignment was built for a different seed set");
  require(asg.offsets.size() == asg.tokens.size() + 1, ErrorKind::kValidation,
          "malformed assignment");

  std::vector<double> sums(k * d, 0.0);
  std::vector<double> mass(k, 0.0);
  for (std::size_t t = 0; t < asg.tokens.size(); ++t) {
    const auto row = ts.tokens.row(asg.tokens[t]);
    for (std::uint32_t e = asg.offsets[t]; e < asg.offsets[t + 1]; ++e) {
      const std::uint32_t c = asg.clusters[e];
      const double w = asg.weights[e];
      double* acc = sums.data() + c * d;
      for (std::size_t j = 0; j < d; ++j) acc[j] += w * row[j];
      mass[c] += w;
    }
  }

  InstanceTokenSet out;
  out.image_id = ts.image_id;
  out.tokens = Matrix(k, d);
  out.seeds.assign(seeds.begin(), seeds.end());
  out.provenance.mode = asg.mode;
  out.provenance.tau = asg.tau;
  out.provenance.k = k;
  constexpr double kEpsilon = 1.0;
  for (std::size_t c = 0; c < k; ++c) {
    const auto seed = ts.tokens.row(seeds[c]);
    auto z = out.tokens.row(c);
    if (mass[c] == 0.0) {
      std::copy(seed.begin(), seed.end(), z.begin());
      continue;
    }
    const double denom = std::max(mass[c], kEpsilon);
    std::vector<double> v(d);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = seed[j] + sums[c * d + j] / denom;
      norm2 += v[j] * v[j];
    }
    const double norm = std::sqrt(norm2);
    require(norm > 1e-6, ErrorKind::kDegenerate,
            "degenerate instance token " + std::to_string(c) + " in '" + ts.image_id + "'");
    for (std::size_t j = 0; j < d; ++j) z[j] = static_cast<float>(v[j] / norm);
  }
  return out;
}

InstanceTokenSet select_tokens(const TokenSet& ts, std::span<const std::uint32_t> seeds) {
  InstanceTokenSet out;
  out.image_id = ts.image_id;
  out.tokens = Matrix(seeds.size(), ts.dim());
  out.seeds.assign(seeds.begin(), seeds.end());
  out.provenance.method = "select";
  out.provenance.k = seeds.size();
  for (std::size_t c = 0; c < seeds.size(); ++c) {
    const auto r = ts.tokens.row(seeds[c]);
    std::copy(r.begin(), r.end(), out.tokens.row(c).begin());
  }
  return out;
}

InstanceTokenSet kmeans_per_image(const TokenSet& ts, std::size_t k, int iters,
                                  std::uint64_t rng_seed, KMeansVariant variant) {
  require(k >= 1 && k <= ts.size(), ErrorKind::kValidation,
          "K=" + std::to_string(k) + " exceeds the " + std::to_string(ts.size()) +
              " tokens of '" + ts.image_id + "'");
  const auto km = lloyd_kmeans(ts.tokens, {k, iters, image_seed(rng_seed, ts.image_id)});
  const std::size_t d = ts.dim();

  InstanceTokenSet out;
  out.image_id = ts.image_id;
  out.tokens = Matrix(k, d);
  out.provenance.method = variant == KMeansVariant::kCentroid ? "kmeans" : "medoid";
  out.provenance.k = k;
  out.provenance.rng_seed = rng_seed;
  for (std::size_t c = 0; c < k; ++c) {
    auto z = out.tokens.row(c);
    const auto mean = km.centroids.row(c);
    if (variant == KMeansVariant::kCentroid) {
      std::copy(mean.begin(), mean.end(), z.begin());
      require(normalize(z, 1e-6), ErrorKind::kDegenerate,
              "degenerate k-means centroid " + std::to_string(c) + " in '" + ts.image_id + "'");
    } else {
      std::size_t best = ts.size();
      float best_d = 0.0f;
      for (std::size_t i = 0; i < ts.size(); ++i) {
        if (km.labels[i] != c) continue;
        const float dist = squared_distance(ts.tokens.row(i).data(), mean.data(), d);
        if (best == ts.size() || dist < best_d) {
          best = i;
          best_d = dist;
        }
      }
      const auto r = ts.tokens.row(best);
      std::copy(r.begin(), r.end(), z.begin());
      out.seeds.push_back(static_cast<std::uint32_t>(best));
    }
  }
  return out;
}

InstanceTokenSet build_instance_tokens(const TokenSet& ts, const AggregationConfig& cfg,
                                       std::uint64_t* similarity_evaluations) {
  const auto seeds = select_seeds(ts, cfg.seeds);
  const auto asg = assign_tokens(ts, seeds, cfg.mode, cfg.tau);
  auto out = aggregate(ts, seeds, asg);
  out.provenance.strategy = cfg.seeds.strategy;
  out.provenance.rng_seed = cfg.seeds.rng_seed;
  if (similarity_evaluations) *similarity_evaluations = asg.similarity_evaluations;
  return out;
}

TokenSet to_token_set(const InstanceTokenSet& its) {
  TokenSet ts;
  ts.image_id = its.image_id;
  ts.tokens = its.tokens;
  ts.raw_norms.resize(its.size());
  for (std::size_t i = 0; i < its.size(); ++i) {
    ts.raw_norms[i] = static_cast<float>(l2_norm(its.tokens.row(i)));
  }
  return ts;
}

InstanceTokenSet instance_from_token_set(const TokenSet& ts) {
  InstanceTokenSet its;
  its.image_id = ts.image_id;
  its.tokens = ts.tokens;
  its.provenance.k = ts.size();
  return its;
}

}  // namespace tokenrank
