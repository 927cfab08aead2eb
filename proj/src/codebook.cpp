#include "tokenrank/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "tokenrank/binary_io.hpp"
#include "tokenrank/kmeans.hpp"

namespace tokenrank {

Matrix sample_tokens(std::span<const TokenSet> sets, std::size_t budget, std::uint64_t seed) {
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const auto& ts : sets) {
    total += ts.size();
    if (dim == 0) dim = ts.dim();
    require(ts.dim() == dim, ErrorKind::kValidation, "token sets differ in dim");
  }
  const std::size_t want = std::min(budget, total);
  Matrix out(0, dim);
  out.storage().reserve(want * dim);
  Rng rng(seed);
  // Knuth's selection sampling: keeps each token with probability
  // (still needed) / (still available).
  std::size_t seen = 0;
  std::size_t taken = 0;
  for (const auto& ts : sets) {
    for (std::size_t i = 0; i < ts.size() && taken < want; ++i, ++seen) {
      if (want == total || rng.uniform_index(total - seen) < want - taken) {
        out.append_row(ts.tokens.row(i));
        ++taken;
      }
    }
  }
  return out;
}

Codebook train_codebook(const Matrix& token_sample, std::size_t k, int iters,
                        std::uint64_t rng_seed) {
  require(token_sample.rows() >= k, ErrorKind::kValidation,
          "codebook sample of " + std::to_string(token_sample.rows()) +
              " tokens is smaller than K=" + std::to_string(k));
  auto km = lloyd_kmeans(token_sample, {k, iters, rng_seed});
  for (float v : km.centroids.values()) {
    require(std::isfinite(v), ErrorKind::kDegenerate, "non-finite codebook centroid");
  }
  Codebook cb;
  cb.centroids = std::move(km.centroids);
  cb.sample_size = token_sample.rows();
  cb.rng_seed = rng_seed;
  cb.iterations = km.iterations;
  cb.sse_history = std::move(km.sse_history);
  return cb;
}

void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  Container c;
  c.header["kind"] = "codebook";
  c.header["k"] = cb.k();
  c.header["dim"] = cb.dim();
  c.header["sample_size"] = cb.sample_size;
  c.header["rng_seed"] = cb.rng_seed;
  c.header["iterations"] = cb.iterations;
  c.header["sse_history"] = cb.sse_history;
  put_f32s(c.payload, cb.centroids.values());
  write_container(path, c);
}

Codebook load_codebook(const std::filesystem::path& path) {
  const auto c = read_container(path, "codebook");
  Codebook cb;
  const auto k = c.header.at("k").get<std::size_t>();
  const auto d = c.header.at("dim").get<std::size_t>();
  require(c.payload.size() == k * d * 4, ErrorKind::kCorruption,
          path.string() + ": codebook payload size mismatch");
  cb.centroids = Matrix(k, d);
  get_f32s(c.payload.data(), cb.centroids.storage());
  cb.sample_size = c.header.at("sample_size").get<std::size_t>();
  cb.rng_seed = c.header.at("rng_seed").get<std::uint64_t>();
  if (c.header.contains("sse_history")) {
    cb.sse_history = c.header["sse_history"].get<std::vector<double>>();
  }
  cb.iterations = c.header.at("iterations").get<int>();
  return cb;
}

// --- PCA ------------------------------------------------------------------

std::vector<float> PcaModel::transform(std::span<const float> x) const {
  require(x.size() == in_dim(), ErrorKind::kValidation, "PCA input dim mismatch");
  std::vector<double> centered(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) centered[j] = static_cast<double>(x[j]) - mean[j];
  std::vector<float> y(out_dim());
  for (std::size_t c = 0; c < out_dim(); ++c) {
    const auto comp = components.row(c);
    double s = 0.0;
    for (std::size_t j = 0; j < comp.size(); ++j) s += comp[j] * centered[j];
    y[c] = static_cast<float>(s / std::sqrt(static_cast<double>(eigenvalues[c]) + floor));
  }
  return y;
}

std::vector<float> PcaModel::inverse_transform(std::span<const float> y) const {
  require(y.size() == out_dim(), ErrorKind::kValidation, "PCA output dim mismatch");
  std::vector<double> x(mean.begin(), mean.end());
  for (std::size_t c = 0; c < out_dim(); ++c) {
    const double scale = y[c] * std::sqrt(static_cast<double>(eigenvalues[c]) + floor);
    const auto comp = components.row(c);
    for (std::size_t j = 0; j < comp.size(); ++j) x[j] += scale * comp[j];
  }
  return {x.begin(), x.end()};
}

PcaModel fit_pca(const Matrix& descriptors, std::size_t out_dim) {
  const std::size_t n = descriptors.rows();
  const std::size_t d = descriptors.cols();
  require(out_dim >= 1 && out_dim <= d, ErrorKind::kValidation,
          "PCA output dim must be in [1, " + std::to_string(d) + "]");
  require(n >= out_dim && n >= 2, ErrorKind::kValidation,
          "PCA to " + std::to_string(out_dim) + " dims needs at least that many samples, got " +
              std::to_string(n));

  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = descriptors.row(i)[j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const double denom = static_cast<double>(n - 1);

  Eigen::MatrixXd vecs(d, out_dim);  // columns are components
  Eigen::VectorXd vals(out_dim);
  if (n >= d) {
    const Eigen::MatrixXd cov = (x.transpose() * x) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    require(es.info() == Eigen::Success, ErrorKind::kDegenerate, "PCA eigensolver failed");
    // Eigen sorts ascending.
    for (std::size_t c = 0; c < out_dim; ++c) {
      const Eigen::Index src = static_cast<Eigen::Index>(d - 1 - c);
      vecs.col(c) = es.eigenvectors().col(src);
      vals(c) = es.eigenvalues()(src);
    }
  } else {
    // Dual route: eigenvectors of X X^T map to covariance eigenvectors.
    const Eigen::MatrixXd gram = (x * x.transpose()) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    require(es.info() == Eigen::Success, ErrorKind::kDegenerate, "PCA eigensolver failed");
    std::size_t filled = 0;
    for (std::size_t c = 0; c < out_dim; ++c) {
      const Eigen::Index src = static_cast<Eigen::Index>(n - 1 - c);
      const double lambda = es.eigenvalues()(src);
      if (lambda <= 1e-12) break;
      Eigen::VectorXd v = x.transpose() * es.eigenvectors().col(src);
      v /= v.norm();
      vecs.col(c) = v;
      vals(c) = lambda;
      ++filled;
    }
    // Null-space directions: Gram-Schmidt over the standard basis.
    for (std::size_t basis = 0; filled < out_dim && basis < d; ++basis) {
      Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
      v(static_cast<Eigen::Index>(basis)) = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < filled; ++c) v -= vecs.col(c).dot(v) * vecs.col(c);
      }
      const double norm = v.norm();
      if (norm < 1e-6) continue;
      vecs.col(filled) = v / norm;
      vals(filled) = 0.0;
      ++filled;
    }
  }

  PcaModel pca;
  pca.mean.resize(d);
  for (std::size_t j = 0; j < d; ++j) pca.mean[j] = static_cast<float>(mu(j));
  pca.components = Matrix(out_dim, d);
  pca.eigenvalues.resize(out_dim);
  for (std::size_t c = 0; c < out_dim; ++c) {
    Eigen::Index arg = 0;
    vecs.col(c).cwiseAbs().maxCoeff(&arg);
    const double sign = vecs(arg, c) < 0 ? -1.0 : 1.0;
    auto row = pca.components.row(c);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(sign * vecs(j, c));
    pca.eigenvalues[c] = static_cast<float>(std::max(0.0, vals(c)));
  }
  return pca;
}

void save_pca(const PcaModel& pca, const std::filesystem::path& path) {
  Container c;
  c.header["kind"] = "pca";
  c.header["in_dim"] = pca.in_dim();
  c.header["out_dim"] = pca.out_dim();
  c.header["floor"] = pca.floor;
  put_f32s(c.payload, pca.mean);
  put_f32s(c.payload, pca.eigenvalues);
  put_f32s(c.payload, pca.components.values());
  write_container(path, c);
}

PcaModel load_pca(const std::filesystem::path& path) {
  const auto c = read_container(path, "pca");
  const auto in = c.header.at("in_dim").get<std::size_t>();
  const auto out = c.header.at("out_dim").get<std::size_t>();
  require(c.payload.size() == 4 * (in + out + in * out), ErrorKind::kCorruption,
          path.string() + ": PCA payload size mismatch");
  PcaModel pca;
  pca.floor = c.header.at("floor").get<double>();
  pca.mean.resize(in);
  pca.eigenvalues.resize(out);
  pca.components = Matrix(out, in);
  const std::uint8_t* p = c.payload.data();
  get_f32s(p, pca.mean);
  get_f32s(p + 4 * in, pca.eigenvalues);
  get_f32s(p + 4 * (in + out), pca.components.storage());
  return pca;
}

// --- VLAD -----------------------------------------------------------------

namespace {

Matrix unit_centroids(const Codebook& cb) {
  Matrix u = cb.centroids;
  for (std::size_t c = 0; c < u.rows(); ++c) {
    // A zero centroid keeps cosine 0 against everything.
    normalize(u.row(c), 1e-12);
  }
  return u;
}

void check_dims(const TokenSet& ts, const Codebook& cb) {
  require(ts.dim() == cb.dim(), ErrorKind::kValidation,
          "'" + ts.image_id + "' has dim " + std::to_string(ts.dim()) + ", codebook dim is " +
              std::to_string(cb.dim()));
}

}  // namespace

std::vector<std::uint32_t> vlad_assign(const TokenSet& ts, const Codebook& cb) {
  check_dims(ts, cb);
  const Matrix unit = unit_centroids(cb);
  std::vector<std::uint32_t> labels(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto t = ts.tokens.row(i);
    std::uint32_t best = 0;
    float best_s = dot(t, unit.row(0));
    for (std::size_t c = 1; c < cb.k(); ++c) {
      const float s = dot(t, unit.row(c));
      if (s > best_s) {
        best_s = s;
        best = static_cast<std::uint32_t>(c);
      }
    }
    labels[i] = best;
  }
  return labels;
}

Matrix vlad_residuals(const TokenSet& ts, const Codebook& cb, const VladOptions& opts) {
  check_dims(ts, cb);
  const std::size_t k = cb.k();
  const std::size_t d = cb.dim();
  std::vector<double> acc(k * d, 0.0);

  auto add = [&](std::size_t c, std::span<const float> t, double w) {
    const auto cen = cb.centroids.row(c);
    double* a = acc.data() + c * d;
    for (std::size_t j = 0; j < d; ++j) a[j] += w * (static_cast<double>(t[j]) - cen[j]);
  };

  if (!opts.soft_alpha) {
    const auto labels = vlad_assign(ts, cb);
    for (std::size_t i = 0; i < ts.size(); ++i) add(labels[i], ts.tokens.row(i), 1.0);
  } else {
    const double alpha = *opts.soft_alpha;
    require(alpha > 0.0 && std::isfinite(alpha), ErrorKind::kValidation,
            "soft VLAD alpha must be > 0");
    const Matrix unit = unit_centroids(cb);
    std::vector<double> w(k);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const auto t = ts.tokens.row(i);
      double top = -1e300;
      for (std::size_t c = 0; c < k; ++c) {
        w[c] = alpha * dot(t, unit.row(c));
        top = std::max(top, w[c]);
      }
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) total += (w[c] = std::exp(w[c] - top));
      for (std::size_t c = 0; c < k; ++c) add(c, t, w[c] / total);
    }
  }

  Matrix out(k, d);
  for (std::size_t c = 0; c < k; ++c) {
    const double* a = acc.data() + c * d;
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm2 += a[j] * a[j];
    const double norm = std::sqrt(norm2);
    if (norm < 1e-9) continue;
    auto row = out.row(c);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(a[j] / norm);
  }
  return out;
}

std::vector<float> vlad_flat(const TokenSet& ts, const Codebook& cb, const VladOptions& opts) {
  const Matrix r = vlad_residuals(ts, cb, opts);
  std::vector<float> flat(r.values().begin(), r.values().end());
  // An all-zero VLAD stays zero; PCA then maps it to the whitened mean.
  normalize(flat, 1e-12);
  return flat;
}

GlobalDescriptor vlad_encode_sv(const TokenSet& ts, const Codebook& cb, const PcaModel& pca,
                                const VladOptions& opts) {
  const auto flat = vlad_flat(ts, cb, opts);
  require(pca.in_dim() == flat.size(), ErrorKind::kValidation,
          "PCA model expects " + std::to_string(pca.in_dim()) + " dims, VLAD has " +
              std::to_string(flat.size()));
  GlobalDescriptor g{ts.image_id, pca.transform(flat), PoolMethod::kVlad};
  require(normalize(g.vector, 1e-12), ErrorKind::kDegenerate,
          "'" + ts.image_id + "' VLAD projects to a zero vector");
  return g;
}

InstanceTokenSet vlad_encode_mv(const TokenSet& ts, const Codebook& cb, const VladOptions& opts,
                                std::size_t* degenerate_blocks) {
  InstanceTokenSet out;
  out.image_id = ts.image_id;
  out.tokens = vlad_residuals(ts, cb, opts);
  out.provenance.method = "vlad";
  out.provenance.k = cb.k();
  std::size_t zero = 0;
  for (std::size_t c = 0; c < cb.k(); ++c) {
    auto row = out.tokens.row(c);
    if (l2_norm(row) > 0.0) continue;
    ++zero;
    const auto cen = cb.centroids.row(c);
    std::copy(cen.begin(), cen.end(), row.begin());
    if (!normalize(row, 1e-12)) {
      std::fill(row.begin(), row.end(), 0.0f);
      row[c % row.size()] = 1.0f;
    }
  }
  if (degenerate_blocks) *degenerate_blocks = zero;
  return out;
}

}  // namespace tokenrank
