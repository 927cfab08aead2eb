#include "tokenrank/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tokenrank {

std::string_view to_string(PoolMethod m) {
  switch (m) {
    case PoolMethod::kCls: return "cls";
    case PoolMethod::kMean: return "mean";
    case PoolMethod::kMax: return "max";
    case PoolMethod::kGem: return "gem";
    case PoolMethod::kVlad: return "vlad";
  }
  return "?";
}

PoolMethod parse_pool_method(std::string_view s) {
  if (s == "cls") return PoolMethod::kCls;
  if (s == "mean" || s == "gap") return PoolMethod::kMean;
  if (s == "max") return PoolMethod::kMax;
  if (s == "gem") return PoolMethod::kGem;
  if (s == "vlad") return PoolMethod::kVlad;
  fail(ErrorKind::kValidation, "unknown pooling method '" + std::string(s) + "'");
}

namespace {

double signed_pow(double x, double p) {
  return std::copysign(std::pow(std::abs(x), p), x);
}

}  // namespace

GlobalDescriptor pool(const TokenSet& ts, const PoolOptions& opts) {
  const std::size_t n = ts.size();
  const std::size_t d = ts.dim();
  require(n >= 1, ErrorKind::kValidation, "'" + ts.image_id + "' has no tokens");

  require(opts.method != PoolMethod::kVlad, ErrorKind::kValidation,
          "vlad descriptors need a codebook and PCA model (vlad_encode_sv)");
  GlobalDescriptor out{ts.image_id, std::vector<float>(d), opts.method};
  switch (opts.method) {
    case PoolMethod::kCls:
      require(ts.cls.has_value(), ErrorKind::kValidation,
              "cls pooling requested but '" + ts.image_id + "' has no CLS vector");
      std::copy(ts.cls->begin(), ts.cls->end(), out.vector.begin());
      break;
    case PoolMethod::kMean: {
      std::vector<double> acc(d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = ts.tokens.row(i);
        for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
      }
      for (std::size_t j = 0; j < d; ++j) out.vector[j] = static_cast<float>(acc[j] / n);
      break;
    }
    case PoolMethod::kMax: {
      std::fill(out.vector.begin(), out.vector.end(), -std::numeric_limits<float>::infinity());
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = ts.tokens.row(i);
        for (std::size_t j = 0; j < d; ++j) out.vector[j] = std::max(out.vector[j], r[j]);
      }
      break;
    }
    case PoolMethod::kGem: {
      const double p = opts.gem_p;
      require(p > 0.0 && std::isfinite(p), ErrorKind::kValidation, "GeM power must be > 0");
      std::vector<double> acc(d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = ts.tokens.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          if (opts.gem_sign == GemSign::kClamp) {
            acc[j] += std::pow(std::max<double>(r[j], kGemClampFloor), p);
          } else {
            acc[j] += signed_pow(r[j], p);
          }
        }
      }
      for (std::size_t j = 0; j < d; ++j) {
        const double mean = acc[j] / n;
        out.vector[j] = static_cast<float>(
            opts.gem_sign == GemSign::kClamp ? std::pow(mean, 1.0 / p) : signed_pow(mean, 1.0 / p));
      }
      break;
    }
    case PoolMethod::kVlad:
      break;
  }

  require(normalize(out.vector, 1e-12), ErrorKind::kDegenerate,
          "'" + ts.image_id + "' pooled to a zero vector");
  return out;
}

TokenSet to_token_set(const GlobalDescriptor& d) {
  TokenSet ts;
  ts.image_id = d.image_id;
  ts.tokens = Matrix(1, d.vector.size(), d.vector);
  ts.raw_norms = {static_cast<float>(l2_norm(d.vector))};
  return ts;
}

GlobalDescriptor from_token_set(const TokenSet& ts, PoolMethod method) {
  require(ts.size() == 1, ErrorKind::kFormat,
          "descriptor record '" + ts.image_id + "' must hold exactly one vector");
  const auto r = ts.tokens.row(0);
  return {ts.image_id, std::vector<float>(r.begin(), r.end()), method};
}

}  // namespace tokenrank
