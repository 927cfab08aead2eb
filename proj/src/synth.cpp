#include "tokenrank/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace tokenrank {

namespace {

std::vector<float> random_unit(std::size_t dim, Rng& rng) {
  std::vector<float> v(dim);
  do {
    for (auto& x : v) x = static_cast<float>(rng.normal());
  } while (!normalize(v));
  return v;
}

std::string numbered(char prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%05zu", prefix, n);
  return buf;
}

struct Job {
  std::string image_id;
  const Matrix* parts = nullptr;
  const Matrix* second = nullptr;  // multi-identity query
};

}  // namespace

void SynthSpec::validate() const {
  require(dim >= 2, ErrorKind::kValidation, "synth: dim must be >= 2");
  require(tokens >= 1 && tokens <= kMaxTokens, ErrorKind::kValidation,
          "synth: tokens must be in [1, 65535]");
  require(identity_tokens >= 1, ErrorKind::kValidation, "synth: identity_tokens must be >= 1");
  require(identity_tokens + prototypes <= tokens, ErrorKind::kValidation,
          "synth: identity_tokens + prototypes exceeds tokens");
  require(identity_tokens == tokens || prototypes >= 1, ErrorKind::kValidation,
          "synth: background slots need at least one prototype");
  require(gallery_views >= 1, ErrorKind::kValidation, "synth: gallery_views must be >= 1");
  require(std::isfinite(sigma_deg) && sigma_deg >= 0.0, ErrorKind::kValidation,
          "synth: sigma must be >= 0");
  require(std::isfinite(mixture_skew) && mixture_skew >= 0.0, ErrorKind::kValidation,
          "synth: mixture skew must be >= 0");
  require(std::isfinite(photometric) && photometric >= 0.0, ErrorKind::kValidation,
          "synth: photometric shift must be >= 0");
  require(part_library == 0 || part_library >= identity_tokens, ErrorKind::kValidation,
          "synth: part library smaller than identity_tokens");
  require(multi_id_fraction >= 0.0 && multi_id_fraction <= 1.0, ErrorKind::kValidation,
          "synth: multi_id_fraction must be in [0, 1]");
  require(multi_id_fraction == 0.0 || identities >= 2, ErrorKind::kValidation,
          "synth: multi-identity queries need at least two identities");
}

void perturb_direction(std::span<float> v, double angle, Rng& rng) {
  const std::size_t d = v.size();
  std::vector<double> u(d);
  double norm = 0.0;
  for (int attempt = 0; attempt < 16 && norm < 1e-6; ++attempt) {
    double proj = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      u[i] = rng.normal();
      proj += u[i] * v[i];
    }
    norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      u[i] -= proj * v[i];
      norm += u[i] * u[i];
    }
    norm = std::sqrt(norm);
  }
  require(norm >= 1e-6, ErrorKind::kDegenerate, "cannot find an orthogonal direction");
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = 0; i < d; ++i) v[i] = static_cast<float>(c * v[i] + s * u[i] / norm);
}

SynthData generate_synthetic(const SynthSpec& spec, unsigned threads) {
  spec.validate();
  const std::size_t d = spec.dim;

  Matrix prototypes(0, d);
  {
    Rng rng(derive_seed(spec.seed, "prototypes"));
    for (std::size_t p = 0; p < spec.prototypes; ++p) prototypes.append_row(random_unit(d, rng));
  }

  Matrix library(0, d);
  if (spec.part_library > 0) {
    Rng rng(derive_seed(spec.seed, "part-library"));
    for (std::size_t p = 0; p < spec.part_library; ++p) library.append_row(random_unit(d, rng));
  }

  const std::size_t n_owners = spec.identities + spec.distractors;
  std::vector<Matrix> parts(n_owners);
  parallel_for(n_owners, threads, [&](std::size_t o) {
    const std::string owner = o < spec.identities ? numbered('C', o)
                                                  : numbered('D', o - spec.identities);
    Rng rng(derive_seed(spec.seed, "identity/" + owner));
    Matrix m(0, d);
    if (spec.part_library == 0) {
      for (std::size_t j = 0; j < spec.identity_tokens; ++j) m.append_row(random_unit(d, rng));
    } else {
      // Distinct library entries, partial Fisher-Yates.
      std::vector<std::size_t> pick(spec.part_library);
      for (std::size_t p = 0; p < pick.size(); ++p) pick[p] = p;
      for (std::size_t j = 0; j < spec.identity_tokens; ++j) {
        std::swap(pick[j], pick[j + rng.uniform_index(pick.size() - j)]);
        m.append_row(library.row(pick[j]));
      }
    }
    parts[o] = std::move(m);
  });

  SynthData out;
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < spec.identities; ++i) {
    const std::string crater = numbered('C', i);
    for (std::size_t v = 0; v < spec.gallery_views; ++v) {
      const std::string id = numbered('g', i) + "_" + std::to_string(v);
      jobs.push_back({id, &parts[i], nullptr});
      out.manifest.add({id, Role::kGallery, {crater}, "g" + std::to_string(v), std::nullopt});
    }
  }
  for (std::size_t i = 0; i < spec.identities; ++i) {
    const std::string crater = numbered('C', i);
    for (std::size_t v = 0; v < spec.query_views; ++v) {
      const std::string id = numbered('q', i) + "_" + std::to_string(v);
      std::vector<std::string> craters{crater};
      const Matrix* second = nullptr;
      if (spec.multi_id_fraction > 0.0) {
        Rng rng(derive_seed(spec.seed, "multi/" + id));
        if (rng.uniform01() < spec.multi_id_fraction) {
          std::size_t other = rng.uniform_index(spec.identities - 1);
          if (other >= i) ++other;
          second = &parts[other];
          craters.push_back(numbered('C', other));
        }
      }
      jobs.push_back({id, &parts[i], second});
      out.manifest.add({id, Role::kQuery, craters, "q" + std::to_string(v), std::nullopt});
    }
  }
  for (std::size_t n = 0; n < spec.distractors; ++n) {
    const std::string id = numbered('x', n);
    jobs.push_back({id, &parts[spec.identities + n], nullptr});
    out.manifest.add({id, Role::kGallery, {numbered('D', n)}, std::nullopt, std::nullopt});
  }

  const double mean_angle = spec.sigma_deg * std::numbers::pi / 180.0;
  const double half_normal_scale = std::sqrt(std::numbers::pi / 2.0);
  out.records.resize(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t jn) {
    const Job& job = jobs[jn];
    Rng rng(derive_seed(spec.seed, "view/" + job.image_id));
    const std::size_t n = spec.tokens;

    struct Row {
      std::span<const float> base;
      double norm;
      double logit;
    };
    std::vector<Row> rows;
    rows.reserve(n);
    for (std::size_t j = 0; j < spec.identity_tokens; ++j) {
      const Matrix& src = (job.second != nullptr && j % 2 == 1) ? *job.second : *job.parts;
      rows.push_back({src.row(j), 1.6 + 0.2 * rng.normal(), 1.0 + 0.3 * rng.normal()});
    }
    const std::size_t background = n - spec.identity_tokens;
    if (background > 0) {
      std::vector<double> cdf(spec.prototypes);
      double acc = 0.0;
      for (std::size_t p = 0; p < spec.prototypes; ++p) {
        acc += std::exp(spec.mixture_skew * rng.normal());
        cdf[p] = acc;
      }
      for (std::size_t b = 0; b < background; ++b) {
        std::size_t p = b;
        if (b >= spec.prototypes) {
          const double u = rng.uniform01() * acc;
          p = 0;
          while (p + 1 < spec.prototypes && cdf[p] <= u) ++p;
        }
        rows.push_back({prototypes.row(p), 1.0 + 0.1 * rng.normal(), 0.3 * rng.normal()});
      }
    }

    std::vector<float> shift;
    if (spec.photometric > 0.0) {
      shift = random_unit(d, rng);
      for (auto& x : shift) x = static_cast<float>(x * spec.photometric);
    }

    // Spatial layout is arbitrary: shuffle row positions.
    for (std::size_t i = n; i > 1; --i) std::swap(rows[i - 1], rows[rng.uniform_index(i)]);

    Matrix tokens(n, d);
    std::vector<double> mean(d, 0.0);
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = tokens.row(i);
      std::copy(rows[i].base.begin(), rows[i].base.end(), r.begin());
      const double angle = mean_angle * half_normal_scale * std::abs(rng.normal());
      if (angle > 0.0) perturb_direction(r, angle, rng);
      if (!shift.empty()) {
        for (std::size_t k = 0; k < d; ++k) r[k] += shift[k];
        normalize(r);
      }
      for (std::size_t k = 0; k < d; ++k) mean[k] += r[k];
      const double scale = std::max(0.25, rows[i].norm);
      for (auto& x : r) x = static_cast<float>(x * scale);
      logits[i] = rows[i].logit;
    }

    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    std::vector<float> attention(n);
    for (std::size_t i = 0; i < n; ++i) attention[i] = static_cast<float>(logits[i] / z);

    std::vector<float> cls(d);
    double cn = 0.0;
    for (double m : mean) cn += m * m;
    cn = std::sqrt(cn);
    for (std::size_t k = 0; k < d; ++k) cls[k] = static_cast<float>(cn > 0.0 ? mean[k] / cn : 0.0);
    if (cn == 0.0) cls[0] = 1.0f;

    out.records[jn] = TokenSet{job.image_id, std::move(tokens), {}, std::move(attention), std::move(cls)};
  });
  return out;
}

}  // namespace tokenrank
