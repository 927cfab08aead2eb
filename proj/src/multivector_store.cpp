#include "tokenrank/multivector_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "tokenrank/binary_io.hpp"
#include "tokenrank/kmeans.hpp"

namespace tokenrank {

std::string CodecSpec::to_string() const {
  switch (codec) {
    case Codec::kF32: return "f32";
    case Codec::kFp16: return "fp16";
    case Codec::kInt8: return "int8";
    case Codec::kPq: return "pq:" + std::to_string(pq_m);
  }
  return "?";
}

CodecSpec CodecSpec::parse(std::string_view s) {
  if (s == "f32") return {Codec::kF32, 0};
  if (s == "fp16") return {Codec::kFp16, 0};
  if (s == "int8") return {Codec::kInt8, 0};
  if (s.starts_with("pq:")) {
    const std::string num(s.substr(3));
    char* end = nullptr;
    const unsigned long m = std::strtoul(num.c_str(), &end, 10);
    require(!num.empty() && *end == '\0' && m > 0, ErrorKind::kValidation,
            "bad PQ codec '" + std::string(s) + "'");
    return {Codec::kPq, m};
  }
  fail(ErrorKind::kValidation, "unknown codec '" + std::string(s) + "' (f32|fp16|int8|pq:<m>)");
}

// --- fp16 -----------------------------------------------------------------

std::uint16_t float_to_half(float f) noexcept {
  // Magic-number conversion relying on round-to-nearest-even float adds.
  constexpr std::uint32_t kInf32 = 255u << 23;
  constexpr std::uint32_t kMax16 = (127u + 16u) << 23;
  constexpr std::uint32_t kDenormMagic = ((127u - 15u) + (23u - 10u) + 1u) << 23;
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = u & 0x80000000u;
  u ^= sign;
  std::uint16_t out;
  if (u >= kMax16) {
    out = u > kInf32 ? 0x7e00 : 0x7c00;
  } else if (u < (113u << 23)) {
    const float shifted = std::bit_cast<float>(u) + std::bit_cast<float>(kDenormMagic);
    out = static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(shifted) - kDenormMagic);
  } else {
    const std::uint32_t mant_odd = (u >> 13) & 1u;
    u += (static_cast<std::uint32_t>(15 - 127) << 23) + 0xfffu;
    u += mant_odd;
    out = static_cast<std::uint16_t>(u >> 13);
  }
  return static_cast<std::uint16_t>(out | (sign >> 16));
}

float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float mag = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -mag : mag;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

// --- int8 -----------------------------------------------------------------

Int8Vector int8_encode(std::span<const float> x) {
  Int8Vector v;
  v.codes.resize(x.size());
  float peak = 0.0f;
  for (float e : x) peak = std::max(peak, std::abs(e));
  v.scale = peak / 127.0f;
  if (v.scale == 0.0f) return v;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double q = std::nearbyint(static_cast<double>(x[j]) / v.scale);
    v.codes[j] = static_cast<std::int8_t>(std::clamp(q, -127.0, 127.0));
  }
  return v;
}

void int8_decode(std::span<const std::int8_t> codes, float scale, std::span<float> out) {
  for (std::size_t j = 0; j < codes.size(); ++j) out[j] = static_cast<float>(codes[j]) * scale;
}

// --- product quantization -------------------------------------------------

void ProductQuantizer::encode(std::span<const float> x, std::span<std::uint8_t> codes) const {
  const std::size_t ds = sub_dim();
  for (std::size_t s = 0; s < m; ++s) {
    const float* sub = x.data() + s * ds;
    const float* book = centroids.data() + s * kPqCentroids * ds;
    std::size_t best = 0;
    float best_d = squared_distance(sub, book, ds);
    for (std::size_t c = 1; c < kPqCentroids; ++c) {
      const float dist = squared_distance(sub, book + c * ds, ds);
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    codes[s] = static_cast<std::uint8_t>(best);
  }
}

void ProductQuantizer::decode(std::span<const std::uint8_t> codes, std::span<float> out) const {
  const std::size_t ds = sub_dim();
  for (std::size_t s = 0; s < m; ++s) {
    const float* c = centroids.data() + (s * kPqCentroids + codes[s]) * ds;
    std::copy_n(c, ds, out.data() + s * ds);
  }
}

ProductQuantizer train_pq(const Matrix& sample, std::size_t m, std::uint64_t seed,
                          unsigned threads) {
  const std::size_t d = sample.cols();
  require(m >= 1 && d % m == 0, ErrorKind::kValidation,
          "PQ needs dim divisible by m (dim=" + std::to_string(d) + ", m=" + std::to_string(m) + ")");
  require(sample.rows() >= kPqCentroids, ErrorKind::kValidation,
          "PQ training needs at least 256 vectors, got " + std::to_string(sample.rows()));
  ProductQuantizer pq;
  pq.dim = d;
  pq.m = m;
  const std::size_t ds = d / m;
  pq.centroids.assign(m * kPqCentroids * ds, 0.0f);
  parallel_for(m, threads, [&](std::size_t s) {
    Matrix sub(sample.rows(), ds);
    for (std::size_t i = 0; i < sample.rows(); ++i) {
      std::copy_n(sample.row(i).data() + s * ds, ds, sub.row(i).data());
    }
    const auto km = lloyd_kmeans(
        sub, {kPqCentroids, kPqIterations, derive_seed(seed, "pq/" + std::to_string(s))});
    std::copy(km.centroids.values().begin(), km.centroids.values().end(),
              pq.centroids.begin() + static_cast<std::ptrdiff_t>(s * kPqCentroids * ds));
  });
  return pq;
}

// --- store ----------------------------------------------------------------

void MultiVectorStore::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    require(index_.emplace(ids_[i], i).second, ErrorKind::kValidation,
            "duplicate image id '" + ids_[i] + "' in multi-vector store");
  }
}

MultiVectorStore MultiVectorStore::from_instances(std::vector<InstanceTokenSet> sets) {
  std::sort(sets.begin(), sets.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  MultiVectorStore st;
  st.codec_ = {Codec::kF32, 0};
  st.dim_ = sets.empty() ? 0 : sets.front().dim();
  for (const auto& s : sets) {
    require(s.dim() == st.dim_, ErrorKind::kValidation,
            "'" + s.image_id + "' dim differs from the store");
    require(s.size() >= 1 && s.size() <= kMaxTokens, ErrorKind::kCapacity,
            "'" + s.image_id + "' token count out of range");
    st.ids_.push_back(s.image_id);
    put_f32s(st.codes_, s.tokens.values());
    st.offsets_.push_back(st.offsets_.back() + s.size());
  }
  st.rebuild_index();
  return st;
}

std::optional<std::size_t> MultiVectorStore::find(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t MultiVectorStore::bytes_per_token() const noexcept {
  switch (codec_.codec) {
    case Codec::kF32: return 4 * dim_;
    case Codec::kFp16: return 2 * dim_;
    case Codec::kInt8: return dim_ + 4;
    case Codec::kPq: return codec_.pq_m;
  }
  return 0;
}

const float* MultiVectorStore::f32_tokens(std::size_t i) const {
  require(codec_.codec == Codec::kF32, ErrorKind::kValidation,
          "raw f32 access on a " + codec_.to_string() + " store");
  static_assert(std::endian::native == std::endian::little,
                "zero-copy f32 access assumes a little-endian host");
  return reinterpret_cast<const float*>(codes_.data() + offsets_[i] * bytes_per_token());
}

void MultiVectorStore::decode(std::size_t i, Matrix& out) const {
  const std::size_t n = token_count(i);
  const std::size_t bpt = bytes_per_token();
  if (out.rows() != n || out.cols() != dim_) out = Matrix(n, dim_);
  const std::uint8_t* base = codes_.data() + offsets_[i] * bpt;
  for (std::size_t t = 0; t < n; ++t) {
    const std::uint8_t* p = base + t * bpt;
    auto row = out.row(t);
    switch (codec_.codec) {
      case Codec::kF32:
        get_f32s(p, row);
        break;
      case Codec::kFp16:
        for (std::size_t j = 0; j < dim_; ++j) row[j] = half_to_float(get_u16(p + 2 * j));
        break;
      case Codec::kInt8: {
        float scale;
        get_f32s(p + dim_, {&scale, 1});
        int8_decode({reinterpret_cast<const std::int8_t*>(p), dim_}, scale, row);
        break;
      }
      case Codec::kPq:
        pq_->decode({p, codec_.pq_m}, row);
        break;
    }
  }
}

MultiVectorStore MultiVectorStore::decoded() const {
  if (codec_.codec == Codec::kF32) return *this;
  MultiVectorStore st;
  st.codec_ = {Codec::kF32, 0};
  st.dim_ = dim_;
  st.ids_ = ids_;
  st.offsets_ = offsets_;
  st.codes_.reserve(total_tokens() * dim_ * 4);
  Matrix buf;
  for (std::size_t i = 0; i < size(); ++i) {
    decode(i, buf);
    put_f32s(st.codes_, buf.values());
  }
  st.rebuild_index();
  return st;
}

MultiVectorStore quantize_store(const MultiVectorStore& store, const CodecSpec& codec,
                                const Matrix* train_sample, std::uint64_t seed,
                                unsigned threads) {
  require(store.codec_.codec == Codec::kF32, ErrorKind::kValidation,
          "quantize_store expects an f32 store");
  MultiVectorStore out;
  out.codec_ = codec;
  out.dim_ = store.dim_;
  out.ids_ = store.ids_;
  out.offsets_ = store.offsets_;
  out.index_ = store.index_;
  const std::size_t d = store.dim_;
  const std::size_t total = store.total_tokens();
  auto token = [&](std::size_t t) {
    return std::span<const float>(
        reinterpret_cast<const float*>(store.codes_.data()) + t * d, d);
  };

  if (codec.codec == Codec::kPq) {
    require(codec.pq_m >= 1 && d % codec.pq_m == 0, ErrorKind::kValidation,
            "PQ needs dim divisible by m (dim=" + std::to_string(d) + ", m=" +
                std::to_string(codec.pq_m) + ")");
    Matrix sampled;
    if (train_sample == nullptr) {
      const std::size_t want = std::min(total, kDefaultPqTrainBudget);
      sampled = Matrix(0, d);
      Rng rng(derive_seed(seed, "pq-sample"));
      std::size_t taken = 0;
      for (std::size_t t = 0; t < total && taken < want; ++t) {
        if (want == total || rng.uniform_index(total - t) < want - taken) {
          sampled.append_row(token(t));
          ++taken;
        }
      }
      train_sample = &sampled;
    }
    out.pq_ = train_pq(*train_sample, codec.pq_m, seed, threads);
  }

  const std::size_t bpt = out.bytes_per_token();
  out.codes_.assign(total * bpt, 0);
  parallel_for(total, threads, [&](std::size_t t) {
    const auto x = token(t);
    std::uint8_t* p = out.codes_.data() + t * bpt;
    switch (codec.codec) {
      case Codec::kF32:
        std::memcpy(p, x.data(), 4 * d);
        break;
      case Codec::kFp16:
        for (std::size_t j = 0; j < d; ++j) {
          const std::uint16_t h = float_to_half(x[j]);
          p[2 * j] = static_cast<std::uint8_t>(h);
          p[2 * j + 1] = static_cast<std::uint8_t>(h >> 8);
        }
        break;
      case Codec::kInt8: {
        const auto enc = int8_encode(x);
        std::memcpy(p, enc.codes.data(), d);
        std::vector<std::uint8_t> scale_bytes;
        put_f32s(scale_bytes, std::span<const float>(&enc.scale, 1));
        std::memcpy(p + d, scale_bytes.data(), 4);
        break;
      }
      case Codec::kPq:
        out.pq_->encode(x, {p, codec.pq_m});
        break;
    }
  });
  return out;
}

void save_mvstore(const MultiVectorStore& store, const std::filesystem::path& path) {
  Container c;
  c.header["kind"] = "mvstore";
  c.header["codec"] = store.codec_.to_string();
  c.header["dim"] = store.dim_;
  c.header["images"] = store.size();
  c.header["bytes_per_token"] = store.bytes_per_token();
  c.header["ids"] = store.ids_;
  auto& p = c.payload;
  for (std::size_t i = 0; i < store.size(); ++i) {
    put_u16(p, static_cast<std::uint16_t>(store.token_count(i)));
  }
  if (store.pq_) put_f32s(p, store.pq_->centroids);
  p.insert(p.end(), store.codes_.begin(), store.codes_.end());
  write_container(path, c);
}

MultiVectorStore load_mvstore(const std::filesystem::path& path) {
  const auto c = read_container(path, "mvstore");
  MultiVectorStore st;
  st.codec_ = CodecSpec::parse(c.header.at("codec").get<std::string>());
  st.dim_ = c.header.at("dim").get<std::size_t>();
  st.ids_ = c.header.at("ids").get<std::vector<std::string>>();
  const std::size_t images = st.ids_.size();
  const std::uint8_t* p = c.payload.data();
  const std::uint8_t* end = p + c.payload.size();
  auto need = [&](std::size_t n) {
    require(static_cast<std::size_t>(end - p) >= n, ErrorKind::kCorruption,
            path.string() + ": truncated multi-vector payload");
  };
  need(2 * images);
  for (std::size_t i = 0; i < images; ++i, p += 2) {
    st.offsets_.push_back(st.offsets_.back() + get_u16(p));
  }
  if (st.codec_.codec == Codec::kPq) {
    ProductQuantizer pq;
    pq.dim = st.dim_;
    pq.m = st.codec_.pq_m;
    require(pq.m > 0 && pq.dim % pq.m == 0, ErrorKind::kCorruption,
            path.string() + ": bad PQ geometry");
    pq.centroids.resize(pq.m * kPqCentroids * pq.sub_dim());
    need(pq.centroids.size() * 4);
    get_f32s(p, pq.centroids);
    p += pq.centroids.size() * 4;
    st.pq_ = std::move(pq);
  }
  const std::size_t code_bytes = st.total_tokens() * st.bytes_per_token();
  require(static_cast<std::size_t>(end - p) == code_bytes, ErrorKind::kCorruption,
          path.string() + ": code section size mismatch");
  st.codes_.assign(p, end);
  st.rebuild_index();
  return st;
}

}  // namespace tokenrank
