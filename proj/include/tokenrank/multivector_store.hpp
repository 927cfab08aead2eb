#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tokenrank/aggregation.hpp"

namespace tokenrank {

enum class Codec { kF32, kFp16, kInt8, kPq };

struct CodecSpec {
  Codec codec = Codec::kF32;
  std::size_t pq_m = 0;  // sub-vectors, pq only

  std::string to_string() const;
  /// Accepts f32 | fp16 | int8 | pq:<m>.
  static CodecSpec parse(std::string_view s);
  friend bool operator==(const CodecSpec&, const CodecSpec&) = default;
};

/// IEEE binary16 conversion, round to nearest even.
std::uint16_t float_to_half(float f) noexcept;
float half_to_float(std::uint16_t h) noexcept;

/// Per-vector symmetric INT8: scale = max|x| / 127, codes = round(x / scale).
struct Int8Vector {
  std::vector<std::int8_t> codes;
  float scale = 0.0f;
};
Int8Vector int8_encode(std::span<const float> x);
void int8_decode(std::span<const std::int8_t> codes, float scale, std::span<float> out);

inline constexpr std::size_t kPqCentroids = 256;
inline constexpr int kPqIterations = 25;
inline constexpr std::size_t kDefaultPqTrainBudget = 65'536;

/// m sub-quantizers with 256 centroids each.
struct ProductQuantizer {
  std::size_t dim = 0;
  std::size_t m = 0;
  std::vector<float> centroids;  // m x 256 x (dim / m)

  std::size_t sub_dim() const noexcept { return dim / m; }
  void encode(std::span<const float> x, std::span<std::uint8_t> codes) const;
  void decode(std::span<const std::uint8_t> codes, std::span<float> out) const;
};

/// Seeded k-means per sub-space. Needs dim % m == 0 and >= 256 rows.
ProductQuantizer train_pq(const Matrix& sample, std::size_t m, std::uint64_t seed,
                          unsigned threads = 1);

/// Stage-2 payload: per-image token sets under one codec, ids ascending.
class MultiVectorStore {
 public:
  /// Takes f32 instance tokens; ids must be unique. Sorted by id.
  static MultiVectorStore from_instances(std::vector<InstanceTokenSet> sets);

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const CodecSpec& codec() const noexcept { return codec_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::optional<std::size_t> find(const std::string& id) const;

  std::size_t token_count(std::size_t i) const noexcept {
    return static_cast<std::size_t>(offsets_[i + 1] - offsets_[i]);
  }
  std::size_t bytes_per_token() const noexcept;
  std::size_t total_tokens() const noexcept { return static_cast<std::size_t>(offsets_.back()); }

  /// Raw f32 rows (codec f32 only).
  const float* f32_tokens(std::size_t i) const;
  /// Decodes image i into `out` (resized to K' x dim).
  void decode(std::size_t i, Matrix& out) const;
  /// Decoded copy of the whole store under the f32 codec.
  MultiVectorStore decoded() const;

  const std::optional<ProductQuantizer>& pq() const noexcept { return pq_; }

  friend MultiVectorStore quantize_store(const MultiVectorStore&, const CodecSpec&,
                                         const Matrix*, std::uint64_t, unsigned);
  friend void save_mvstore(const MultiVectorStore&, const std::filesystem::path&);
  friend MultiVectorStore load_mvstore(const std::filesystem::path&);

 private:
  CodecSpec codec_;
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::uint64_t> offsets_{0};  // token offsets
  std::vector<std::uint8_t> codes_;
  std::optional<ProductQuantizer> pq_;

  void rebuild_index();
};

/// Re-encodes an f32 store. pq needs a training sample (>= 256 rows); when
/// none is given, up to 65,536 store tokens are sampled with `seed`.
MultiVectorStore quantize_store(const MultiVectorStore& store, const CodecSpec& codec,
                                const Matrix* train_sample = nullptr, std::uint64_t seed = 0,
                                unsigned threads = 1);

void save_mvstore(const MultiVectorStore& store, const std::filesystem::path& path);
MultiVectorStore load_mvstore(const std::filesystem::path& path);

}  // namespace tokenrank
