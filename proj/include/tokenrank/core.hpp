#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tokenrank {

enum class ErrorKind {
  kValidation,   // bad arguments, violated preconditions
  kFormat,       // unsupported or inconsistent file layout
  kCorruption,   // truncated or damaged data
  kCapacity,     // a value exceeds a format limit
  kDegenerate,   // numerically degenerate input (zero vectors)
  kProtocol,     // evaluation protocol violated
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

/// Dense row-major float matrix. Rows are the unit of every algorithm here
/// (tokens, centroids, descriptors), so row access returns spans.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<float> row(std::size_t i) {
    return {data_.data() + i * cols_, cols_};
  }
  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }

  void append_row(std::span<const float> r);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Inner product with a fixed blocked reduction order: eight interleaved
// partial sums combined pairwise. Same inputs give the same bits on every
// call, independent of caller or thread.
float dot(const float* a, const float* b, std::size_t n) noexcept;

inline float dot(std::span<const float> a, std::span<const float> b) noexcept {
  return dot(a.data(), b.data(), a.size());
}

double l2_norm(std::span<const float> v) noexcept;

/// Scales v to unit length. Returns false (and leaves v untouched) when the
/// norm is below `min_norm`.
bool normalize(std::span<float> v, double min_norm = 1e-12) noexcept;

std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;

/// Stable derivation of a child seed from a parent seed and a label.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) noexcept;

/// Seeded generator with distribution helpers whose output is fixed by the
/// engine alone (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Uniform double in [0, 1).
  double uniform01();
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Effective worker count: explicit value if > 0, else TOKENRANK_THREADS,
/// else hardware concurrency.
unsigned resolve_threads(unsigned requested);

/// Runs fn(i) for i in [0, n) on `threads` workers with static contiguous
/// chunks. Exceptions are rethrown on the calling thread (first one wins).
void parallel_for(std::size_t n, unsigned threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace tokenrank
