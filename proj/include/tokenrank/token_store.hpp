#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenrank/core.hpp"

namespace tokenrank {

/// Per-image patch tokens. `tokens` rows are unit norm once canonicalized;
/// `raw_norms` keeps the producer's row norms (the "norm" seed strategy).
struct TokenSet {
  std::string image_id;
  Matrix tokens;
  std::vector<float> raw_norms;
  std::optional<std::vector<float>> attention;  // CLS->patch, sums to 1
  std::optional<std::vector<float>> cls;        // unit norm

  std::size_t size() const noexcept { return tokens.rows(); }
  std::size_t dim() const noexcept { return tokens.cols(); }

  friend bool operator==(const TokenSet&, const TokenSet&) = default;
};

/// Brings a freshly produced record into canonical form: rows and CLS
/// normalized, raw norms recorded, attention validated. Rows already within
/// 1e-4 of unit norm are kept bit-for-bit. Throws kCorruption on zero or
/// non-finite rows and on attention that is negative or does not sum to 1.
void canonicalize(TokenSet& ts);

/// Builds a canonical TokenSet from producer rows (any positive norms).
TokenSet make_token_set(std::string image_id, Matrix rows,
                        std::optional<std::vector<float>> attention = {},
                        std::optional<std::vector<float>> cls = {});

inline constexpr char kStoreMagic[4] = {'C', 'B', 'T', 'K'};
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 24;
inline constexpr std::size_t kMaxTokens = 65535;

enum StoreFlags : std::uint16_t {
  kHasAttention = 1u << 0,
  kHasCls = 1u << 1,
};

/// Fixed 24-byte header: magic[4], version u32, flags u16, dim u32,
/// dtype u16, image_count u64; all little-endian, packed.
struct TokenStoreHeader {
  std::uint32_t version = kStoreVersion;
  std::uint16_t flags = 0;
  std::uint32_t dim = 0;
  std::uint16_t dtype = 0;  // 0 = f32 LE
  std::uint64_t image_count = 0;

  bool has_attention() const noexcept { return flags & kHasAttention; }
  bool has_cls() const noexcept { return flags & kHasCls; }
};

/// Single-writer streaming store writer. The image count is patched into
/// the header by finish().
class TokenStoreWriter {
 public:
  TokenStoreWriter(const std::filesystem::path& path, std::uint32_t dim,
                   std::uint16_t flags);
  ~TokenStoreWriter();
  TokenStoreWriter(const TokenStoreWriter&) = delete;
  TokenStoreWriter& operator=(const TokenStoreWriter&) = delete;

  void append(const TokenSet& ts);
  /// Returns total bytes written.
  std::uint64_t finish();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  TokenStoreHeader header_;
  std::uint64_t bytes_ = 0;
  bool finished_ = false;
};

std::uint16_t flags_for(const TokenSet& ts);

/// Writes records verbatim. Empty input produces a header-only file with
/// dim 0 and flags 0.
std::uint64_t write_store(std::span<const TokenSet> records,
                          const std::filesystem::path& path);

enum class AccessMode { kStream, kMapped };

/// Sequential reader. Records come back canonicalized in file order.
class TokenStoreReader {
 public:
  explicit TokenStoreReader(const std::filesystem::path& path,
                            AccessMode mode = AccessMode::kStream);
  ~TokenStoreReader();
  TokenStoreReader(TokenStoreReader&&) noexcept;
  TokenStoreReader& operator=(TokenStoreReader&&) noexcept;

  const TokenStoreHeader& header() const noexcept { return header_; }
  std::optional<TokenSet> next();
  std::uint64_t records_read() const noexcept { return index_; }

  class Source;

 private:
  std::unique_ptr<Source> source_;
  TokenStoreHeader header_;
  std::uint64_t index_ = 0;
};

std::vector<TokenSet> read_store(const std::filesystem::path& path,
                                 AccessMode mode = AccessMode::kStream);

}  // namespace tokenrank
