#include "tokenrank/token_store.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tokenrank/binary_io.hpp"

namespace tokenrank {

namespace {

constexpr double kUnnormalizedDeviation = 1e-3;
constexpr double kVerbatimDeviation = 1e-4;
constexpr double kAttentionSumTolerance = 1e-5;

std::string record_label(std::uint64_t index, const std::string& id) {
  std::string s = "record " + std::to_string(index);
  if (!id.empty()) s += " ('" + id + "')";
  return s;
}

std::vector<std::uint8_t> encode_header(const TokenStoreHeader& h) {
  std::vector<std::uint8_t> out(kStoreMagic, kStoreMagic + 4);
  put_u32(out, h.version);
  put_u16(out, h.flags);
  put_u32(out, h.dim);
  put_u16(out, h.dtype);
  put_u64(out, h.image_count);
  return out;
}

void check_record(const TokenSet& ts, std::uint32_t dim, std::uint16_t flags) {
  require(ts.size() >= 1, ErrorKind::kValidation,
          "record '" + ts.image_id + "' has no tokens");
  require(ts.size() <= kMaxTokens, ErrorKind::kCapacity,
          "record '" + ts.image_id + "' has " + std::to_string(ts.size()) +
              " tokens; the store holds at most 65535");
  require(ts.dim() == dim, ErrorKind::kFormat,
          "record '" + ts.image_id + "' has dim " + std::to_string(ts.dim()) +
              ", store dim is " + std::to_string(dim));
  require(flags_for(ts) == flags, ErrorKind::kFormat,
          "record '" + ts.image_id + "' optional channels differ from the store");
  require(ts.image_id.size() <= 0xffff, ErrorKind::kCapacity,
          "image id longer than 65535 bytes");
  if (ts.attention) {
    require(ts.attention->size() == ts.size(), ErrorKind::kFormat,
            "attention length mismatch in '" + ts.image_id + "'");
  }
  if (ts.cls) {
    require(ts.cls->size() == dim, ErrorKind::kFormat,
            "cls length mismatch in '" + ts.image_id + "'");
  }
}

std::vector<std::uint8_t> encode_record(const TokenSet& ts) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + ts.image_id.size() + 4 * (ts.tokens.values().size() + ts.dim() + ts.size()));
  put_u16(out, static_cast<std::uint16_t>(ts.image_id.size()));
  out.insert(out.end(), ts.image_id.begin(), ts.image_id.end());
  put_u16(out, static_cast<std::uint16_t>(ts.size()));
  if (ts.cls) put_f32s(out, *ts.cls);
  put_f32s(out, ts.tokens.values());
  if (ts.attention) put_f32s(out, *ts.attention);
  return out;
}

// Normalizes a vector already known to have a positive finite norm, keeping
// the bits when it is within kVerbatimDeviation of unit length.
void settle_unit(std::span<float> v, double norm, bool force) {
  if (!force && std::abs(norm - 1.0) <= kVerbatimDeviation) return;
  for (float& x : v) x = static_cast<float>(x / norm);
}

}  // namespace

std::uint16_t flags_for(const TokenSet& ts) {
  std::uint16_t f = 0;
  if (ts.attention) f |= kHasAttention;
  if (ts.cls) f |= kHasCls;
  return f;
}

void canonicalize(TokenSet& ts) {
  const std::size_t n = ts.size();
  require(n >= 1, ErrorKind::kCorruption, "'" + ts.image_id + "' has no tokens");

  std::vector<double> norms(n);
  bool unnormalized = false;
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = l2_norm(ts.tokens.row(i));
    require(std::isfinite(norms[i]) && norms[i] > 0.0, ErrorKind::kCorruption,
            "'" + ts.image_id + "' token " + std::to_string(i) +
                " has zero or non-finite norm");
    if (std::abs(norms[i] - 1.0) > kUnnormalizedDeviation) unnormalized = true;
  }
  ts.raw_norms.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ts.raw_norms[i] = static_cast<float>(norms[i]);
    settle_unit(ts.tokens.row(i), norms[i], unnormalized);
  }

  if (ts.cls) {
    const double norm = l2_norm(*ts.cls);
    require(std::isfinite(norm) && norm > 0.0, ErrorKind::kCorruption,
            "'" + ts.image_id + "' cls vector has zero or non-finite norm");
    settle_unit(*ts.cls, norm, false);
  }

  if (ts.attention) {
    double sum = 0.0;
    for (float a : *ts.attention) {
      require(std::isfinite(a) && a >= 0.0f, ErrorKind::kCorruption,
              "'" + ts.image_id + "' attention has a negative or non-finite entry");
      sum += a;
    }
    require(std::abs(sum - 1.0) <= kAttentionSumTolerance, ErrorKind::kCorruption,
            "'" + ts.image_id + "' attention sums to " + std::to_string(sum) +
                ", expected 1");
  }
}

TokenSet make_token_set(std::string image_id, Matrix rows,
                        std::optional<std::vector<float>> attention,
                        std::optional<std::vector<float>> cls) {
  TokenSet ts{std::move(image_id), std::move(rows), {}, std::move(attention), std::move(cls)};
  try {
    canonicalize(ts);
  } catch (const Error& e) {
    fail(ErrorKind::kValidation, e.what());
  }
  return ts;
}

// --- writer ---------------------------------------------------------------

TokenStoreWriter::TokenStoreWriter(const std::filesystem::path& path,
                                   std::uint32_t dim, std::uint16_t flags)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  require(out_.good(), ErrorKind::kValidation, "cannot create " + path.string());
  header_.dim = dim;
  header_.flags = flags;
  const auto head = encode_header(header_);
  out_.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
  bytes_ = head.size();
}

TokenStoreWriter::~TokenStoreWriter() {
  if (!finished_) {
    try {
      finish();
    } catch (...) {
    }
  }
}

void TokenStoreWriter::append(const TokenSet& ts) {
  require(!finished_, ErrorKind::kValidation, "store writer already finished");
  check_record(ts, header_.dim, header_.flags);
  const auto rec = encode_record(ts);
  out_.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  require(out_.good(), ErrorKind::kValidation, "write failed on " + path_.string());
  bytes_ += rec.size();
  ++header_.image_count;
}

std::uint64_t TokenStoreWriter::finish() {
  if (finished_) return bytes_;
  finished_ = true;
  const auto head = encode_header(header_);
  out_.seekp(0);
  out_.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
  out_.close();
  require(!out_.fail(), ErrorKind::kValidation, "write failed on " + path_.string());
  return bytes_;
}

std::uint64_t write_store(std::span<const TokenSet> records,
                          const std::filesystem::path& path) {
  std::uint32_t dim = 0;
  std::uint16_t flags = 0;
  if (!records.empty()) {
    dim = static_cast<std::uint32_t>(records.front().dim());
    flags = flags_for(records.front());
  }
  TokenStoreWriter writer(path, dim, flags);
  for (const auto& r : records) writer.append(r);
  return writer.finish();
}

// --- reader ---------------------------------------------------------------

class TokenStoreReader::Source {
 public:
  virtual ~Source() = default;
  /// Copies exactly n bytes or returns false at end of data.
  virtual bool read(void* dst, std::size_t n) = 0;
  virtual bool at_end() = 0;
};

namespace {

class StreamSource final : public TokenStoreReader::Source {
 public:
  explicit StreamSource(const std::filesystem::path& path)
      : in_(path, std::ios::binary) {
    require(in_.good(), ErrorKind::kValidation, "cannot open " + path.string());
  }
  bool read(void* dst, std::size_t n) override {
    if (n == 0) return true;
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(in_.gcount()) == n;
  }
  bool at_end() override {
    return in_.peek() == std::ifstream::traits_type::eof();
  }

 private:
  std::ifstream in_;
};

class MappedSource final : public TokenStoreReader::Source {
 public:
  explicit MappedSource(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    require(fd_ >= 0, ErrorKind::kValidation, "cannot open " + path.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      fail(ErrorKind::kValidation, "cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        fail(ErrorKind::kValidation, "cannot map " + path.string());
      }
      base_ = static_cast<const std::uint8_t*>(p);
    }
  }
  ~MappedSource() override {
    if (base_) ::munmap(const_cast<std::uint8_t*>(base_), size_);
    if (fd_ >= 0) ::close(fd_);
  }
  bool read(void* dst, std::size_t n) override {
    if (size_ - pos_ < n) {
      pos_ = size_;
      return false;
    }
    if (n > 0) std::memcpy(dst, base_ + pos_, n);
    pos_ += n;
    return true;
  }
  bool at_end() override { return pos_ >= size_; }

 private:
  int fd_ = -1;
  const std::uint8_t* base_ = nullptr;
  std::size_t size_ = 0;
  std::size_t pos_ = 0;
};

}  // namespace

TokenStoreReader::TokenStoreReader(const std::filesystem::path& path,
                                   AccessMode mode) {
  if (mode == AccessMode::kMapped) {
    source_ = std::make_unique<MappedSource>(path);
  } else {
    source_ = std::make_unique<StreamSource>(path);
  }
  std::uint8_t raw[kStoreHeaderBytes];
  require(source_->read(raw, sizeof raw), ErrorKind::kFormat,
          path.string() + ": unsupported format (file shorter than header)");
  require(std::memcmp(raw, kStoreMagic, 4) == 0, ErrorKind::kFormat,
          path.string() + ": unsupported format (bad magic)");
  header_.version = get_u32(raw + 4);
  header_.flags = get_u16(raw + 8);
  header_.dim = get_u32(raw + 10);
  header_.dtype = get_u16(raw + 14);
  header_.image_count = get_u64(raw + 16);
  require(header_.version == kStoreVersion, ErrorKind::kFormat,
          path.string() + ": unsupported format version " + std::to_string(header_.version));
  require(header_.dtype == 0, ErrorKind::kFormat,
          path.string() + ": unsupported dtype code " + std::to_string(header_.dtype));
  require((header_.flags & ~(kHasAttention | kHasCls)) == 0, ErrorKind::kFormat,
          path.string() + ": unknown flag bits");
  require(header_.image_count == 0 || header_.dim > 0, ErrorKind::kFormat,
          path.string() + ": zero embedding dim");
}

TokenStoreReader::~TokenStoreReader() = default;
TokenStoreReader::TokenStoreReader(TokenStoreReader&&) noexcept = default;
TokenStoreReader& TokenStoreReader::operator=(TokenStoreReader&&) noexcept = default;

std::optional<TokenSet> TokenStoreReader::next() {
  if (index_ >= header_.image_count) {
    require(source_->at_end(), ErrorKind::kCorruption,
            "trailing data after " + std::to_string(header_.image_count) +
                " declared records");
    return std::nullopt;
  }
  const std::uint64_t idx = index_;
  auto truncated = [&](const std::string& id) {
    fail(ErrorKind::kCorruption, "truncated " + record_label(idx, id));
  };

  std::uint8_t u16buf[2];
  if (!source_->read(u16buf, 2)) truncated("");
  TokenSet ts;
  ts.image_id.resize(get_u16(u16buf));
  if (!source_->read(ts.image_id.data(), ts.image_id.size())) truncated("");
  if (!source_->read(u16buf, 2)) truncated(ts.image_id);
  const std::size_t n = get_u16(u16buf);
  require(n >= 1, ErrorKind::kCorruption, record_label(idx, ts.image_id) + " has zero tokens");
  const std::size_t d = header_.dim;

  std::vector<std::uint8_t> buf;
  auto read_floats = [&](std::span<float> out) {
    buf.resize(out.size() * 4);
    if (!source_->read(buf.data(), buf.size())) truncated(ts.image_id);
    get_f32s(buf.data(), out);
  };
  if (header_.has_cls()) {
    ts.cls.emplace(d);
    read_floats(*ts.cls);
  }
  ts.tokens = Matrix(n, d);
  read_floats(ts.tokens.storage());
  if (header_.has_attention()) {
    ts.attention.emplace(n);
    read_floats(*ts.attention);
  }

  try {
    canonicalize(ts);
  } catch (const Error& e) {
    fail(ErrorKind::kCorruption, record_label(idx, ts.image_id) + ": " + e.what());
  }
  ++index_;
  return ts;
}

std::vector<TokenSet> read_store(const std::filesystem::path& path,
                                 AccessMode mode) {
  TokenStoreReader reader(path, mode);
  std::vector<TokenSet> out;
  out.reserve(std::min<std::uint64_t>(reader.header().image_count, 1u << 20));
  while (auto ts = reader.next()) out.push_back(std::move(*ts));
  return out;
}

}  // namespace tokenrank
