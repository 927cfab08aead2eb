#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace tokenrank {

using Json = nlohmann::ordered_json;

// Little-endian encoding helpers. Everything persisted by this library is
// little-endian regardless of host order.

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_f32s(std::vector<std::uint8_t>& out, std::span<const float> v) {
  const std::size_t at = out.size();
  out.resize(at + v.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!v.empty()) std::memcpy(out.data() + at, v.data(), v.size() * 4);
  } else {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(v[i]);
      for (int b = 0; b < 4; ++b) out[at + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int b = 7; b >= 0; --b) v = (v << 8) | p[b];
  return v;
}

inline void get_f32s(const std::uint8_t* p, std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!out.empty()) std::memcpy(out.data(), p, out.size() * 4);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  }
}

/// Self-describing container used for codebooks, PCA models, flat indexes
/// and multi-vector stores:
///
///   u32 LE header length | header JSON (UTF-8) | payload | u64 LE FNV-1a
///
/// The checksum covers every preceding byte.
struct Container {
  Json header;
  std::vector<std::uint8_t> payload;
};

void write_container(const std::filesystem::path& path, const Container& c);

/// Verifies length fields and checksum; `expected_kind` must match the
/// header's "kind" field.
Container read_container(const std::filesystem::path& path,
                         const std::string& expected_kind);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

}  // namespace tokenrank
