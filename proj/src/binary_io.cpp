#include "tokenrank/binary_io.hpp"

#include <fstream>

#include "tokenrank/core.hpp"

namespace tokenrank {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kValidation, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  require(in.good(), ErrorKind::kCorruption, "short read on " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kValidation, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::kValidation, "write failed on " + path.string());
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const std::string head = c.header.dump();
  std::vector<std::uint8_t> bytes;
  bytes.reserve(4 + head.size() + c.payload.size() + 8);
  put_u32(bytes, static_cast<std::uint32_t>(head.size()));
  bytes.insert(bytes.end(), head.begin(), head.end());
  bytes.insert(bytes.end(), c.payload.begin(), c.payload.end());
  put_u64(bytes, fnv1a64(bytes));
  write_file_bytes(path, bytes);
}

Container read_container(const std::filesystem::path& path,
                         const std::string& expected_kind) {
  const auto bytes = read_file_bytes(path);
  const std::string where = path.string();
  require(bytes.size() >= 12, ErrorKind::kCorruption, where + ": file too short");
  const std::uint32_t head_len = get_u32(bytes.data());
  require(4ull + head_len + 8 <= bytes.size(), ErrorKind::kCorruption,
          where + ": header length exceeds file size");
  const std::size_t body = bytes.size() - 8;
  const std::uint64_t stored = get_u64(bytes.data() + body);
  require(stored == fnv1a64(std::span<const std::uint8_t>(bytes.data(), body)),
          ErrorKind::kCorruption, where + ": checksum mismatch");

  Container c;
  try {
    c.header = Json::parse(bytes.begin() + 4, bytes.begin() + 4 + head_len);
  } catch (const Json::exception& e) {
    fail(ErrorKind::kCorruption, where + ": bad header JSON: " + e.what());
  }
  require(c.header.value("kind", std::string{}) == expected_kind,
          ErrorKind::kFormat,
          where + ": expected a " + expected_kind + " file");
  c.payload.assign(bytes.begin() + 4 + head_len, bytes.begin() + static_cast<std::ptrdiff_t>(body));
  return c;
}

}  // namespace tokenrank
