#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"
#include "tokenrank/token_store.hpp"

using namespace tokenrank;
using testing::TempDir;

namespace {

TokenSet fixture(const std::string& id, std::size_t n, std::size_t d, std::uint64_t seed,
                 bool optionals) {
  Rng rng(seed);
  Matrix rows(n, d);
  for (auto& x : rows.storage()) x = static_cast<float>(rng.normal());
  std::optional<std::vector<float>> att, cls;
  if (optionals) {
    std::vector<float> a(n, 1.0f / static_cast<float>(n));
    att = a;
    std::vector<float> c(d, 0.0f);
    c[0] = 1.0f;
    cls = c;
  }
  TokenSet ts;
  ts.image_id = id;
  ts.tokens = std::move(rows);
  ts.attention = att;
  ts.cls = cls;
  return ts;
}

std::vector<TokenSet> canonical(std::vector<TokenSet> v) {
  for (auto& ts : v) canonicalize(ts);
  return v;
}

}  // namespace

TEST_CASE("empty store is a 24-byte header") {
  TempDir dir;
  const auto path = dir / "empty.cbtk";
  CHECK(write_store({}, path) == 24);
  CHECK(std::filesystem::file_size(path) == 24);
  const auto back = read_store(path);
  CHECK(back.empty());
}

TEST_CASE("one-record store size follows the record layout") {
  TempDir dir;
  const auto path = dir / "one.cbtk";
  const std::string id = "img_0001";
  std::vector<TokenSet> recs{fixture(id, 196, 384, 1, false)};
  const auto bytes = write_store(recs, path);
  const std::uint64_t expected = 24 + 2 + id.size() + 2 + 196ull * 384 * 4;
  CHECK(bytes == expected);
  CHECK(std::filesystem::file_size(path) == expected);
}

TEST_CASE("round trip preserves order and content in both access modes") {
  TempDir dir;
  const auto path = dir / "three.cbtk";
  std::vector<TokenSet> recs{fixture("b", 5, 8, 1, true), fixture("a", 3, 8, 2, true),
                             fixture("c", 1, 8, 3, true)};
  write_store(recs, path);
  const auto streamed = read_store(path, AccessMode::kStream);
  const auto mapped = read_store(path, AccessMode::kMapped);
  REQUIRE(streamed.size() == 3);
  CHECK(streamed[0].image_id == "b");
  CHECK(streamed[1].image_id == "a");
  CHECK(streamed[2].image_id == "c");
  CHECK(streamed == canonical(recs));
  CHECK(mapped == streamed);
}

TEST_CASE("rows are normalized on read and raw norms kept") {
  TempDir dir;
  const auto path = dir / "norm.cbtk";
  TokenSet raw;
  raw.image_id = "x";
  raw.tokens = Matrix(2, 2, {2.0f, 0.0f, 0.0f, 1.0f});
  std::vector<TokenSet> recs{raw};
  write_store(recs, path);
  const auto back = read_store(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].tokens.row(0)[0] == 1.0f);
  CHECK(back[0].raw_norms[0] == 2.0f);
  CHECK(back[0].raw_norms[1] == 1.0f);
}

TEST_CASE("truncation inside record 2 is a corruption error naming it") {
  TempDir dir;
  const auto path = dir / "trunc.cbtk";
  std::vector<TokenSet> recs{fixture("r0", 4, 8, 1, false), fixture("r1", 4, 8, 2, false),
                             fixture("r2", 4, 8, 3, false)};
  const auto total = write_store(recs, path);
  std::filesystem::resize_file(path, total - 20);
  for (auto mode : {AccessMode::kStream, AccessMode::kMapped}) {
    try {
      read_store(path, mode);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kCorruption);
      CHECK(std::string(e.what()).find("record 2") != std::string::npos);
    }
  }
}

TEST_CASE("bad magic and version are format errors") {
  TempDir dir;
  const auto path = dir / "bad.cbtk";
  std::vector<TokenSet> recs{fixture("r0", 2, 4, 1, false)};
  write_store(recs, path);
  auto bytes = std::vector<char>(std::filesystem::file_size(path));
  {
    std::ifstream in(path, std::ios::binary);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  auto write_back = [&](std::vector<char> b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto expect_format = [&] {
    try {
      read_store(path);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kFormat);
    }
  };
  auto b1 = bytes;
  b1[0] = 'X';
  write_back(b1);
  expect_format();
  auto b2 = bytes;
  b2[4] = 9;
  write_back(b2);
  expect_format();
}

TEST_CASE("writer rejects mixed dims and oversize token counts") {
  TempDir dir;
  std::vector<TokenSet> mixed{fixture("a", 2, 4, 1, false), fixture("b", 2, 5, 2, false)};
  try {
    write_store(mixed, dir / "mixed.cbtk");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kFormat);
  }
  TokenSet big;
  big.image_id = "big";
  big.tokens = Matrix(kMaxTokens + 1, 1);
  for (auto& x : big.tokens.storage()) x = 1.0f;
  std::vector<TokenSet> too_many{big};
  try {
    write_store(too_many, dir / "big.cbtk");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kCapacity);
  }
}

TEST_CASE("canonicalize rejects zero rows and bad attention") {
  TokenSet z;
  z.image_id = "z";
  z.tokens = Matrix(2, 2, {0, 0, 1, 0});
  CHECK_THROWS_AS(canonicalize(z), Error);
  TokenSet a;
  a.image_id = "a";
  a.tokens = Matrix(2, 2, {1, 0, 0, 1});
  a.attention = std::vector<float>{0.7f, 0.7f};
  CHECK_THROWS_AS(canonicalize(a), Error);
}

TEST_CASE("canonical rows come back bit-for-bit") {
  Rng rng(5);
  auto m = testing::random_unit_rows(16, 12, rng);
  const auto ts = make_token_set("u", m);
  CHECK(ts.tokens == m);
}
