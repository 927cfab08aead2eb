#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "test_support.hpp"
#include "tokenrank/aggregation.hpp"
#include "tokenrank/engine.hpp"

using namespace tokenrank;
using Catch::Approx;

namespace {

TokenSet random_set(std::size_t n, std::size_t d, std::uint64_t seed, bool with_attention = true) {
  Rng rng(seed);
  Matrix rows(n, d);
  std::vector<float> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = 0.5 + rng.uniform01();
    for (auto& x : rows.row(i)) x = static_cast<float>(rng.normal() * scale);
  }
  std::optional<std::vector<float>> att;
  if (with_attention) {
    std::vector<float> a(n);
    double s = 0.0;
    for (auto& x : a) s += (x = static_cast<float>(rng.uniform01() + 0.01));
    for (auto& x : a) x = static_cast<float>(x / s);
    att = a;
  }
  std::vector<float> cls(d);
  for (auto& x : cls) x = static_cast<float>(rng.normal());
  return make_token_set("r" + std::to_string(seed), rows, att, cls);
}

std::set<std::uint32_t> as_set(const std::vector<std::uint32_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("fps picks the antipode after the attention peak") {
  Matrix rows(4, 2, {1, 0, 0, 1, -1, 0, 0.9f, 0.436f});
  const auto ts = make_token_set("f", rows, std::vector<float>{0.7f, 0.1f, 0.1f, 0.1f});
  const auto seeds = select_seeds(ts, {SeedStrategy::kFps, 2});
  CHECK(seeds == std::vector<std::uint32_t>{0, 2});
}

TEST_CASE("attention top-K") {
  const auto ts = make_token_set("a", Matrix(3, 2, {1, 0, 0, 1, 0.6f, 0.8f}),
                                 std::vector<float>{0.1f, 0.5f, 0.4f});
  CHECK(as_set(select_seeds(ts, {SeedStrategy::kAttention, 2})) == std::set<std::uint32_t>{1, 2});
}

TEST_CASE("K=N returns every index for every strategy") {
  const auto ts = random_set(12, 6, 1);
  std::set<std::uint32_t> all;
  for (std::uint32_t i = 0; i < 12; ++i) all.insert(i);
  for (auto s : {SeedStrategy::kAttention, SeedStrategy::kFps, SeedStrategy::kNorm,
                 SeedStrategy::kNormXAttn, SeedStrategy::kRandom, SeedStrategy::kGrid,
                 SeedStrategy::kClsSim, SeedStrategy::kClsDist}) {
    const auto seeds = select_seeds(ts, {s, 12, 9});
    CHECK(seeds.size() == 12);
    CHECK(as_set(seeds) == all);
  }
}

TEST_CASE("seeds are distinct and in range for every strategy and K") {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto ts = random_set(5 + trial * 3, 8, 100 + trial);
    for (auto s : {SeedStrategy::kAttention, SeedStrategy::kFps, SeedStrategy::kNorm,
                   SeedStrategy::kNormXAttn, SeedStrategy::kRandom, SeedStrategy::kGrid,
                   SeedStrategy::kClsSim, SeedStrategy::kClsDist}) {
      for (std::size_t k : {std::size_t{1}, std::size_t{3}, ts.size()}) {
        const auto seeds = select_seeds(ts, {s, k, trial});
        REQUIRE(seeds.size() == k);
        CHECK(as_set(seeds).size() == k);
        for (auto i : seeds) CHECK(i < ts.size());
      }
    }
  }
}

TEST_CASE("norm seeds follow raw norms, grid follows stride") {
  Matrix rows(4, 2, {1, 0, 0, 3, 2, 0, 0, 0.5f});
  const auto ts = make_token_set("n", rows);
  CHECK(select_seeds(ts, {SeedStrategy::kNorm, 2}) == std::vector<std::uint32_t>{1, 2});
  const auto g = select_seeds(random_set(10, 4, 2), {SeedStrategy::kGrid, 4});
  CHECK(as_set(g) == std::set<std::uint32_t>{0, 3, 5, 8});
}

TEST_CASE("random seeds depend on the seed only") {
  const auto ts = random_set(40, 4, 3);
  const auto a = select_seeds(ts, {SeedStrategy::kRandom, 8, 5});
  CHECK(a == select_seeds(ts, {SeedStrategy::kRandom, 8, 5}));
  CHECK(a != select_seeds(ts, {SeedStrategy::kRandom, 8, 6}));
}

TEST_CASE("invalid K is rejected") {
  const auto ts = random_set(4, 4, 4);
  CHECK_THROWS_AS(select_seeds(ts, {SeedStrategy::kFps, 0}), Error);
  CHECK_THROWS_AS(select_seeds(ts, {SeedStrategy::kFps, 5}), Error);
  const auto no_att = random_set(4, 4, 4, false);
  CHECK_NOTHROW(select_seeds(no_att, {SeedStrategy::kFps, 2}));
  CHECK_THROWS_AS(select_seeds(no_att, {SeedStrategy::kAttention, 2}), Error);
}

TEST_CASE("hard assignment: duplicate of a seed goes to that seed, ties to lower rank") {
  // seeds: index 0 = (1,0), index 1 = (0,1); token 2 duplicates seed 1;
  // token 3 is equidistant.
  const float h = 0.70710678f;
  const auto ts = make_token_set("h", Matrix(4, 2, {1, 0, 0, 1, 0, 1, h, h}));
  const std::vector<std::uint32_t> seeds{0, 1};
  const auto asg = assign_tokens(ts, seeds, AssignMode::kHardTop1);
  REQUIRE(asg.tokens == std::vector<std::uint32_t>{2, 3});
  CHECK(asg.clusters[asg.offsets[0]] == 1);
  CHECK(asg.weights[asg.offsets[0]] == 1.0);
  CHECK(asg.clusters[asg.offsets[1]] == 0);
  CHECK(asg.similarity_evaluations == 4 * 2);
}

TEST_CASE("soft_top2 weights are a softmax of cosines") {
  // Seeds along e0, e1, e2; token with cosines (0.8, 0.6, 0).
  const auto ts = make_token_set("s", Matrix(4, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0.8f, 0.6f, 0}));
  const std::vector<std::uint32_t> seeds{0, 1, 2};
  const auto asg = assign_tokens(ts, seeds, AssignMode::kSoftTop2, 1.0);
  REQUIRE(asg.offsets[1] - asg.offsets[0] == 2);
  const double e1 = std::exp(0.8), e2 = std::exp(0.6);
  CHECK(asg.clusters[0] == 0);
  CHECK(asg.clusters[1] == 1);
  CHECK(asg.weights[0] == Approx(e1 / (e1 + e2)).margin(1e-6));
  CHECK(asg.weights[1] == Approx(e2 / (e1 + e2)).margin(1e-6));
  CHECK(asg.weights[0] == Approx(0.5498).margin(1e-4));
  CHECK(asg.weights[1] == Approx(0.4502).margin(1e-4));
}

TEST_CASE("assignment weights sum to one per token in every mode") {
  const auto ts = random_set(40, 8, 6);
  const auto seeds = select_seeds(ts, {SeedStrategy::kFps, 6});
  for (auto m : {AssignMode::kHardTop1, AssignMode::kSoftTop2, AssignMode::kSoftTop4,
                 AssignMode::kGroupDense}) {
    const auto asg = assign_tokens(ts, seeds, m, 0.5);
    CHECK(asg.tokens.size() == 34);
    for (std::size_t t = 0; t < asg.tokens.size(); ++t) {
      double s = 0.0;
      for (auto j = asg.offsets[t]; j < asg.offsets[t + 1]; ++j) s += asg.weights[j];
      CHECK(s == Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("seed plus mean of three tokens") {
  Rng rng(7);
  const auto rows = testing::random_unit_rows(3, 5, rng);
  const auto ts = make_token_set("m", rows);
  const std::vector<std::uint32_t> seeds{0};
  const auto asg = assign_tokens(ts, seeds, AssignMode::kHardTop1);
  const auto its = aggregate(ts, seeds, asg);
  std::vector<double> z(5);
  for (std::size_t k = 0; k < 5; ++k) {
    z[k] = double(rows.row(0)[k]) + (double(rows.row(1)[k]) + rows.row(2)[k]) / 2.0;
  }
  double n = 0.0;
  for (double x : z) n += x * x;
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(its.tokens.row(0)[k] == Approx(z[k] / std::sqrt(n)).margin(1e-6));
  }
}

TEST_CASE("cancelling cluster raises a degenerate error") {
  const auto ts = make_token_set("c", Matrix(2, 2, {1, 0, -1, 0}));
  const std::vector<std::uint32_t> seeds{0};
  const auto asg = assign_tokens(ts, seeds, AssignMode::kHardTop1);
  try {
    aggregate(ts, seeds, asg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerate);
    CHECK(std::string(e.what()).find("degenerate instance token") != std::string::npos);
  }
}

TEST_CASE("K=N aggregation returns the tokens and preserves LI scores") {
  for (std::uint64_t t = 0; t < 10; ++t) {
    const auto ts = random_set(9, 6, 200 + t);
    const auto g = random_set(7, 6, 300 + t);
    const auto its = build_instance_tokens(ts, {{SeedStrategy::kFps, 9}});
    for (std::size_t k = 0; k < 9; ++k) {
      const auto src = ts.tokens.row(its.seeds[k]);
      const auto got = its.tokens.row(k);
      CHECK(std::equal(src.begin(), src.end(), got.begin()));
    }
    CHECK(late_interaction_score(its.tokens, g.tokens) ==
          Approx(late_interaction_score(ts.tokens, g.tokens)).margin(1e-6));
  }
}

TEST_CASE("instance tokens are unit norm and count N*K similarities") {
  const auto ts = random_set(50, 16, 8);
  std::uint64_t evals = 0;
  for (auto m : {AssignMode::kHardTop1, AssignMode::kSoftTop2, AssignMode::kGroupDense}) {
    const auto its = build_instance_tokens(ts, {{SeedStrategy::kFps, 8}, m, 1.0}, &evals);
    CHECK(evals == 50 * 8);
    CHECK(its.size() == 8);
    for (std::size_t k = 0; k < 8; ++k) CHECK(l2_norm(its.tokens.row(k)) == Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("aggregation is deterministic across thread counts") {
  std::vector<TokenSet> sets;
  for (std::uint64_t i = 0; i < 16; ++i) sets.push_back(random_set(30, 8, 400 + i));
  AggregationConfig cfg{{SeedStrategy::kFps, 6}, AssignMode::kSoftTop4, 0.5};
  std::vector<InstanceTokenSet> a, b;
  for (const auto& s : sets) a.push_back(build_instance_tokens(s, cfg));
  b.resize(sets.size());
  parallel_for(sets.size(), 8, [&](std::size_t i) { b[i] = build_instance_tokens(sets[i], cfg); });
  for (std::size_t i = 0; i < sets.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
}

TEST_CASE("per-image k-means baselines") {
  // Two well separated pairs of duplicates.
  const auto ts = make_token_set("k", Matrix(4, 2, {1, 0, 1, 0, 0, 1, 0, 1}));
  const auto c = kmeans_per_image(ts, 2, 20, 1, KMeansVariant::kCentroid);
  std::set<std::pair<float, float>> got;
  for (std::size_t k = 0; k < 2; ++k) got.insert({c.tokens.row(k)[0], c.tokens.row(k)[1]});
  CHECK(got == std::set<std::pair<float, float>>{{1.0f, 0.0f}, {0.0f, 1.0f}});

  const auto r = random_set(10, 4, 9);
  const auto med = kmeans_per_image(r, 4, 20, 1, KMeansVariant::kMedoid);
  for (std::size_t k = 0; k < 4; ++k) {
    bool member = false;
    for (std::size_t i = 0; i < r.size(); ++i) member = member || std::equal(
        r.tokens.row(i).begin(), r.tokens.row(i).end(), med.tokens.row(k).begin());
    CHECK(member);
  }
  const auto full = kmeans_per_image(r, 10, 20, 1, KMeansVariant::kCentroid);
  for (std::size_t i = 0; i < r.size(); ++i) {
    double best = -2.0;
    for (std::size_t k = 0; k < 10; ++k) best = std::max<double>(best, dot(r.tokens.row(i), full.tokens.row(k)));
    CHECK(best == Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("instance tokens round trip through a token set") {
  const auto its = build_instance_tokens(random_set(20, 8, 10), {{SeedStrategy::kFps, 4}});
  const auto back = instance_from_token_set(to_token_set(its));
  CHECK(back.tokens == its.tokens);
  CHECK(back.image_id == its.image_id);
}
