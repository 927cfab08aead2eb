#pragma once

#include <cstdint>
#include <vector>

#include "tokenrank/manifest.hpp"
#include "tokenrank/token_store.hpp"

namespace tokenrank {

/// Parameters of the synthetic benchmark generator.
///
/// Every image has `tokens` rows: `identity_tokens` rows derived from its
/// identity's base parts, and background rows drawn from `prototypes`
/// shared background directions. Each view carries every prototype at
/// least once and fills the remaining background slots with a per-view
/// random mixture, so pooled descriptors drift with the view while token
/// matches do not. Each row is rotated away from its base direction by an
/// angle whose mean is `sigma_deg`.
struct SynthSpec {
  std::size_t identities = 500;
  std::size_t gallery_views = 2;
  std::size_t query_views = 5;
  std::size_t distractors = 5000;
  std::size_t tokens = 32;
  std::size_t dim = 32;
  std::size_t identity_tokens = 16;
  std::size_t prototypes = 8;
  double sigma_deg = 15.0;
  double mixture_skew = 0.5;      // log-normal spread of background mixture weights
  std::size_t part_library = 128; // identity parts drawn from a shared library; 0 = unique parts
  double photometric = 0.0;       // norm of a per-view shift added to every row
  double multi_id_fraction = 0.0; // queries that also show a second identity
  std::uint64_t seed = 42;

  void validate() const;
};

/// Records as a producer would write them: rows unnormalized (identity rows
/// have larger norms), CLS->patch attention and a CLS vector attached.
/// Pass through canonicalize() before using in memory.
struct SynthData {
  std::vector<TokenSet> records;  // gallery views, query views, distractors
  RelevanceManifest manifest;
};

SynthData generate_synthetic(const SynthSpec& spec, unsigned threads = 1);

/// Rotates unit vector `v` by `angle` radians towards a random direction
/// orthogonal to it. Exposed for tests.
void perturb_direction(std::span<float> v, double angle, Rng& rng);

}  // namespace tokenrank
