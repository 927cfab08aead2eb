#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "tokenrank/token_store.hpp"

namespace tokenrank {

/// kVlad only tags VLAD descriptors built by the codebook module.
enum class PoolMethod { kCls, kMean, kMax, kGem, kVlad };

std::string_view to_string(PoolMethod m);
PoolMethod parse_pool_method(std::string_view s);

/// How GeM treats negative activations before the power.
enum class GemSign {
  kClamp,   // max(x, 1e-6)^p
  kSigned,  // sign(x)|x|^p, inverted the same way
};

inline constexpr float kGemClampFloor = 1e-6f;

struct PoolOptions {
  PoolMethod method = PoolMethod::kGem;
  double gem_p = 3.0;
  GemSign gem_sign = GemSign::kClamp;
};

/// One unit-norm vector per image.
struct GlobalDescriptor {
  std::string image_id;
  std::vector<float> vector;
  PoolMethod method = PoolMethod::kMean;
};

/// Collapses a token set into a unit-norm global descriptor. Pooling runs
/// per dimension over tokens with double accumulation. Throws kValidation
/// for cls without a stored CLS vector or p <= 0, kDegenerate when the
/// pooled vector is zero.
GlobalDescriptor pool(const TokenSet& ts, const PoolOptions& opts);

/// A descriptor as an N=1 token set, for persistence in a CBTK store.
TokenSet to_token_set(const GlobalDescriptor& d);
GlobalDescriptor from_token_set(const TokenSet& ts, PoolMethod method);

}  // namespace tokenrank
