#pragma once

#include <cstring>

namespace tokenrank::detail {

// Eight f32 lanes; GCC and Clang lower this to one SIMD register where the
// target has one and to scalar code otherwise.
typedef float Lanes __attribute__((vector_size(32)));

inline constexpr std::size_t kLaneCount = 8;

inline Lanes load_lanes(const float* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline Lanes splat(float x) { return Lanes{x, x, x, x, x, x, x, x}; }

inline Lanes lane_max(Lanes a, Lanes b) { return a > b ? a : b; }

}  // namespace tokenrank::detail
