#pragma once

#include <cstdint>
#include <random>

namespace pfloc {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic stream handle. Substreams are named by a path of integer tags
// hanging off a base seed, e.g. seed/run/sensor/ps/measurement/kernel, so the
// same work item always draws from the same stream no matter which thread
// runs it or in what order.
class RngPath {
 public:
  RngPath() : state_(splitmix64(0)) {}
  explicit RngPath(std::uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ull)) {}

  RngPath child(std::uint64_t tag) const {
    RngPath c;
    c.state_ = splitmix64(state_ ^ splitmix64(tag ^ 0xbb67ae8584caa73bull));
    return c;
  }

  std::mt19937_64 engine() const { return std::mt19937_64(state_); }
  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Purpose tags, kept distinct from small loop indices by a high offset.
namespace stream {
inline constexpr std::uint64_t kScenario = 1ull << 40;
inline constexpr std::uint64_t kMeasurements = 2ull << 40;
inline constexpr std::uint64_t kLegacyFlow = 3ull << 40;
inline constexpr std::uint64_t kBirth = 4ull << 40;
inline constexpr std::uint64_t kBirthExpectation = 5ull << 40;
inline constexpr std::uint64_t kSampling = 6ull << 40;
inline constexpr std::uint64_t kResample = 7ull << 40;
inline constexpr std::uint64_t kRun = 8ull << 40;
}  // namespace stream

}  // namespace pfloc
