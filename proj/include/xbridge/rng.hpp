#pragma once

#include <cstdint>
#include <string_view>

namespace xbridge {

// Deterministic counter-free PRNG (splitmix64). Every stochastic draw in the
// project goes through this so that (seed, purpose, step) fully determines the
// stream, independent of call order elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; one value per call, cached pair dropped
  // so the stream stays a pure function of the call index.
  double normal();

  std::int64_t below(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t state_;
};

// Stable sub-seed derivation: hash of (base, tag, index). Used to give every
// parameter tensor and every training step its own independent stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

}  // namespace xbridge
