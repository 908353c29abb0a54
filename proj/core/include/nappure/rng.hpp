#pragma once

#include <cstdint>

#include "nappure/tensor.hpp"

namespace nappure {

// Deterministic seeded generator (splitmix64 state advance). The full output
// sequence is a function of the seed alone, so runs repeat exactly within a
// build. Not shared across workers; derive one stream per unit of work as
// SeededRng(seed ^ index) instead.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : state_(seed), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double uniform01();

    double uniform(double lo, double hi);

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double gaussian();

  private:
    std::uint64_t state_;
    std::uint64_t seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// n i.i.d. standard-normal draws; n = 0 yields an empty vector.
FlatVector sample_gaussian(SeededRng& rng, std::size_t n);

// Stable stream derivation: a stage label scrambles the run seed, the sample
// index is XORed in per the per-image stream rule.
std::uint64_t mix_seed(std::uint64_t seed, const char* stage);
inline std::uint64_t derive_seed(std::uint64_t stage_seed, std::uint64_t index) {
    return stage_seed ^ index;
}

}  // namespace nappure
