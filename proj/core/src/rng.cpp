#include "nappure/rng.hpp"

#include <cmath>

namespace nappure {

std::uint64_t SeededRng::next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double SeededRng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
}

double SeededRng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller with u1 bounded away from zero.
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

FlatVector sample_gaussian(SeededRng& rng, std::size_t n) {
    FlatVector out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = rng.gaussian();
    return out;
}

std::uint64_t mix_seed(std::uint64_t seed, const char* stage) {
    // FNV-1a over the stage label folded into the seed, then one splitmix step
    // so nearby seeds map to distant streams.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* p = stage; *p; ++p) {
        h ^= static_cast<unsigned char>(*p);
        h *= 0x100000001b3ULL;
    }
    SeededRng scramble(seed ^ h);
    return scramble.next_u64();
}

}  // namespace nappure
