#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace melora {

/// splitmix64 finalizer; mixes a 64-bit value into a well-distributed output.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x6a09e667f3bcc909ull));
}

/// Deterministic random source. Gaussians come from Box-Muller over raw
/// mt19937_64 words so the byte stream does not depend on the standard
/// library's distribution implementations.
class GaussianRng {
public:
    explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform double in (0, 1].
    double uniform() {
        return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
    }

    double normal(double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_ * stddev;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * kPi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle) * stddev;
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Index in [0, bound). Modulo bias is irrelevant at the scales used here.
    std::size_t index(std::size_t bound) {
        return static_cast<std::size_t>(engine_() % static_cast<std::uint64_t>(bound));
    }

private:
    static constexpr double kPi = 3.141592653589793238462643383279502884;

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace melora
