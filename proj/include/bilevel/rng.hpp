#ifndef BILEVEL_RNG_HPP
#define BILEVEL_RNG_HPP

#include <cstdint>
#include <random>

namespace bilevel {

/// Per-task random stream. Streams are derived from a master seed by a
/// counter-based split so that replications can be generated independently
/// and in any order with identical results.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    /// Derives the stream for sub-task `index` of the stream seeded by `seed`.
    static RngStream split(std::uint64_t seed, std::uint64_t index) {
        return RngStream(mix(seed ^ mix(index + 0x9e3779b97f4a7c15ULL)));
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }  // [0,1)
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }
    int poisson(double mean) {
        return std::poisson_distribution<int>(mean)(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace bilevel

#endif
