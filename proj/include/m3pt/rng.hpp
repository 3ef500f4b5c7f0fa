#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace m3pt {

// Portable random source. std::mt19937_64 output is fully specified by the
// standard; the distributions below are implemented here so that sequences
// are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n);

    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Deterministic child seed for a named phase, so every random stream in a
// run hangs off a single root seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

// FNV-1a, used for input hashing in run manifests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace m3pt
