#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace multi {

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch broadly; the distinct types exist so tests can assert the category.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DeterminismError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Order-independent seed derivation: hash(seed, stream) so per-item streams
// do not depend on generation order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// Deterministic 64-bit-seeded generator. Identical seed => identical stream.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return std::generate_canonical<double, 53>(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> dist(mean, stddev);
        return dist(engine_);
    }

    // Uniform integer in [lo, hi).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi <= lo) {
            throw ContractError("uniform_int: empty range");
        }
        std::uniform_int_distribution<std::int64_t> dist(lo, hi - 1);
        return dist(engine_);
    }

    SeededRng derive(std::uint64_t stream) const {
        return SeededRng(mix_seed(seed_, stream));
    }

  private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace multi
