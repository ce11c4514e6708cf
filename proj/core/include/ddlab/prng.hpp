#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace ddlab {

/// Deterministic random stream: splitmix64 for bits, Box-Muller for normals.
///
/// The sequence is a pure function of the seed. `split(label)` derives a child
/// stream from the seed and the label only, so the order in which children are
/// created does not affect them.
class Prng {
public:
    explicit Prng(std::uint64_t seed = 0) noexcept : seed_(seed), state_(seed) {}

    std::uint64_t next_u64() noexcept;

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;

    double normal() noexcept;

    Prng split(std::string_view label) const noexcept;

    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    std::optional<double> cached_normal_;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

}  // namespace ddlab
