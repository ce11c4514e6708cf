#include "ddlab/prng.hpp"

#include <cmath>
#include <numbers>

namespace ddlab {

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}
}  // namespace

std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t Prng::next_u64() noexcept {
    state_ += kGolden;
    return mix64(state_);
}

double Prng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Prng::below(std::uint64_t n) noexcept {
    // Rejection keeps the result unbiased for n that do not divide 2^64.
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return r % n;
}

double Prng::normal() noexcept {
    if (cached_normal_) {
        double v = *cached_normal_;
        cached_normal_.reset();
        return v;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    return r * std::cos(theta);
}

Prng Prng::split(std::string_view label) const noexcept {
    return Prng(mix64(seed_ ^ mix64(fnv1a(label) + kGolden)));
}

}  // namespace ddlab
