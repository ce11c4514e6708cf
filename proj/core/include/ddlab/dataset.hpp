#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddlab/prng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

enum class Split : std::uint8_t { train, val, test };

std::string_view to_string(Split s) noexcept;
Split parse_split(std::string_view s);

/// Images with integer labels, the unit every training and evaluation routine consumes.
struct LabeledImages {
    Tensor images;  // N x C x H x W, values in [0, 1]
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    LabeledImages select(std::span<const std::size_t> indices) const;
};

struct Dataset {
    Tensor images;  // N x C x H x W, values in [0, 1]
    std::vector<int> labels;
    std::vector<Split> splits;

    std::size_t size() const noexcept { return labels.size(); }
    std::vector<std::size_t> indices_of(Split s) const;
    LabeledImages subset(Split s) const;
};

/// Rows of N x C x H x W gathered into a new batch tensor.
Tensor gather_rows(const Tensor& images, std::span<const std::size_t> indices);

/// Random permutation then contiguous assignment: the first round(r0 * n)
/// permuted indices train, the next round(r1 * n) val, the rest test.
std::vector<Split> split_dataset(std::size_t n, const std::array<double, 3>& ratios, Prng prng);

/// Knobs of the hermetic two-class generator.
struct SyntheticSpec {
    double background_lo = 0.35;
    double background_hi = 0.55;
    double noise_std = 0.08;
    double blob_amplitude_lo = 0.25;
    double blob_amplitude_hi = 0.40;
    double stripe_amplitude_lo = 0.12;
    double stripe_amplitude_hi = 0.20;
    /// Stripe period in pixels as a fraction of the image size.
    double stripe_period_fraction = 0.25;
};

/// Class 0: a Gaussian blob near the centre; class 1: horizontal sinusoidal
/// stripes. Both on a random flat background with additive pixel noise,
/// clipped to [0, 1]. Labels alternate so classes are balanced within one.
/// Split tags are all `train`; callers assign splits with split_dataset.
Dataset generate_synthetic(std::size_t n, std::int64_t size, const Prng& prng, const SyntheticSpec& spec = {},
                           std::int64_t channels = 1);

/// Bilinear resampling of a C x H x W image to C x out x out. Pixel-centre
/// sampling (the outer edges of input and output grids coincide), so equal
/// sizes are an exact identity and constant images stay constant.
Tensor resize_bilinear(const Tensor& image, std::int64_t out);

}  // namespace ddlab
