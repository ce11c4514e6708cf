#include "ddlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ddlab/errors.hpp"

namespace ddlab {

std::string_view to_string(Split s) noexcept {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + std::string(s) + "'");
}

Tensor gather_rows(const Tensor& images, std::span<const std::size_t> indices) {
    if (images.rank() < 1) throw DimensionError("gather_rows: scalar input");
    const std::size_t n = static_cast<std::size_t>(images.dim(0));
    const std::size_t row = images.numel() / n;
    Shape shape = images.shape();
    shape[0] = static_cast<std::int64_t>(indices.size());
    std::vector<float> out(indices.size() * row);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " >= " + std::to_string(n));
        std::copy_n(images.data().begin() + std::ptrdiff_t(indices[i] * row), row, out.begin() + std::ptrdiff_t(i * row));
    }
    return Tensor(std::move(shape), std::move(out));
}

LabeledImages LabeledImages::select(std::span<const std::size_t> indices) const {
    LabeledImages out;
    out.images = gather_rows(images, indices);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels[i]);
    return out;
}

std::vector<std::size_t> Dataset::indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
        if (splits[i] == s) out.push_back(i);
    return out;
}

LabeledImages Dataset::subset(Split s) const {
    const auto idx = indices_of(s);
    if (idx.empty()) throw ValidationError("split '" + std::string(to_string(s)) + "' is empty");
    LabeledImages all{images, labels};
    return all.select(idx);
}

std::vector<Split> split_dataset(std::size_t n, const std::array<double, 3>& ratios, Prng prng) {
    if (n < 3) throw ValidationError("split_dataset: need at least 3 samples to populate all splits, got " + std::to_string(n));
    const double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0.0) {
        throw ParameterError("split_dataset: ratios must be non-negative and sum to 1");
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[prng.below(i + 1)]);

    auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * double(n)));
    auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * double(n)));
    // Keep every requested split non-empty.
    n_train = std::clamp<std::size_t>(n_train, ratios[0] > 0 ? 1 : 0, n - 2);
    n_val = std::clamp<std::size_t>(n_val, ratios[1] > 0 ? 1 : 0, n - n_train - 1);

    std::vector<Split> tags(n, Split::test);
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train) tags[perm[i]] = Split::train;
        else if (i < n_train + n_val) tags[perm[i]] = Split::val;
    }
    return tags;
}

Dataset generate_synthetic(std::size_t n, std::int64_t size, const Prng& prng, const SyntheticSpec& spec,
                           std::int64_t channels) {
    if (size < 8) throw ParameterError("generate_synthetic: image size must be >= 8, got " + std::to_string(size));
    if (channels < 1) throw ParameterError("generate_synthetic: channels must be >= 1");
    Dataset ds;
    const std::size_t plane = static_cast<std::size_t>(size * size);
    ds.labels.resize(n);
    ds.splits.assign(n, Split::train);
    std::vector<float> pixels(n * static_cast<std::size_t>(channels) * plane);
    const double s = static_cast<double>(size);
    const double period = spec.stripe_period_fraction * s;

    std::vector<double> pattern(plane);
    for (std::size_t k = 0; k < n; ++k) {
        Prng r = prng.split("sample/" + std::to_string(k));
        const int label = static_cast<int>(k % 2);
        ds.labels[k] = label;
        const double bg = r.uniform(spec.background_lo, spec.background_hi);
        if (label == 0) {
            const double cy = s / 2.0 - 0.5 + r.uniform(-s / 8.0, s / 8.0);
            const double cx = s / 2.0 - 0.5 + r.uniform(-s / 8.0, s / 8.0);
            const double sigma = r.uniform(s / 8.0, s / 5.0);
            const double amp = r.uniform(spec.blob_amplitude_lo, spec.blob_amplitude_hi);
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x) {
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    pattern[std::size_t(y * size + x)] = bg + amp * std::exp(-d2 / (2.0 * sigma * sigma));
                }
        } else {
            const double phase = r.uniform(0.0, 2.0 * std::numbers::pi);
            const double amp = r.uniform(spec.stripe_amplitude_lo, spec.stripe_amplitude_hi);
            for (std::int64_t y = 0; y < size; ++y) {
                const double v = bg + amp * std::sin(2.0 * std::numbers::pi * double(y) / period + phase);
                for (std::int64_t x = 0; x < size; ++x) pattern[std::size_t(y * size + x)] = v;
            }
        }
        for (std::int64_t c = 0; c < channels; ++c) {
            float* dst = pixels.data() + (k * std::size_t(channels) + std::size_t(c)) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const double v = pattern[p] + spec.noise_std * r.normal();
                dst[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    ds.images = Tensor({static_cast<std::int64_t>(n), channels, size, size}, std::move(pixels));
    return ds;
}

Tensor resize_bilinear(const Tensor& image, std::int64_t out) {
    if (out < 1) throw ParameterError("resize_bilinear: output size must be >= 1, got " + std::to_string(out));
    if (image.rank() != 3) throw DimensionError("resize_bilinear: expected C x H x W, got " + shape_str(image.shape()));
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h < 2 || w < 2) throw DimensionError("resize_bilinear: input must be at least 2 x 2, got " + shape_str(image.shape()));

    struct Tap {
        std::int64_t i0, i1;
        float f;
    };
    auto taps = [out](std::int64_t in) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double scale = double(in) / double(out);
        for (std::int64_t o = 0; o < out; ++o) {
            double src = (double(o) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, double(in - 1));
            const auto i0 = static_cast<std::int64_t>(std::floor(src));
            const auto i1 = std::min(i0 + 1, in - 1);
            t[std::size_t(o)] = {i0, i1, static_cast<float>(src - double(i0))};
        }
        return t;
    };
    const auto ty = taps(h), tx = taps(w);
    Tensor result = Tensor::zeros({c, out, out});
    auto dst = result.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* plane = image.data().data() + ch * h * w;
        for (std::int64_t oy = 0; oy < out; ++oy) {
            const auto& a = ty[std::size_t(oy)];
            for (std::int64_t ox = 0; ox < out; ++ox) {
                const auto& b = tx[std::size_t(ox)];
                const float v00 = plane[a.i0 * w + b.i0], v01 = plane[a.i0 * w + b.i1];
                const float v10 = plane[a.i1 * w + b.i0], v11 = plane[a.i1 * w + b.i1];
                // lerp form keeps constant inputs exact
                const float top = v00 + b.f * (v01 - v00);
                const float bot = v10 + b.f * (v11 - v10);
                dst[std::size_t((ch * out + oy) * out + ox)] = top + a.f * (bot - top);
            }
        }
    }
    return result;
}

}  // namespace ddlab
