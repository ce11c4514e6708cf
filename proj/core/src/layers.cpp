#include "ddlab/layers.hpp"

#include <cmath>

#include "ddlab/ops.hpp"

namespace ddlab::layers {

void add_linear(ModelParams& p, const std::string& name, std::int64_t in, std::int64_t out, Prng& prng, float gain) {
    const float std = std::sqrt(gain / static_cast<float>(in));
    p.add(name + ".weight", Tensor::randn({in, out}, prng, std, true));
    p.add(name + ".bias", Tensor::zeros({out}, true));
}

Tensor linear(const ModelParams& p, const std::string& name, const Tensor& x) {
    return ops::linear(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

void add_conv(ModelParams& p, const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, Prng& prng,
              float gain) {
    const float std = std::sqrt(gain / static_cast<float>(in * k * k));
    p.add(name + ".weight", Tensor::randn({out, in, k, k}, prng, std, true));
    p.add(name + ".bias", Tensor::zeros({out}, true));
}

Tensor conv(const ModelParams& p, const std::string& name, const Tensor& x, int stride, int padding) {
    return ops::conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), stride, padding);
}

void add_layer_norm(ModelParams& p, const std::string& name, std::int64_t dim) {
    p.add(name + ".gamma", Tensor::full({dim}, 1.0f, true));
    p.add(name + ".beta", Tensor::zeros({dim}, true));
}

Tensor layer_norm(const ModelParams& p, const std::string& name, const Tensor& x) {
    return ops::layer_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"));
}

}  // namespace ddlab::layers
