#pragma once

#include <string>

#include "ddlab/optim.hpp"
#include "ddlab/prng.hpp"
#include "ddlab/tensor.hpp"

// Parameter registration and forward helpers shared by the model families.
namespace ddlab::layers {

/// Registers `<name>.weight` [in x out] (Kaiming-normal, gain `gain`) and `<name>.bias` [out].
void add_linear(ModelParams& p, const std::string& name, std::int64_t in, std::int64_t out, Prng& prng,
                float gain = 2.0f);
Tensor linear(const ModelParams& p, const std::string& name, const Tensor& x);

/// Registers `<name>.weight` [out x in x k x k] and `<name>.bias` [out].
void add_conv(ModelParams& p, const std::string& name, std::int64_t in, std::int64_t out, std::int64_t k, Prng& prng,
              float gain = 2.0f);
Tensor conv(const ModelParams& p, const std::string& name, const Tensor& x, int stride, int padding);

/// Registers `<name>.gamma` (ones) and `<name>.beta` (zeros).
void add_layer_norm(ModelParams& p, const std::string& name, std::int64_t dim);
Tensor layer_norm(const ModelParams& p, const std::string& name, const Tensor& x);

}  // namespace ddlab::layers
