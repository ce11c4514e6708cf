#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ddlab/optim.hpp"
#include "ddlab/prng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

/// Differentiable map from an image batch [N x C x H x W] to logits [N x K].
using LogitsFn = std::function<Tensor(const Tensor&)>;

struct VitConfig {
    std::int64_t image_size = 32;
    std::int64_t channels = 1;
    std::int64_t patch_size = 4;
    std::int64_t embed_dim = 64;
    std::int64_t num_blocks = 6;
    std::int64_t num_heads = 4;
    std::int64_t mlp_ratio = 2;
    std::int64_t num_classes = 2;

    void validate() const;
    std::int64_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

/// Pre-norm vision transformer with a class token. Exposes the patch tokens
/// after every block so intermediate classifiers can be attached.
class VitModel {
public:
    struct Output {
        Tensor logits;                     // N x num_classes
        std::vector<Tensor> block_tokens;  // num_blocks tensors, each N x P x D (class token dropped)
    };

    VitModel(const VitConfig& cfg, Prng prng);

    Output forward(const Tensor& x) const;
    Tensor logits(const Tensor& x) const { return forward(x).logits; }

    const VitConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

private:
    Tensor attention(const Tensor& h, std::int64_t block) const;

    VitConfig cfg_;
    ModelParams params_;
};

struct MlpConfig {
    std::int64_t num_patches = 64;
    std::int64_t embed_dim = 64;
    std::int64_t hidden = 256;
    std::int64_t num_classes = 2;
};

/// Classifier over flattened patch tokens: P*D -> hidden -> hidden -> K.
class MlpHead {
public:
    MlpHead(const MlpConfig& cfg, Prng prng);

    /// tokens: N x P x D
    Tensor forward(const Tensor& tokens) const;

    const MlpConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

private:
    MlpConfig cfg_;
    ModelParams params_;
};

struct CnnConfig {
    std::int64_t image_size = 32;
    std::int64_t channels = 1;
    /// One stride-2 3x3 convolution per entry.
    std::vector<std::int64_t> widths = {16, 32, 64};
    std::int64_t num_classes = 2;

    void validate() const;
};

/// Stride-2 convolution stack with a linear head.
class StudentCnn {
public:
    StudentCnn(const CnnConfig& cfg, Prng prng);

    Tensor forward(const Tensor& x) const;

    const CnnConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

private:
    CnnConfig cfg_;
    ModelParams params_;
};

struct UNetConfig {
    std::int64_t image_size = 32;
    std::int64_t channels = 1;
    std::int64_t base_width = 16;
    /// Largest timestep the network is conditioned on (the blur schedule's T).
    std::int64_t max_timestep = 10;

    void validate() const;
};

/// Two-level encoder/decoder with skip connections predicting the clean image.
/// The timestep enters as a sinusoidal embedding, projected and added to the
/// bottleneck channels. The output is `x_t + residual`.
class UNet {
public:
    UNet(const UNetConfig& cfg, Prng prng);

    Tensor forward(const Tensor& x_t, int t) const;
    /// Per-sample timesteps, one per batch row.
    Tensor forward(const Tensor& x_t, std::span<const int> ts) const;

    const UNetConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

private:
    UNetConfig cfg_;
    ModelParams params_;
};

/// Sinusoidal embedding of integer timesteps: [N x dim].
Tensor timestep_embedding(std::span<const int> ts, std::int64_t dim);

}  // namespace ddlab
