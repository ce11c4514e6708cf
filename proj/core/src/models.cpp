#include "ddlab/models.hpp"

#include <cmath>
#include <numeric>

#include "ddlab/errors.hpp"
#include "ddlab/layers.hpp"
#include "ddlab/ops.hpp"

namespace ddlab {

namespace {

void require_input(const Tensor& x, std::int64_t channels, std::int64_t size, const char* model) {
    if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != size || x.dim(3) != size) {
        throw DimensionError(std::string(model) + ": expected N x " + std::to_string(channels) + " x " +
                             std::to_string(size) + " x " + std::to_string(size) + " input, got " +
                             shape_str(x.shape()));
    }
}

std::string block_name(std::int64_t i) { return "blocks." + std::to_string(i); }

}  // namespace

// ViT ------------------------------------------------------------------------

void VitConfig::validate() const {
    if (patch_size < 1 || image_size % patch_size != 0) {
        throw ParameterError("vit: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                             std::to_string(patch_size));
    }
    if (num_heads < 1 || embed_dim % num_heads != 0) {
        throw ParameterError("vit: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                             std::to_string(num_heads));
    }
    if (num_blocks < 2) throw ParameterError("vit: num_blocks must be >= 2");
    if (channels < 1 || mlp_ratio < 1 || num_classes < 2) throw ParameterError("vit: invalid channels/mlp_ratio/classes");
}

VitModel::VitModel(const VitConfig& cfg, Prng prng) : cfg_(cfg) {
    cfg_.validate();
    const auto d = cfg_.embed_dim, p = cfg_.patch_size;
    const float init_std = 0.02f;
    params_.add("patch_embed.weight", Tensor::randn({d, cfg_.channels, p, p}, prng,
                                                    std::sqrt(1.0f / float(cfg_.channels * p * p)), true));
    params_.add("patch_embed.bias", Tensor::zeros({d}, true));
    params_.add("cls_token", Tensor::randn({d}, prng, init_std, true));
    params_.add("pos_embed", Tensor::randn({1 + cfg_.num_patches(), d}, prng, init_std, true));
    for (std::int64_t b = 0; b < cfg_.num_blocks; ++b) {
        const auto name = block_name(b);
        layers::add_layer_norm(params_, name + ".ln1", d);
        for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.proj"}) {
            layers::add_linear(params_, name + proj, d, d, prng, 1.0f);
        }
        layers::add_layer_norm(params_, name + ".ln2", d);
        layers::add_linear(params_, name + ".mlp.fc1", d, d * cfg_.mlp_ratio, prng);
        layers::add_linear(params_, name + ".mlp.fc2", d * cfg_.mlp_ratio, d, prng, 1.0f);
    }
    layers::add_layer_norm(params_, "norm", d);
    params_.add("head.weight", Tensor::randn({d, cfg_.num_classes}, prng, init_std, true));
    params_.add("head.bias", Tensor::zeros({cfg_.num_classes}, true));
}

Tensor VitModel::attention(const Tensor& h, std::int64_t block) const {
    const auto n = h.dim(0), t = h.dim(1), d = cfg_.embed_dim, heads = cfg_.num_heads, dh = d / heads;
    const auto name = block_name(block);
    static constexpr int kSplit[] = {0, 2, 1, 3};
    auto split_heads = [&](const Tensor& z) {
        return ops::reshape(ops::permute(ops::reshape(z, {n, t, heads, dh}), kSplit), {n * heads, t, dh});
    };
    const Tensor q = split_heads(layers::linear(params_, name + ".attn.q", h));
    const Tensor k = split_heads(layers::linear(params_, name + ".attn.k", h));
    const Tensor v = split_heads(layers::linear(params_, name + ".attn.v", h));
    const Tensor scores = ops::scale(ops::bmm(q, k, false, true), 1.0f / std::sqrt(float(dh)));
    const Tensor ctx = ops::bmm(ops::softmax(scores), v);
    const Tensor merged = ops::reshape(ops::permute(ops::reshape(ctx, {n, heads, t, dh}), kSplit), {n, t, d});
    return layers::linear(params_, name + ".attn.proj", merged);
}

VitModel::Output VitModel::forward(const Tensor& x) const {
    require_input(x, cfg_.channels, cfg_.image_size, "vit_forward");
    const auto n = x.dim(0), d = cfg_.embed_dim, np = cfg_.num_patches();
    const int p = static_cast<int>(cfg_.patch_size);

    static constexpr int kToTokens[] = {0, 2, 1};
    Tensor patches = ops::conv2d(x, params_.at("patch_embed.weight"), params_.at("patch_embed.bias"), p, 0);
    patches = ops::permute(ops::reshape(patches, {n, d, np}), kToTokens);
    const Tensor cls = ops::repeat_batch(ops::reshape(params_.at("cls_token"), {1, d}), n);
    const Tensor parts[] = {cls, patches};
    Tensor z = ops::add_bias(ops::concat(parts, 1), params_.at("pos_embed"));

    Output out;
    out.block_tokens.reserve(static_cast<std::size_t>(cfg_.num_blocks));
    for (std::int64_t b = 0; b < cfg_.num_blocks; ++b) {
        const auto name = block_name(b);
        z = ops::add(z, attention(layers::layer_norm(params_, name + ".ln1", z), b));
        Tensor h = layers::layer_norm(params_, name + ".ln2", z);
        h = layers::linear(params_, name + ".mlp.fc2", ops::gelu(layers::linear(params_, name + ".mlp.fc1", h)));
        z = ops::add(z, h);
        out.block_tokens.push_back(ops::slice(z, 1, 1, np));
    }
    const Tensor cls_out = ops::reshape(ops::slice(layers::layer_norm(params_, "norm", z), 1, 0, 1), {n, d});
    out.logits = layers::linear(params_, "head", cls_out);
    return out;
}

// MLP head -------------------------------------------------------------------

MlpHead::MlpHead(const MlpConfig& cfg, Prng prng) : cfg_(cfg) {
    if (cfg_.num_patches < 1 || cfg_.embed_dim < 1 || cfg_.hidden < 1) throw ParameterError("mlp: invalid dimensions");
    layers::add_linear(params_, "fc1", cfg_.num_patches * cfg_.embed_dim, cfg_.hidden, prng);
    layers::add_linear(params_, "fc2", cfg_.hidden, cfg_.hidden, prng);
    layers::add_linear(params_, "out", cfg_.hidden, cfg_.num_classes, prng, 1.0f);
}

Tensor MlpHead::forward(const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(1) != cfg_.num_patches || tokens.dim(2) != cfg_.embed_dim) {
        throw DimensionError("mlp_forward: expected N x " + std::to_string(cfg_.num_patches) + " x " +
                             std::to_string(cfg_.embed_dim) + " tokens, got " + shape_str(tokens.shape()));
    }
    Tensor h = ops::reshape(tokens, {tokens.dim(0), cfg_.num_patches * cfg_.embed_dim});
    h = ops::relu(layers::linear(params_, "fc1", h));
    h = ops::relu(layers::linear(params_, "fc2", h));
    return layers::linear(params_, "out", h);
}

// Student CNN ------------------------------------------------------------------

void CnnConfig::validate() const {
    if (widths.empty()) throw ParameterError("cnn: at least one convolution layer required");
    std::int64_t s = image_size;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (widths[i] < 1) throw ParameterError("cnn: widths must be positive");
        s = (s + 2 - 3) / 2 + 1;
    }
    if (s < 1 || channels < 1) throw ParameterError("cnn: too many stride-2 layers for the image size");
}

StudentCnn::StudentCnn(const CnnConfig& cfg, Prng prng) : cfg_(cfg) {
    cfg_.validate();
    std::int64_t in = cfg_.channels, s = cfg_.image_size;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
        layers::add_conv(params_, "conv" + std::to_string(i + 1), in, cfg_.widths[i], 3, prng);
        in = cfg_.widths[i];
        s = (s + 2 - 3) / 2 + 1;
    }
    layers::add_linear(params_, "head", in * s * s, cfg_.num_classes, prng, 1.0f);
}

Tensor StudentCnn::forward(const Tensor& x) const {
    require_input(x, cfg_.channels, cfg_.image_size, "cnn_forward");
    Tensor h = x;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
        h = ops::relu(layers::conv(params_, "conv" + std::to_string(i + 1), h, 2, 1));
    }
    h = ops::reshape(h, {h.dim(0), static_cast<std::int64_t>(h.numel()) / h.dim(0)});
    return layers::linear(params_, "head", h);
}

// U-Net ------------------------------------------------------------------------

void UNetConfig::validate() const {
    if (image_size % 4 != 0 || image_size < 8) throw ParameterError("unet: image_size must be a multiple of 4, >= 8");
    if (base_width < 1 || channels < 1) throw ParameterError("unet: invalid widths");
    if (max_timestep < 1) throw ParameterError("unet: max_timestep must be >= 1");
}

Tensor timestep_embedding(std::span<const int> ts, std::int64_t dim) {
    const std::int64_t half = dim / 2;
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(ts.size()), dim});
    auto d = out.data();
    for (std::size_t r = 0; r < ts.size(); ++r) {
        for (std::int64_t i = 0; i < half; ++i) {
            const double freq = std::pow(1000.0, -double(i) / double(std::max<std::int64_t>(half - 1, 1)));
            d[r * std::size_t(dim) + std::size_t(2 * i)] = static_cast<float>(std::sin(ts[r] * freq));
            d[r * std::size_t(dim) + std::size_t(2 * i + 1)] = static_cast<float>(std::cos(ts[r] * freq));
        }
    }
    return out;
}

UNet::UNet(const UNetConfig& cfg, Prng prng) : cfg_(cfg) {
    cfg_.validate();
    const auto c = cfg_.channels, b = cfg_.base_width;
    layers::add_conv(params_, "enc1.conv1", c, b, 3, prng);
    layers::add_conv(params_, "enc1.conv2", b, b, 3, prng);
    layers::add_conv(params_, "down1", b, 2 * b, 3, prng);
    layers::add_conv(params_, "enc2.conv", 2 * b, 2 * b, 3, prng);
    layers::add_conv(params_, "down2", 2 * b, 4 * b, 3, prng);
    layers::add_linear(params_, "time", 4 * b, 4 * b, prng, 1.0f);
    layers::add_conv(params_, "mid.conv", 4 * b, 4 * b, 3, prng);
    layers::add_conv(params_, "up1.conv1", 6 * b, 2 * b, 3, prng);
    layers::add_conv(params_, "up1.conv2", 2 * b, 2 * b, 3, prng);
    layers::add_conv(params_, "up2.conv1", 3 * b, b, 3, prng);
    layers::add_conv(params_, "out", b, c, 3, prng, 0.1f);
}

Tensor UNet::forward(const Tensor& x_t, int t) const {
    const std::vector<int> ts(x_t.rank() > 0 ? static_cast<std::size_t>(x_t.dim(0)) : 0, t);
    return forward(x_t, ts);
}

Tensor UNet::forward(const Tensor& x_t, std::span<const int> ts) const {
    require_input(x_t, cfg_.channels, cfg_.image_size, "unet_forward");
    if (static_cast<std::int64_t>(ts.size()) != x_t.dim(0)) {
        throw DimensionError("unet_forward: " + std::to_string(ts.size()) + " timesteps for batch of " +
                             std::to_string(x_t.dim(0)));
    }
    for (int t : ts) {
        if (t < 0 || t > cfg_.max_timestep) {
            throw ParameterError("unet_forward: timestep " + std::to_string(t) + " outside [0, " +
                                 std::to_string(cfg_.max_timestep) + "]");
        }
    }
    auto block = [this](const char* name, const Tensor& h, int stride) {
        return ops::relu(layers::conv(params_, name, h, stride, 1));
    };
    const Tensor s1 = block("enc1.conv2", block("enc1.conv1", x_t, 1), 1);      // b  x S
    const Tensor s2 = block("enc2.conv", block("down1", s1, 2), 1);             // 2b x S/2
    Tensor h = block("down2", s2, 2);                                           // 4b x S/4
    const Tensor temb = layers::linear(params_, "time", timestep_embedding(ts, 4 * cfg_.base_width));
    h = ops::add_per_channel(h, temb);
    h = block("mid.conv", h, 1);

    const Tensor up1[] = {ops::upsample_nearest2x(h), s2};
    h = block("up1.conv2", block("up1.conv1", ops::concat(up1, 1), 1), 1);       // 2b x S/2
    const Tensor up2[] = {ops::upsample_nearest2x(h), s1};
    h = block("up2.conv1", ops::concat(up2, 1), 1);                              // b x S
    return ops::add(x_t, layers::conv(params_, "out", h, 1, 1));
}

}  // namespace ddlab
