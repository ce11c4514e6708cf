#include "ddlab/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddlab/errors.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

namespace ddlab::diffusion {

// Schedules --------------------------------------------------------------------

BlurSchedule BlurSchedule::linear(int T, double sigma_first, double sigma_last, int kernel_size) {
    if (T < 1) throw ParameterError("blur schedule: T must be >= 1");
    BlurSchedule s;
    s.T = T;
    s.kernel_size = kernel_size;
    double acc = 0.0;
    for (int i = 0; i < T; ++i) {
        const double sigma = T == 1 ? sigma_first : sigma_first + (sigma_last - sigma_first) * double(i) / double(T - 1);
        s.per_step_sigma.push_back(sigma);
        acc += sigma * sigma;
        s.cumulative_sigma.push_back(std::sqrt(acc));
    }
    s.validate();
    return s;
}

void BlurSchedule::validate() const {
    if (T < 1) throw ParameterError("blur schedule: T must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ParameterError("blur schedule: kernel_size must be odd");
    if (per_step_sigma.size() != std::size_t(T) || cumulative_sigma.size() != std::size_t(T)) {
        throw ValidationError("blur schedule: expected " + std::to_string(T) + " sigmas");
    }
    double acc = 0.0;
    for (int i = 0; i < T; ++i) {
        if (!(per_step_sigma[std::size_t(i)] > 0.0)) throw ParameterError("blur schedule: sigmas must be positive");
        acc += per_step_sigma[std::size_t(i)] * per_step_sigma[std::size_t(i)];
        if (std::abs(cumulative_sigma[std::size_t(i)] - std::sqrt(acc)) > 1e-9) {
            throw ValidationError("blur schedule: cumulative sigma inconsistent at step " + std::to_string(i + 1));
        }
    }
}

double BlurSchedule::sigma_at(int t) const {
    if (t < 0 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 0.0 : cumulative_sigma[std::size_t(t - 1)];
}

GaussianSchedule GaussianSchedule::linear(int T, double beta_first, double beta_last) {
    GaussianSchedule s;
    s.T = T;
    for (int i = 0; i < T; ++i) {
        s.beta.push_back(T == 1 ? beta_first : beta_first + (beta_last - beta_first) * double(i) / double(T - 1));
    }
    s.validate();
    return s;
}

void GaussianSchedule::validate() const {
    if (T < 1 || beta.size() != std::size_t(T)) throw ParameterError("gaussian schedule: need T >= 1 betas");
    for (std::size_t i = 0; i < beta.size(); ++i) {
        if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ParameterError("gaussian schedule: beta must lie in (0, 1)");
        if (i > 0 && beta[i] < beta[i - 1]) throw ParameterError("gaussian schedule: beta must be non-decreasing");
    }
}

// Blur -------------------------------------------------------------------------

std::vector<float> gaussian_kernel(double sigma, int min_size) {
    if (!(sigma > 0.0)) throw ParameterError("gaussian_kernel: sigma must be positive");
    const int radius = std::max(min_size / 2, static_cast<int>(std::ceil(3.0 * sigma)));
    const double s2 = sigma * sigma;
    std::vector<double> k(std::size_t(2 * radius + 1));
    double total = 0.0;
    for (int n = -radius; n <= radius; ++n) {
        const double v = std::exp(-s2) * std::cyl_bessel_i(double(std::abs(n)), s2);
        k[std::size_t(n + radius)] = v;
        total += v;
    }
    std::vector<float> out(k.size());
    for (std::size_t i = 0; i < k.size(); ++i) out[i] = static_cast<float>(k[i] / total);
    return out;
}

namespace {

// Half-sample symmetric extension (d c b a | a b c d | d c b a). The blur is then
// a symmetric operator diagonalized by the DCT, so its L2 norm is at most 1.
std::int64_t reflect(std::int64_t i, std::int64_t n) {
    const std::int64_t period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

void blur_planes(std::span<const float> src, std::span<float> dst, std::int64_t planes, std::int64_t h,
                 std::int64_t w, const std::vector<float>& k) {
    const std::int64_t r = static_cast<std::int64_t>(k.size() / 2);
    std::vector<float> tmp(std::size_t(h * w));
    std::vector<std::int64_t> rx(std::size_t(w + 2 * r)), ry(std::size_t(h + 2 * r));
    for (std::int64_t i = -r; i < w + r; ++i) rx[std::size_t(i + r)] = reflect(i, w);
    for (std::int64_t i = -r; i < h + r; ++i) ry[std::size_t(i + r)] = reflect(i, h);
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* in = src.data() + p * h * w;
        float* out = dst.data() + p * h * w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::int64_t j = -r; j <= r; ++j) acc += double(k[std::size_t(j + r)]) * in[y * w + rx[std::size_t(x + j + r)]];
                tmp[std::size_t(y * w + x)] = static_cast<float>(acc);
            }
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::int64_t j = -r; j <= r; ++j) acc += double(k[std::size_t(j + r)]) * tmp[std::size_t(ry[std::size_t(y + j + r)] * w + x)];
                out[y * w + x] = static_cast<float>(acc);
            }
    }
}

}  // namespace

Tensor gaussian_blur(const Tensor& x, double sigma, int min_kernel_size) {
    if (x.rank() < 2) throw DimensionError("gaussian_blur: need at least H x W, got " + shape_str(x.shape()));
    const auto h = x.dim(-2), w = x.dim(-1);
    const auto planes = static_cast<std::int64_t>(x.numel()) / (h * w);
    Tensor out = Tensor::zeros(x.shape());
    blur_planes(x.data(), out.data(), planes, h, w, gaussian_kernel(sigma, min_kernel_size));
    return out;
}

Tensor degrade(const Tensor& x0, int t, const BlurSchedule& sched) {
    const double sigma = sched.sigma_at(t);
    if (t == 0) return x0.clone();
    return gaussian_blur(x0, sigma, sched.kernel_size);
}

Tensor degrade(const Tensor& x0, std::span<const int> ts, const BlurSchedule& sched) {
    if (x0.rank() < 3 || static_cast<std::size_t>(x0.dim(0)) != ts.size()) {
        throw DimensionError("degrade: " + std::to_string(ts.size()) + " timesteps for batch " + shape_str(x0.shape()));
    }
    Tensor out = x0.clone();
    const std::size_t row = x0.numel() / ts.size();
    const auto h = x0.dim(-2), w = x0.dim(-1);
    const auto planes = static_cast<std::int64_t>(row) / (h * w);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const double sigma = sched.sigma_at(ts[i]);
        if (ts[i] == 0) continue;
        blur_planes(x0.data().subspan(i * row, row), out.data().subspan(i * row, row), planes, h, w,
                    gaussian_kernel(sigma, sched.kernel_size));
    }
    return out;
}

Tensor degrade_sequential(const Tensor& x0, int t, const BlurSchedule& sched) {
    sched.sigma_at(t);
    Tensor cur = x0.clone();
    for (int s = 1; s <= t; ++s) cur = gaussian_blur(cur, sched.per_step_sigma[std::size_t(s - 1)], sched.kernel_size);
    return cur;
}

// Gaussian reference steps -----------------------------------------------------

Tensor gaussian_forward_step(const Tensor& x_prev, int t, const GaussianSchedule& sched, Prng& prng) {
    if (t < 1 || t > sched.T) throw ParameterError("gaussian_forward_step: t must lie in [1, " + std::to_string(sched.T) + "]");
    const double beta = sched.beta[std::size_t(t - 1)];
    const double keep = std::sqrt(1.0 - beta), noise = std::sqrt(beta);
    Tensor out = x_prev.clone();
    for (auto& v : out.data()) v = static_cast<float>(keep * v + noise * prng.normal());
    return out;
}

Tensor gaussian_reverse_step(const Tensor& x_t, const Tensor& mu, double sigma, Prng& prng) {
    if (!(sigma >= 0.0)) throw ParameterError("gaussian_reverse_step: sigma must be >= 0");
    if (x_t.shape() != mu.shape()) {
        throw DimensionError("gaussian_reverse_step: mean " + shape_str(mu.shape()) + " vs state " + shape_str(x_t.shape()));
    }
    Tensor out = mu.clone();
    if (sigma == 0.0) return out;
    for (auto& v : out.data()) v = static_cast<float>(v + sigma * prng.normal());
    return out;
}

// Variations -------------------------------------------------------------------

std::string_view to_string(PurifierVariation v) noexcept {
    switch (v) {
        case PurifierVariation::none: return "none";
        case PurifierVariation::blurred: return "blurred";
        case PurifierVariation::algorithmic_reconstruction: return "algorithmic";
        case PurifierVariation::direct_reconstruction: return "direct";
    }
    return "?";
}

PurifierVariation parse_variation(std::string_view s) {
    if (s == "none") return PurifierVariation::none;
    if (s == "blurred") return PurifierVariation::blurred;
    if (s == "algorithmic" || s == "algorithmic_reconstruction") return PurifierVariation::algorithmic_reconstruction;
    if (s == "direct" || s == "direct_reconstruction") return PurifierVariation::direct_reconstruction;
    throw ValidationError("unknown purifier variation '" + std::string(s) + "'");
}

RestorationFn restoration_of(const UNet& unet) {
    return [&unet](const Tensor& x_t, int t) {
        NoGradGuard no_grad;
        return unet.forward(x_t, t);
    };
}

Tensor map_batches(const Tensor& x, std::size_t batch_size, const std::function<Tensor(const Tensor&)>& fn) {
    const std::size_t n = static_cast<std::size_t>(x.dim(0));
    if (n <= batch_size) return fn(x);
    std::vector<float> out;
    out.reserve(x.numel());
    Shape shape;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor y = fn(gather_rows(x, idx));
        out.insert(out.end(), y.data().begin(), y.data().end());
        shape = y.shape();
    }
    shape[0] = static_cast<std::int64_t>(n);
    return Tensor(std::move(shape), std::move(out));
}

namespace {

void clip01(Tensor& t) {
    for (auto& v : t.data()) v = std::clamp(v, 0.0f, 1.0f);
}

void require_restoration(const RestorationFn& restore, const char* op) {
    if (!restore) throw ValidationError(std::string(op) + ": no trained restoration model supplied");
}

}  // namespace

TrainLog train_restoration(UNet& unet, const Tensor& train_images, const Tensor& val_images, const BlurSchedule& sched,
                           const TrainHyper& hyper, Prng prng) {
    if (train_images.rank() != 4 || val_images.rank() != 4) {
        throw ValidationError("train_restoration: expected N x C x H x W image tensors");
    }
    if (unet.config().max_timestep < sched.T) {
        throw ParameterError("train_restoration: U-Net conditioned on t <= " + std::to_string(unet.config().max_timestep) +
                             " but schedule has T = " + std::to_string(sched.T));
    }
    const std::size_t n = static_cast<std::size_t>(train_images.dim(0));
    auto loss_fn = [&](std::span<const std::size_t> batch, Prng& rng) {
        const Tensor x0 = gather_rows(train_images, batch);
        std::vector<int> ts(batch.size());
        for (auto& t : ts) t = 1 + static_cast<int>(rng.below(std::uint64_t(sched.T)));
        const Tensor xt = degrade(x0, ts, sched);
        return ops::mse_loss(unet.forward(xt, ts), x0);
    };
    const RestorationFn restore = restoration_of(unet);
    auto val_fn = [&]() {
        const double mse = restoration_mse(restore, val_images, sched);
        return std::pair{mse, -mse};
    };
    return fit(unet.params(), n, loss_fn, val_fn, hyper, prng);
}

double restoration_mse(const RestorationFn& restore, const Tensor& images, const BlurSchedule& sched) {
    require_restoration(restore, "restoration_mse");
    const std::size_t n = static_cast<std::size_t>(images.dim(0));
    const std::size_t row = images.numel() / n;
    double total = 0.0;
    for (int t = 1; t <= sched.T; ++t) {
        std::vector<std::size_t> idx;
        for (std::size_t i = std::size_t(t - 1); i < n; i += std::size_t(sched.T)) idx.push_back(i);
        if (idx.empty()) continue;
        const Tensor x0 = gather_rows(images, idx);
        const Tensor x0_hat = restore(degrade(x0, t, sched), t);
        for (std::size_t i = 0; i < x0.numel(); ++i) {
            const double d = double(x0_hat[i]) - x0[i];
            total += d * d;
        }
    }
    return total / double(n * row);
}

Tensor purify_blurred(const Tensor& x, int t_star, const BlurSchedule& sched) {
    if (t_star < 1 || t_star > sched.T) {
        throw ParameterError("purify_blurred: t* must lie in [1, " + std::to_string(sched.T) + "], got " + std::to_string(t_star));
    }
    return degrade(x, t_star, sched);
}

Tensor purify_direct(const Tensor& x, const RestorationFn& restore, const BlurSchedule& sched) {
    require_restoration(restore, "purify_direct");
    Tensor out = restore(degrade(x, sched.T, sched), sched.T);
    if (out.shape() != x.shape()) throw DimensionError("purify_direct: restoration changed shape");
    clip01(out);
    return out;
}

Tensor purify_algorithmic(const Tensor& x, const RestorationFn& restore, const BlurSchedule& sched) {
    require_restoration(restore, "purify_algorithmic");
    Tensor cur = degrade(x, sched.T, sched);
    for (int s = sched.T; s >= 1; --s) {
        const Tensor x0_hat = restore(cur, s);
        if (x0_hat.shape() != x.shape()) throw DimensionError("purify_algorithmic: restoration changed shape");
        const Tensor here = degrade(x0_hat, s, sched);
        const Tensor below = degrade(x0_hat, s - 1, sched);
        auto c = cur.data();
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = (c[i] - here[i]) + below[i];
    }
    clip01(cur);
    return cur;
}

Tensor purify(const Tensor& x, PurifierVariation variation, const PurifierContext& ctx) {
    if (variation == PurifierVariation::none) return x;
    if (!ctx.sched) throw ValidationError("purify: no blur schedule in context");
    switch (variation) {
        case PurifierVariation::blurred: return purify_blurred(x, ctx.t_star, *ctx.sched);
        case PurifierVariation::algorithmic_reconstruction: return purify_algorithmic(x, ctx.restore, *ctx.sched);
        case PurifierVariation::direct_reconstruction: return purify_direct(x, ctx.restore, *ctx.sched);
        case PurifierVariation::none: break;
    }
    return x;
}

}  // namespace ddlab::diffusion
