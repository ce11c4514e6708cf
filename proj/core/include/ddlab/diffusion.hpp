#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "ddlab/dataset.hpp"
#include "ddlab/models.hpp"
#include "ddlab/prng.hpp"
#include "ddlab/tensor.hpp"
#include "ddlab/train.hpp"

namespace ddlab::diffusion {

/// Per-step Gaussian blur widths. Step t (1-based) blurs with per_step_sigma[t-1];
/// the composition of steps 1..t is a single Gaussian of width cumulative_sigma[t-1].
struct BlurSchedule {
    int T = 10;
    std::vector<double> per_step_sigma;
    /// Minimum odd kernel support; kernels widen to cover 3 sigma when needed.
    int kernel_size = 11;
    std::vector<double> cumulative_sigma;

    /// per_step_sigma linear from sigma_first to sigma_last over T steps.
    static BlurSchedule linear(int T, double sigma_first, double sigma_last, int kernel_size = 11);
    void validate() const;
    /// Cumulative width for timestep t in [0, T]; 0 at t = 0.
    double sigma_at(int t) const;
};

/// Normalized 1-D discrete Gaussian kernel exp(-s^2) I_n(s^2) (modified Bessel),
/// which composes exactly: kernels of widths a and b convolve to width sqrt(a^2 + b^2).
std::vector<float> gaussian_kernel(double sigma, int min_size);

/// Separable blur of every H x W plane of a rank >= 2 tensor, reflect padding.
Tensor gaussian_blur(const Tensor& x, double sigma, int min_kernel_size);

/// D(x0, t): one blur with the cumulative kernel. t = 0 returns a copy of x0.
Tensor degrade(const Tensor& x0, int t, const BlurSchedule& sched);
/// Per-sample timesteps over the leading axis.
Tensor degrade(const Tensor& x0, std::span<const int> ts, const BlurSchedule& sched);
/// G_t * ... * G_1 * x0 applied step by step; reference for the cumulative form.
Tensor degrade_sequential(const Tensor& x0, int t, const BlurSchedule& sched);

struct GaussianSchedule {
    int T = 1000;
    std::vector<double> beta;

    static GaussianSchedule linear(int T, double beta_first = 1e-4, double beta_last = 0.02);
    void validate() const;
};

/// x_t = sqrt(1 - beta_t) x_prev + sqrt(beta_t) z, z ~ N(0, I). t in [1, T].
Tensor gaussian_forward_step(const Tensor& x_prev, int t, const GaussianSchedule& sched, Prng& prng);
/// x_prev = mu + sigma z.
Tensor gaussian_reverse_step(const Tensor& x_t, const Tensor& mu, double sigma, Prng& prng);

enum class PurifierVariation { none, blurred, algorithmic_reconstruction, direct_reconstruction };

std::string_view to_string(PurifierVariation v) noexcept;
PurifierVariation parse_variation(std::string_view s);

/// R(x_t, t): estimate of the clean image from a degraded one.
using RestorationFn = std::function<Tensor(const Tensor& x_t, int t)>;

/// Inference-mode restoration closure over a trained U-Net.
RestorationFn restoration_of(const UNet& unet);

/// Trains R to minimize ||R(D(x0, t), t) - x0||^2 with t uniform in [1, T] per
/// sample. Keeps the epoch with the lowest validation MSE.
TrainLog train_restoration(UNet& unet, const Tensor& train_images, const Tensor& val_images,
                           const BlurSchedule& sched, const TrainHyper& hyper, Prng prng);

/// Mean MSE of R(D(x0, t), t) against x0 over a fixed per-sample t pattern.
double restoration_mse(const RestorationFn& restore, const Tensor& images, const BlurSchedule& sched);

/// D(x, t_star); t_star in [1, T].
Tensor purify_blurred(const Tensor& x, int t_star, const BlurSchedule& sched);
/// clip(R(D(x, T), T)).
Tensor purify_direct(const Tensor& x, const RestorationFn& restore, const BlurSchedule& sched);
/// Deterministic cold-diffusion sampling from x_T = D(x, T):
/// x_{s-1} = x_s - D(R(x_s, s), s) + D(R(x_s, s), s - 1), s = T..1, then clip.
Tensor purify_algorithmic(const Tensor& x, const RestorationFn& restore, const BlurSchedule& sched);

struct PurifierContext {
    const BlurSchedule* sched = nullptr;
    RestorationFn restore;
    int t_star = 5;
};

/// Dispatch over the variations; `none` returns the input unchanged.
Tensor purify(const Tensor& x, PurifierVariation variation, const PurifierContext& ctx);

/// Runs `fn` over the leading axis in chunks and concatenates the results.
Tensor map_batches(const Tensor& x, std::size_t batch_size, const std::function<Tensor(const Tensor&)>& fn);

}  // namespace ddlab::diffusion
