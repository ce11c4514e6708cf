#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "ddlab/models.hpp"
#include "ddlab/prng.hpp"
#include "ddlab/tensor.hpp"

// L-infinity gradient attacks. Every attack sees only a LogitsFn: the target
// classifier's logits and input gradients, nothing of any defense in front of it.
namespace ddlab::attacks {

enum class Family { fgsm, pgd, autopgd };

std::string_view to_string(Family f) noexcept;
Family parse_family(std::string_view s);

struct AttackConfig {
    Family family = Family::pgd;
    float epsilon = 0.03f;
    int steps = 10;
    /// PGD step size; AutoPGD starts from 2 * epsilon and ignores this.
    float step_size = 0.0075f;
    bool random_start = false;

    /// Checks epsilon in [0, 1) (0 allowed for degenerate tests), steps, step_size.
    void validate() const;
    static AttackConfig fgsm(float eps);
    static AttackConfig pgd(float eps, int steps = 10);
    static AttackConfig autopgd(float eps, int steps = 20);
};

struct AdvBatch {
    Tensor x_adv;
    Tensor x_clean;
    std::vector<int> labels;
    AttackConfig config;
    std::vector<bool> success;  // predicted class != label at x_adv
    /// AutoPGD only: best loss (batch sum) recorded at each checkpoint.
    std::vector<double> checkpoint_best_loss;
    int model_evaluations = 0;
};

/// sign(0) == 0.
float sign(float v) noexcept;

/// Gradient of the batch-mean cross-entropy w.r.t. the input, plus per-sample losses.
struct InputGradient {
    Tensor grad;
    std::vector<double> losses;
    std::vector<int> predictions;
};
InputGradient input_gradient(const LogitsFn& model, const Tensor& x, std::span<const int> labels);

AdvBatch fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> labels, float epsilon);
AdvBatch pgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg, Prng prng);
/// Momentum PGD with step-size halving at checkpoints {0, .22, .44, .66, .88}
/// of the budget; uses exactly `cfg.steps` gradient evaluations and returns the
/// per-sample best-loss iterate.
AdvBatch autopgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                 Prng prng);
/// Dispatches on cfg.family.
AdvBatch run(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg, Prng prng);

/// Attacks a large set in batches, concatenating the results.
AdvBatch run_batched(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                     Prng prng, std::size_t batch_size = 100);

/// Fraction of samples whose prediction at x_adv differs from the label.
double attack_success_rate(const LogitsFn& model, const AdvBatch& adv);

/// Projects `v` onto the epsilon ball around `center` intersected with [0, 1].
void project(std::span<float> v, std::span<const float> center, float epsilon);

}  // namespace ddlab::attacks
