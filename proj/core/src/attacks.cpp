#include "ddlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddlab/dataset.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"
#include "ddlab/train.hpp"

namespace ddlab::attacks {

std::string_view to_string(Family f) noexcept {
    switch (f) {
        case Family::fgsm: return "fgsm";
        case Family::pgd: return "pgd";
        case Family::autopgd: return "autopgd";
    }
    return "?";
}

Family parse_family(std::string_view s) {
    if (s == "fgsm") return Family::fgsm;
    if (s == "pgd") return Family::pgd;
    if (s == "autopgd") return Family::autopgd;
    throw ValidationError("unknown attack family '" + std::string(s) + "'");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0f && epsilon < 1.0f)) {
        throw ParameterError("attack epsilon must lie in [0, 1), got " + std::to_string(epsilon));
    }
    if (steps < 1) throw ParameterError("attack steps must be >= 1");
    if (family == Family::autopgd && steps < 5) throw ParameterError("autopgd needs at least 5 steps");
    // A zero ball makes the step size irrelevant.
    if (family == Family::pgd && epsilon > 0.0f && !(step_size > 0.0f)) {
        throw ParameterError("pgd step_size must be positive");
    }
}

AttackConfig AttackConfig::fgsm(float eps) {
    AttackConfig c;
    c.family = Family::fgsm;
    c.epsilon = eps;
    c.steps = 1;
    c.step_size = eps;
    return c;
}

AttackConfig AttackConfig::pgd(float eps, int steps) {
    AttackConfig c;
    c.family = Family::pgd;
    c.epsilon = eps;
    c.steps = steps;
    c.step_size = eps / 4.0f;
    return c;
}

AttackConfig AttackConfig::autopgd(float eps, int steps) {
    AttackConfig c;
    c.family = Family::autopgd;
    c.epsilon = eps;
    c.steps = steps;
    c.step_size = 2.0f * eps;
    return c;
}

float sign(float v) noexcept { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

void project(std::span<float> v, std::span<const float> center, float epsilon) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float lo = center[i] - epsilon, hi = center[i] + epsilon;
        v[i] = std::clamp(std::clamp(v[i], lo, hi), 0.0f, 1.0f);
    }
}

InputGradient input_gradient(const LogitsFn& model, const Tensor& x, std::span<const int> labels) {
    Tensor xv = x.clone();
    xv.set_requires_grad(true);
    Tape tape;
    Tensor logits, loss;
    {
        TapeGuard guard(tape);
        logits = model(xv);
        loss = ops::cross_entropy(logits, labels);
    }
    InputGradient out;
    if (loss.requires_grad()) {
        backward(tape, loss);
    }
    out.grad = xv.has_grad() ? Tensor(x.shape(), std::vector<float>(xv.grad().begin(), xv.grad().end()))
                             : Tensor::zeros(x.shape());
    out.losses = ops::per_sample_cross_entropy(logits, labels);
    out.predictions = ops::argmax_rows(logits);
    return out;
}

namespace {

void check_inputs(const Tensor& x, std::span<const int> labels) {
    if (x.rank() < 2 || static_cast<std::size_t>(x.dim(0)) != labels.size()) {
        throw DimensionError("attack: batch " + shape_str(x.shape()) + " does not match " +
                             std::to_string(labels.size()) + " labels");
    }
}

void finalize(const LogitsFn& model, AdvBatch& adv) {
    const auto pred = ops::argmax_rows(predict_logits(model, adv.x_adv));
    adv.success.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) adv.success[i] = pred[i] != adv.labels[i];
}

AdvBatch make_batch(const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
    AdvBatch adv;
    adv.x_clean = x.clone();
    adv.labels.assign(labels.begin(), labels.end());
    adv.config = cfg;
    return adv;
}

}  // namespace

AdvBatch fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> labels, float epsilon) {
    const AttackConfig cfg = AttackConfig::fgsm(epsilon);
    cfg.validate();
    check_inputs(x, labels);
    AdvBatch adv = make_batch(x, labels, cfg);
    const auto g = input_gradient(model, x, labels);
    adv.model_evaluations = 1;
    adv.x_adv = x.clone();
    auto v = adv.x_adv.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(x[i] + epsilon * sign(g.grad[i]), 0.0f, 1.0f);
    finalize(model, adv);
    return adv;
}

AdvBatch pgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg, Prng prng) {
    cfg.validate();
    check_inputs(x, labels);
    AdvBatch adv = make_batch(x, labels, cfg);
    Tensor cur = x.clone();
    if (cfg.random_start) {
        for (auto& v : cur.data()) v += static_cast<float>(prng.uniform(-cfg.epsilon, cfg.epsilon));
        project(cur.data(), x.data(), cfg.epsilon);
    }
    for (int s = 0; s < cfg.steps; ++s) {
        const auto g = input_gradient(model, cur, labels);
        ++adv.model_evaluations;
        auto v = cur.data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += cfg.step_size * sign(g.grad[i]);
        project(v, x.data(), cfg.epsilon);
    }
    adv.x_adv = cur;
    finalize(model, adv);
    return adv;
}

AdvBatch autopgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                 Prng prng) {
    cfg.validate();
    check_inputs(x, labels);
    AdvBatch adv = make_batch(x, labels, cfg);

    const std::size_t n = labels.size();
    const std::size_t row = x.numel() / n;
    const int budget = cfg.steps;
    constexpr double kFractions[] = {0.0, 0.22, 0.44, 0.66, 0.88};
    constexpr double kRho = 0.75;
    constexpr float kAlpha = 0.75f;

    std::vector<int> checkpoints;
    for (double p : kFractions) {
        const int w = static_cast<int>(std::ceil(p * budget));
        if (w < budget && (checkpoints.empty() || w > checkpoints.back())) checkpoints.push_back(w);
    }

    Tensor cur = x.clone();
    if (cfg.random_start) {
        for (auto& v : cur.data()) v += static_cast<float>(prng.uniform(-cfg.epsilon, cfg.epsilon));
        project(cur.data(), x.data(), cfg.epsilon);
    }
    Tensor prev = cur.clone();
    Tensor best_x = cur.clone();
    Tensor best_grad = Tensor::zeros(x.shape());
    std::vector<double> best_loss(n, -INFINITY), last_loss(n, 0.0);
    std::vector<float> eta(n, 2.0f * cfg.epsilon);
    std::vector<float> eta_at_checkpoint(eta);
    std::vector<double> best_at_checkpoint(n, -INFINITY);
    std::vector<int> improved(n, 0);
    std::size_t next_cp = 1;

    for (int k = 0; k < budget; ++k) {
        const auto g = input_gradient(model, cur, labels);
        ++adv.model_evaluations;
        for (std::size_t i = 0; i < n; ++i) {
            if (k > 0 && g.losses[i] > last_loss[i]) ++improved[i];
            last_loss[i] = g.losses[i];
            if (g.losses[i] > best_loss[i]) {
                best_loss[i] = g.losses[i];
                std::copy_n(cur.data().begin() + std::ptrdiff_t(i * row), row, best_x.data().begin() + std::ptrdiff_t(i * row));
                std::copy_n(g.grad.data().begin() + std::ptrdiff_t(i * row), row, best_grad.data().begin() + std::ptrdiff_t(i * row));
            }
        }
        if (k == 0) best_at_checkpoint = best_loss;
        Tensor grad = g.grad;

        if (next_cp < checkpoints.size() && k == checkpoints[next_cp]) {
            const int span = checkpoints[next_cp] - checkpoints[next_cp - 1];
            for (std::size_t i = 0; i < n; ++i) {
                const bool few_improvements = improved[i] < kRho * span;
                const bool stalled = eta_at_checkpoint[i] == eta[i] && best_at_checkpoint[i] == best_loss[i];
                eta_at_checkpoint[i] = eta[i];
                best_at_checkpoint[i] = best_loss[i];
                improved[i] = 0;
                if (few_improvements || stalled) {
                    eta[i] *= 0.5f;
                    // restart from the best iterate, dropping momentum
                    auto off = std::ptrdiff_t(i * row);
                    std::copy_n(best_x.data().begin() + off, row, cur.data().begin() + off);
                    std::copy_n(best_x.data().begin() + off, row, prev.data().begin() + off);
                    std::copy_n(best_grad.data().begin() + off, row, grad.data().begin() + off);
                    last_loss[i] = best_loss[i];
                }
            }
            double total = 0.0;
            for (double v : best_loss) total += v;
            adv.checkpoint_best_loss.push_back(total);
            ++next_cp;
        }
        if (k == budget - 1) break;

        Tensor next = cur.clone();
        auto nv = next.data();
        auto cv = cur.data();
        auto pv = prev.data();
        for (std::size_t i = 0; i < n; ++i) {
            const float e = eta[i];
            for (std::size_t j = i * row; j < (i + 1) * row; ++j) {
                float z = std::clamp(cv[j] + e * sign(grad[j]), x[j] - cfg.epsilon, x[j] + cfg.epsilon);
                z = std::clamp(z, 0.0f, 1.0f);
                nv[j] = k == 0 ? z : cv[j] + kAlpha * (z - cv[j]) + (1.0f - kAlpha) * (cv[j] - pv[j]);
            }
        }
        project(nv, x.data(), cfg.epsilon);
        prev = cur;
        cur = next;
    }
    adv.x_adv = best_x;
    finalize(model, adv);
    return adv;
}

AdvBatch run(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg, Prng prng) {
    switch (cfg.family) {
        case Family::fgsm: return fgsm(model, x, labels, cfg.epsilon);
        case Family::pgd: return pgd(model, x, labels, cfg, prng);
        case Family::autopgd: return autopgd(model, x, labels, cfg, prng);
    }
    throw ValidationError("unknown attack family");
}

AdvBatch run_batched(const LogitsFn& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                     Prng prng, std::size_t batch_size) {
    check_inputs(x, labels);
    const std::size_t n = labels.size();
    AdvBatch all = make_batch(x, labels, cfg);
    std::vector<float> pixels;
    pixels.reserve(x.numel());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0, b = 0; start < n; start += batch_size, ++b) {
        const std::size_t end = std::min(n, start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor xb = gather_rows(x, idx);
        const AdvBatch part = run(model, xb, labels.subspan(start, end - start), cfg, prng.split("batch/" + std::to_string(b)));
        pixels.insert(pixels.end(), part.x_adv.data().begin(), part.x_adv.data().end());
        all.success.insert(all.success.end(), part.success.begin(), part.success.end());
        all.model_evaluations += part.model_evaluations;
    }
    all.x_adv = Tensor(x.shape(), std::move(pixels));
    return all;
}

double attack_success_rate(const LogitsFn& model, const AdvBatch& adv) {
    if (adv.labels.empty()) throw ValidationError("attack_success_rate: no labels");
    const auto pred = ops::argmax_rows(predict_logits(model, adv.x_adv));
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != adv.labels[i];
    return double(wrong) / double(pred.size());
}

}  // namespace ddlab::attacks
