#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddlab/attacks.hpp"
#include "ddlab/dataset.hpp"
#include "ddlab/diffusion.hpp"
#include "ddlab/models.hpp"
#include "ddlab/train.hpp"

namespace ddlab {

struct DataConfig {
    std::size_t n_samples = 2000;
    std::int64_t image_size = 32;
    std::int64_t channels = 1;
    std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
    /// Empty: generate the synthetic set. Otherwise a manifest directory.
    std::string source_dir;
    SyntheticSpec synthetic;
};

struct VitSection {
    std::int64_t patch_size = 4;
    std::int64_t embed_dim = 64;
    std::int64_t num_blocks = 6;
    std::int64_t num_heads = 4;
    std::int64_t mlp_ratio = 2;
    TrainHyper train{8, 32, 0.05f, 0.9f, true, 1.0f};
    /// Train on randomly blurred copies of half of every batch.
    bool blur_augment = true;
};

struct SevitSection {
    std::int64_t m = 3;
    std::int64_t hidden = 256;
    int detection_threshold = 1;
    TrainHyper train{6, 32, 0.01f, 0.9f, true, 1.0f};
};

struct StudentSection {
    std::vector<std::int64_t> widths = {16, 32, 64};
    float temperature = 1.0f;
    float hard_blend = 0.0f;
    TrainHyper train{10, 32, 0.05f, 0.9f, true, 0.0f};
};

struct DiffusionSection {
    int T = 10;
    double sigma_first = 0.4;
    double sigma_last = 1.2;
    int kernel_size = 11;
    int t_star = 5;
    std::int64_t unet_base_width = 16;
    TrainHyper train{6, 32, 0.02f, 0.9f, true, 1.0f};

    diffusion::BlurSchedule schedule() const;
};

struct AttackSection {
    float epsilon = 0.03f;
    int pgd_steps = 10;
    float pgd_step_size = 0.0075f;
    int autopgd_steps = 20;
    bool random_start = false;
    std::size_t batch_size = 100;
    /// Also craft attacks against the student (transferability study only).
    bool attack_student = false;

    attacks::AttackConfig config(attacks::Family f) const;
};

/// Every knob of a run. Serialized with all fields explicit.
struct RunConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    VitSection vit;
    SevitSection sevit;
    StudentSection student;
    DiffusionSection diffusion;
    AttackSection attack;

    /// Throws ValidationError (or ParameterError) naming the offending field.
    void validate() const;

    VitConfig vit_config() const;
    CnnConfig cnn_config() const;
    UNetConfig unet_config() const;
    MlpConfig mlp_config() const;

    /// Canonical JSON (sorted keys, two-space indent).
    std::string to_json() const;
    /// Missing keys keep their defaults; unknown keys are a ValidationError.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
};

}  // namespace ddlab
