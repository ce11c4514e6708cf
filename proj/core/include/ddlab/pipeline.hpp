#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "ddlab/config.hpp"
#include "ddlab/dataset.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/models.hpp"
#include "ddlab/report.hpp"
#include "ddlab/sevit.hpp"

namespace ddlab::pipeline {

enum class Stage { gen_data, train_vit, train_mlps, train_unet, distill, attack, purify, evaluate };

inline constexpr std::array<Stage, 8> kStages = {Stage::gen_data,   Stage::train_vit, Stage::train_mlps,
                                                 Stage::train_unet, Stage::distill,   Stage::attack,
                                                 Stage::purify,     Stage::evaluate};

/// CLI spelling, e.g. "train-vit".
std::string_view to_string(Stage s) noexcept;
std::optional<Stage> parse_stage(std::string_view s);

/// A failure inside a stage; the message starts with the stage name.
class StageError : public Error {
public:
    StageError(Stage stage, const std::string& what);
    Stage stage() const noexcept { return stage_; }

private:
    Stage stage_;
};

/// Runs the experiment inside one output directory. Every stage persists its
/// artifacts there and is skipped when they already exist, so any stage can be
/// invoked on its own and an interrupted run resumes where it stopped.
///
///   config.json            snapshot of the RunConfig
///   data/                  manifest.csv + samples/*.tsr
///   models/                vit.ckp, mlp_block_<i>.ckp, unet.ckp, student.ckp
///   soft/                  teacher_probs_{train,val}.tsr
///   attacks/               <family>.tsr over the test split (crafted on the ViT)
///   purified/              <attack>_<variation>.tsr
///   logs/                  per-stage training curves (CSV)
///   timings.json, report.json, report.csv
class Pipeline {
public:
    /// Snapshots the config into `out`. A directory holding a different
    /// config is rejected with ValidationError.
    Pipeline(RunConfig cfg, std::filesystem::path out, std::ostream* log = nullptr);
    ~Pipeline();

    const RunConfig& config() const noexcept { return cfg_; }
    const std::filesystem::path& out() const noexcept { return out_; }

    bool is_complete(Stage s) const;
    /// Runs missing prerequisites, then `s` unless its artifacts already exist.
    void run(Stage s);
    /// All stages in order, then report emission.
    report::EvalReport run_all();
    /// Re-emits report.json/report.csv from the persisted evaluation.
    report::EvalReport reemit_report();

private:
    void execute(Stage s);
    void gen_data();
    void train_vit();
    void train_mlps();
    void train_unet();
    void distill();
    void attack();
    void purify();
    void evaluate();

    const Dataset& data();
    VitModel& vit();
    sevit::SevitEnsemble& ensemble();
    UNet& unet();
    StudentCnn& student();
    Prng stream(std::string_view label) const;
    void record_timing(Stage s, double seconds);
    void say(const std::string& line) const;

    RunConfig cfg_;
    std::filesystem::path out_;
    std::ostream* log_;
    std::optional<Dataset> data_;
    std::unique_ptr<VitModel> vit_;
    std::unique_ptr<sevit::SevitEnsemble> ensemble_;
    std::unique_ptr<UNet> unet_;
    std::unique_ptr<StudentCnn> student_;
};

/// Convenience wrapper: Pipeline(cfg, out).run_all().
report::EvalReport run_pipeline(const RunConfig& cfg, const std::filesystem::path& out, std::ostream* log = nullptr);

}  // namespace ddlab::pipeline
