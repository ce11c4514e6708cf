#include "ddlab/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "ddlab/attacks.hpp"
#include "ddlab/diffusion.hpp"
#include "ddlab/distill.hpp"
#include "ddlab/formats.hpp"
#include "ddlab/optim.hpp"
#include "ddlab/train.hpp"
#include "json.hpp"

namespace ddlab::pipeline {

namespace fs = std::filesystem;

std::string_view to_string(Stage s) noexcept {
    switch (s) {
        case Stage::gen_data: return "gen-data";
        case Stage::train_vit: return "train-vit";
        case Stage::train_mlps: return "train-mlps";
        case Stage::train_unet: return "train-unet";
        case Stage::distill: return "distill";
        case Stage::attack: return "attack";
        case Stage::purify: return "purify";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

std::optional<Stage> parse_stage(std::string_view s) {
    for (Stage st : kStages)
        if (to_string(st) == s) return st;
    return std::nullopt;
}

StageError::StageError(Stage stage, const std::string& what)
    : Error("stage '" + std::string(to_string(stage)) + "' failed: " + what), stage_(stage) {}

namespace {

constexpr std::array<attacks::Family, 3> kFamilies = {attacks::Family::fgsm, attacks::Family::pgd,
                                                      attacks::Family::autopgd};
constexpr std::array<diffusion::PurifierVariation, 3> kPurifiers = {
    diffusion::PurifierVariation::blurred, diffusion::PurifierVariation::algorithmic_reconstruction,
    diffusion::PurifierVariation::direct_reconstruction};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_log(const fs::path& path, const TrainLog& log) {
    std::string text = "epoch,train_loss,val_loss,val_metric,best\n";
    char buf[160];
    for (const auto& e : log.epochs) {
        std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%d\n", e.epoch, e.train_loss, e.val_loss, e.val_metric,
                      e.epoch == log.best_epoch ? 1 : 0);
        text += buf;
    }
    fs::create_directories(path.parent_path());
    write_text_atomic(path, text);
}

std::string mlp_name(std::int64_t block) { return "mlp_block_" + std::to_string(block) + ".ckp"; }

std::string purified_name(std::string_view attack, diffusion::PurifierVariation v) {
    return std::string(attack) + "_" + std::string(diffusion::to_string(v)) + ".tsr";
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, fs::path out, std::ostream* log)
    : cfg_(std::move(cfg)), out_(std::move(out)), log_(log) {
    cfg_.validate();
    const std::string snapshot = cfg_.to_json();
    const fs::path cfg_path = out_ / "config.json";
    if (fs::exists(cfg_path)) {
        if (read_text(cfg_path) != snapshot) {
            throw ValidationError("output directory " + out_.string() +
                                  " holds artifacts from a different config; choose a fresh --out");
        }
    } else {
        fs::create_directories(out_);
        write_text_atomic(cfg_path, snapshot);
    }
}

Pipeline::~Pipeline() = default;

Prng Pipeline::stream(std::string_view label) const { return Prng(cfg_.seed).split(label); }

void Pipeline::say(const std::string& line) const {
    if (log_) *log_ << line << std::endl;
}

bool Pipeline::is_complete(Stage s) const {
    switch (s) {
        case Stage::gen_data: return fs::exists(out_ / "data" / "manifest.csv");
        case Stage::train_vit: return fs::exists(out_ / "models" / "vit.ckp");
        case Stage::train_mlps:
            for (std::int64_t b = 1; b <= cfg_.sevit.m; ++b)
                if (!fs::exists(out_ / "models" / mlp_name(b))) return false;
            return true;
        case Stage::train_unet: return fs::exists(out_ / "models" / "unet.ckp");
        case Stage::distill: return fs::exists(out_ / "models" / "student.ckp");
        case Stage::attack:
            for (auto f : kFamilies)
                if (!fs::exists(out_ / "attacks" / (std::string(attacks::to_string(f)) + ".tsr"))) return false;
            return !cfg_.attack.attack_student || fs::exists(out_ / "attacks" / "student_pgd.tsr");
        case Stage::purify:
            for (std::string_view a : report::kAttacks)
                for (auto v : kPurifiers)
                    if (!fs::exists(out_ / "purified" / purified_name(a, v))) return false;
            return true;
        case Stage::evaluate: return fs::exists(out_ / "report.json") && fs::exists(out_ / "report.csv");
    }
    return false;
}

void Pipeline::run(Stage s) {
    auto require = [this](Stage p) {
        if (!is_complete(p)) run(p);
    };
    switch (s) {
        case Stage::gen_data: break;
        case Stage::train_vit:
        case Stage::train_unet: require(Stage::gen_data); break;
        case Stage::train_mlps:
        case Stage::distill: require(Stage::train_vit); break;
        case Stage::attack:
            require(Stage::train_vit);
            if (cfg_.attack.attack_student) require(Stage::distill);
            break;
        case Stage::purify:
            require(Stage::attack);
            require(Stage::train_unet);
            break;
        case Stage::evaluate:
            for (Stage p : kStages)
                if (p != Stage::evaluate) require(p);
            break;
    }
    if (is_complete(s)) {
        say("[" + std::string(to_string(s)) + "] up to date");
        return;
    }
    say("[" + std::string(to_string(s)) + "] running");
    const auto t0 = std::chrono::steady_clock::now();
    try {
        execute(s);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(s, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_timing(s, secs);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", secs);
    say("[" + std::string(to_string(s)) + "] done in " + buf + " s");
}

void Pipeline::execute(Stage s) {
    switch (s) {
        case Stage::gen_data: gen_data(); break;
        case Stage::train_vit: train_vit(); break;
        case Stage::train_mlps: train_mlps(); break;
        case Stage::train_unet: train_unet(); break;
        case Stage::distill: distill(); break;
        case Stage::attack: attack(); break;
        case Stage::purify: purify(); break;
        case Stage::evaluate: evaluate(); break;
    }
}

report::EvalReport Pipeline::run_all() {
    run(Stage::evaluate);
    return report::read_report(out_ / "report.json");
}

report::EvalReport Pipeline::reemit_report() {
    if (!is_complete(Stage::evaluate)) throw ValidationError("no evaluation in " + out_.string() + "; run 'evaluate' first");
    report::EvalReport r = report::read_report(out_ / "report.json");
    report::emit_report(r, out_);
    return r;
}

void Pipeline::record_timing(Stage s, double seconds) {
    const fs::path p = out_ / "timings.json";
    nlohmann::json j = fs::exists(p) ? nlohmann::json::parse(read_text(p)) : nlohmann::json::object();
    j[std::string(to_string(s))] = seconds;
    write_text_atomic(p, j.dump(2) + "\n");
}

// Lazy artifact access --------------------------------------------------------

const Dataset& Pipeline::data() {
    if (!data_) data_ = load_dataset_dir(out_ / "data", cfg_.data.image_size);
    return *data_;
}

VitModel& Pipeline::vit() {
    if (!vit_) {
        vit_ = std::make_unique<VitModel>(cfg_.vit_config(), stream("vit/init"));
        load_checkpoint_into(out_ / "models" / "vit.ckp", vit_->params());
    }
    return *vit_;
}

sevit::SevitEnsemble& Pipeline::ensemble() {
    if (!ensemble_) {
        auto e = std::make_unique<sevit::SevitEnsemble>();
        e->vit = &vit();
        for (std::int64_t b = 1; b <= cfg_.sevit.m; ++b) {
            MlpHead head(cfg_.mlp_config(), stream("sevit/load"));
            load_checkpoint_into(out_ / "models" / mlp_name(b), head.params());
            e->heads.push_back(std::move(head));
        }
        ensemble_ = std::move(e);
    }
    return *ensemble_;
}

UNet& Pipeline::unet() {
    if (!unet_) {
        unet_ = std::make_unique<UNet>(cfg_.unet_config(), stream("unet/init"));
        load_checkpoint_into(out_ / "models" / "unet.ckp", unet_->params());
    }
    return *unet_;
}

StudentCnn& Pipeline::student() {
    if (!student_) {
        student_ = std::make_unique<StudentCnn>(cfg_.cnn_config(), stream("student/init"));
        load_checkpoint_into(out_ / "models" / "student.ckp", student_->params());
    }
    return *student_;
}

// Stages ----------------------------------------------------------------------

void Pipeline::gen_data() {
    Dataset ds;
    if (cfg_.data.source_dir.empty()) {
        ds = generate_synthetic(cfg_.data.n_samples, cfg_.data.image_size, stream("data"), cfg_.data.synthetic,
                                cfg_.data.channels);
    } else {
        ds = load_dataset_dir(cfg_.data.source_dir, cfg_.data.image_size);
        if (ds.images.dim(1) != cfg_.data.channels) {
            throw ValidationError("source images have " + std::to_string(ds.images.dim(1)) + " channels, config expects " +
                                  std::to_string(cfg_.data.channels));
        }
    }
    ds.splits = split_dataset(ds.size(), cfg_.data.split_ratios, stream("split"));
    save_dataset_dir(out_ / "data", ds);
    data_ = std::move(ds);
}

void Pipeline::train_vit() {
    const Dataset& ds = data();
    auto model = std::make_unique<VitModel>(cfg_.vit_config(), stream("vit/init"));
    const VitModel& m = *model;
    const LogitsFn fn = [&m](const Tensor& x) { return m.logits(x); };
    AugmentFn augment;
    const auto sched = cfg_.diffusion.schedule();
    if (cfg_.vit.blur_augment) {
        augment = [&sched](const Tensor& x, Prng& rng) {
            std::vector<int> ts(static_cast<std::size_t>(x.dim(0)));
            for (auto& t : ts) t = rng.uniform() < 0.5 ? 0 : 1 + static_cast<int>(rng.below(std::uint64_t(sched.T)));
            return diffusion::degrade(x, ts, sched);
        };
    }
    const TrainLog log = train_classifier(model->params(), fn, ds.subset(Split::train), ds.subset(Split::val),
                                          cfg_.vit.train, stream("vit/train"), augment);
    write_log(out_ / "logs" / "train-vit.csv", log);
    save_checkpoint(out_ / "models" / "vit.ckp", model->params());
    vit_ = std::move(model);
    ensemble_.reset();
    char buf[96];
    std::snprintf(buf, sizeof buf, "  best epoch %d, val accuracy %.4f", log.best_epoch, log.best_metric);
    say(buf);
}

void Pipeline::train_mlps() {
    const Dataset& ds = data();
    VitModel& v = vit();
    const ModelParams before = v.params().clone();
    const LabeledImages val = ds.subset(Split::val);
    std::vector<MlpHead> heads;
    {
        FreezeGuard freeze(v.params());
        heads = sevit::train_intermediate_heads(v, ds.subset(Split::train), val, cfg_.sevit.m, cfg_.sevit.train,
                                                stream("sevit"), cfg_.sevit.hidden);
    }
    if (!bitwise_equal(before, v.params())) throw ContractError("ViT parameters changed during head training");
    for (std::size_t i = 0; i < heads.size(); ++i) {
        save_checkpoint(out_ / "models" / mlp_name(static_cast<std::int64_t>(i + 1)), heads[i].params());
    }
    ensemble_.reset();
    ensemble();
    const auto acc = sevit::head_accuracies(*ensemble_, val);
    for (std::size_t i = 0; i < acc.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "  head %zu: val accuracy %.4f", i + 1, acc[i]);
        say(buf);
    }
}

void Pipeline::train_unet() {
    const Dataset& ds = data();
    auto model = std::make_unique<UNet>(cfg_.unet_config(), stream("unet/init"));
    const auto sched = cfg_.diffusion.schedule();
    const TrainLog log = diffusion::train_restoration(*model, ds.subset(Split::train).images, ds.subset(Split::val).images,
                                                      sched, cfg_.diffusion.train, stream("unet/train"));
    write_log(out_ / "logs" / "train-unet.csv", log);
    save_checkpoint(out_ / "models" / "unet.ckp", model->params());
    unet_ = std::move(model);
    char buf[96];
    std::snprintf(buf, sizeof buf, "  best epoch %d, val restoration MSE %.6f", log.best_epoch, -log.best_metric);
    say(buf);
}

void Pipeline::distill() {
    const Dataset& ds = data();
    VitModel& teacher = vit();
    const LogitsFn tfn = [&teacher](const Tensor& x) { return teacher.logits(x); };
    const float temp = cfg_.student.temperature;
    const auto soft_train = distill::make_soft_targets(tfn, ds.subset(Split::train).images, temp);
    const auto soft_val = distill::make_soft_targets(tfn, ds.subset(Split::val).images, temp);
    fs::create_directories(out_ / "soft");
    save_tensor(out_ / "soft" / "teacher_probs_train.tsr", soft_train.teacher_probs);
    save_tensor(out_ / "soft" / "teacher_probs_val.tsr", soft_val.teacher_probs);

    auto model = std::make_unique<StudentCnn>(cfg_.cnn_config(), stream("student/init"));
    distill::DistillOptions opt;
    opt.hard_blend = cfg_.student.hard_blend;
    const TrainLog log = distill::distill_train(*model, soft_train, soft_val, cfg_.student.train, stream("student/train"), opt);
    write_log(out_ / "logs" / "distill.csv", log);
    save_checkpoint(out_ / "models" / "student.ckp", model->params());
    student_ = std::move(model);
    char buf[96];
    std::snprintf(buf, sizeof buf, "  best epoch %d, val teacher agreement %.4f", log.best_epoch, log.best_metric);
    say(buf);
}

void Pipeline::attack() {
    // Only the teacher ViT and the test split are touched here: the attacker
    // never sees the purifier, the heads or (unless asked) the student.
    const LabeledImages test = data().subset(Split::test);
    VitModel& target = vit();
    FreezeGuard freeze(target.params());
    const LogitsFn fn = [&target](const Tensor& x) { return target.logits(x); };
    fs::create_directories(out_ / "attacks");
    for (auto f : kFamilies) {
        const std::string name(attacks::to_string(f));
        const auto adv = attacks::run_batched(fn, test.images, test.labels, cfg_.attack.config(f), stream("attack/" + name),
                                              cfg_.attack.batch_size);
        save_tensor(out_ / "attacks" / (name + ".tsr"), adv.x_adv);
        char buf[96];
        std::snprintf(buf, sizeof buf, "  %s: success rate %.4f", name.c_str(), attacks::attack_success_rate(fn, adv));
        say(buf);
    }
    if (cfg_.attack.attack_student) {
        StudentCnn& s = student();
        FreezeGuard freeze_student(s.params());
        const LogitsFn sfn = [&s](const Tensor& x) { return s.forward(x); };
        const auto adv = attacks::run_batched(sfn, test.images, test.labels, cfg_.attack.config(attacks::Family::pgd),
                                              stream("attack/student_pgd"), cfg_.attack.batch_size);
        save_tensor(out_ / "attacks" / "student_pgd.tsr", adv.x_adv);
    }
}

void Pipeline::purify() {
    const LabeledImages test = data().subset(Split::test);
    const auto sched = cfg_.diffusion.schedule();
    diffusion::PurifierContext ctx;
    ctx.sched = &sched;
    ctx.restore = diffusion::restoration_of(unet());
    ctx.t_star = cfg_.diffusion.t_star;
    fs::create_directories(out_ / "purified");
    for (std::string_view a : report::kAttacks) {
        const Tensor x = a == "clean" ? test.images : load_tensor(out_ / "attacks" / (std::string(a) + ".tsr"));
        for (auto v : kPurifiers) {
            const Tensor p = diffusion::map_batches(x, 100, [&](const Tensor& b) { return diffusion::purify(b, v, ctx); });
            save_tensor(out_ / "purified" / purified_name(a, v), p);
        }
    }
}

void Pipeline::evaluate() {
    const LabeledImages test = data().subset(Split::test);
    VitModel& v = vit();
    sevit::SevitEnsemble& e = ensemble();
    StudentCnn& s = student();
    const std::map<std::string_view, LogitsFn> models = {
        {"vit", [&v](const Tensor& x) { return v.logits(x); }},
        {"sevit", sevit::as_logits(e)},
        {"student_cnn", [&s](const Tensor& x) { return s.forward(x); }},
    };
    auto inputs = [&](std::string_view attack, std::string_view variation) {
        if (variation == "none") {
            return attack == "clean" ? test.images : load_tensor(out_ / "attacks" / (std::string(attack) + ".tsr"));
        }
        return load_tensor(out_ / "purified" / purified_name(attack, diffusion::parse_variation(variation)));
    };

    report::EvalReport r;
    r.config_json = cfg_.to_json();
    for (std::string_view a : report::kAttacks) {
        for (std::string_view var : report::kVariations) {
            const Tensor x = inputs(a, var);
            for (std::string_view m : report::kModels) {
                r.grid.push_back({std::string(m), std::string(a), std::string(var),
                                  report::evaluate_cell(models.at(m), x, test.labels), test.size()});
            }
        }
    }

    // Detection and per-head accuracies are reported beside the grid, not folded into it.
    const int thr = cfg_.sevit.detection_threshold;
    auto rate = [](const std::vector<bool>& f) {
        std::size_t k = 0;
        for (bool b : f) k += b;
        return double(k) / double(f.size());
    };
    r.metrics["sevit.detection_threshold"] = thr;
    r.metrics["sevit.flag_rate.clean"] = rate(sevit::detect_adversarial(e, test.images, thr));
    for (auto f : kFamilies) {
        const std::string name(attacks::to_string(f));
        r.metrics["sevit.flag_rate." + name] = rate(sevit::detect_adversarial(e, inputs(name, "none"), thr));
    }
    const auto heads_clean = sevit::head_accuracies(e, test);
    const auto heads_pgd = sevit::head_accuracies(e, LabeledImages{inputs("pgd", "none"), test.labels});
    for (std::size_t h = 0; h < heads_clean.size(); ++h) {
        r.metrics["sevit.head_" + std::to_string(h + 1) + ".accuracy.clean"] = heads_clean[h];
        r.metrics["sevit.head_" + std::to_string(h + 1) + ".accuracy.pgd"] = heads_pgd[h];
    }
    if (cfg_.attack.attack_student) {
        const Tensor adv = load_tensor(out_ / "attacks" / "student_pgd.tsr");
        r.metrics["student_cnn.whitebox_pgd_accuracy"] = report::evaluate_cell(models.at("student_cnn"), adv, test.labels);
    }
    const fs::path tp = out_ / "timings.json";
    if (fs::exists(tp)) {
        const auto timings = nlohmann::json::parse(read_text(tp));
        for (const auto& [k, val] : timings.items()) r.timings[k] = val.get<double>();
    }
    report::emit_report(r, out_);
}

report::EvalReport run_pipeline(const RunConfig& cfg, const fs::path& out, std::ostream* log) {
    Pipeline p(cfg, out, log);
    return p.run_all();
}

}  // namespace ddlab::pipeline
