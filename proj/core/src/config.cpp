#include "ddlab/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ddlab/errors.hpp"
#include "ddlab/formats.hpp"
#include "json.hpp"

namespace ddlab {

using nlohmann::json;

diffusion::BlurSchedule DiffusionSection::schedule() const {
    return diffusion::BlurSchedule::linear(T, sigma_first, sigma_last, kernel_size);
}

attacks::AttackConfig AttackSection::config(attacks::Family f) const {
    attacks::AttackConfig c;
    switch (f) {
        case attacks::Family::fgsm: c = attacks::AttackConfig::fgsm(epsilon); break;
        case attacks::Family::pgd:
            c = attacks::AttackConfig::pgd(epsilon, pgd_steps);
            c.step_size = pgd_step_size;
            break;
        case attacks::Family::autopgd: c = attacks::AttackConfig::autopgd(epsilon, autopgd_steps); break;
    }
    c.random_start = random_start && f != attacks::Family::fgsm;
    return c;
}

VitConfig RunConfig::vit_config() const {
    VitConfig c;
    c.image_size = data.image_size;
    c.channels = data.channels;
    c.patch_size = vit.patch_size;
    c.embed_dim = vit.embed_dim;
    c.num_blocks = vit.num_blocks;
    c.num_heads = vit.num_heads;
    c.mlp_ratio = vit.mlp_ratio;
    return c;
}

CnnConfig RunConfig::cnn_config() const {
    CnnConfig c;
    c.image_size = data.image_size;
    c.channels = data.channels;
    c.widths = student.widths;
    return c;
}

UNetConfig RunConfig::unet_config() const {
    UNetConfig c;
    c.image_size = data.image_size;
    c.channels = data.channels;
    c.base_width = diffusion.unet_base_width;
    c.max_timestep = diffusion.T;
    return c;
}

MlpConfig RunConfig::mlp_config() const {
    MlpConfig c;
    const auto side = data.image_size / vit.patch_size;
    c.num_patches = side * side;
    c.embed_dim = vit.embed_dim;
    c.hidden = sevit.hidden;
    return c;
}

namespace {

void check_hyper(const TrainHyper& h, const std::string& where) {
    if (h.epochs < 1) throw ValidationError(where + ".epochs must be >= 1");
    if (h.batch_size < 1) throw ValidationError(where + ".batch_size must be >= 1");
    if (!(h.lr > 0.0f)) throw ValidationError(where + ".lr must be positive");
    if (!(h.momentum >= 0.0f && h.momentum < 1.0f)) throw ValidationError(where + ".momentum must lie in [0, 1)");
    if (!(h.clip_norm >= 0.0f)) throw ValidationError(where + ".clip_norm must be >= 0");
    if (!(h.weight_decay >= 0.0f)) throw ValidationError(where + ".weight_decay must be >= 0");
}

}  // namespace

void RunConfig::validate() const {
    if (data.image_size < 8) throw ValidationError("data.image_size must be >= 8");
    if (data.channels < 1) throw ValidationError("data.channels must be >= 1");
    if (data.n_samples < 3) throw ValidationError("data.n_samples must be >= 3");
    if (std::abs(data.split_ratios[0] + data.split_ratios[1] + data.split_ratios[2] - 1.0) > 1e-9) {
        throw ValidationError("data.split_ratios must sum to 1");
    }
    for (double r : data.split_ratios) {
        if (!(r >= 0.0)) throw ValidationError("data.split_ratios must be non-negative");
    }
    if (vit.patch_size < 1 || data.image_size % vit.patch_size != 0) {
        throw ValidationError("data.image_size must be divisible by vit.patch_size");
    }
    try {
        vit_config().validate();
        cnn_config().validate();
        unet_config().validate();
    } catch (const Error& e) {
        throw ValidationError(std::string("model config: ") + e.what());
    }
    if (sevit.m < 1 || sevit.m > vit.num_blocks) throw ValidationError("sevit.m must lie in [1, vit.num_blocks]");
    if (sevit.hidden < 1) throw ValidationError("sevit.hidden must be >= 1");
    if (sevit.detection_threshold < 0 || sevit.detection_threshold > sevit.m) {
        throw ValidationError("sevit.detection_threshold must lie in [0, sevit.m]");
    }
    if (!(student.temperature > 0.0f)) throw ValidationError("student.temperature must be positive");
    if (!(student.hard_blend >= 0.0f && student.hard_blend <= 1.0f)) {
        throw ValidationError("student.hard_blend must lie in [0, 1]");
    }
    if (diffusion.T < 1) throw ValidationError("diffusion.T must be >= 1");
    if (diffusion.t_star < 1 || diffusion.t_star > diffusion.T) {
        throw ValidationError("diffusion.t_star must lie in [1, diffusion.T]");
    }
    if (!(diffusion.sigma_first > 0.0 && diffusion.sigma_last > 0.0)) {
        throw ValidationError("diffusion sigmas must be positive");
    }
    if (diffusion.kernel_size < 1 || diffusion.kernel_size % 2 == 0) {
        throw ValidationError("diffusion.kernel_size must be a positive odd integer");
    }
    if (!(attack.epsilon > 0.0f && attack.epsilon < 1.0f)) throw ValidationError("attack.epsilon must lie in (0, 1)");
    if (attack.pgd_steps < 1) throw ValidationError("attack.pgd_steps must be >= 1");
    if (!(attack.pgd_step_size > 0.0f)) throw ValidationError("attack.pgd_step_size must be positive");
    if (attack.autopgd_steps < 5) throw ValidationError("attack.autopgd_steps must be >= 5");
    if (attack.batch_size < 1) throw ValidationError("attack.batch_size must be >= 1");
    check_hyper(vit.train, "vit.train");
    check_hyper(sevit.train, "sevit.train");
    check_hyper(student.train, "student.train");
    check_hyper(diffusion.train, "diffusion.train");
}

// JSON ------------------------------------------------------------------------

namespace {

// Shortest decimal that reads back as the same float, so 0.03f prints as 0.03.
double num(float v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    *res.ptr = '\0';
    return std::strtod(buf, nullptr);
}

json hyper_json(const TrainHyper& h) {
    return {{"epochs", h.epochs},         {"batch_size", h.batch_size},     {"lr", num(h.lr)},
            {"momentum", num(h.momentum)}, {"cosine_decay", h.cosine_decay}, {"clip_norm", num(h.clip_norm)},
            {"weight_decay", num(h.weight_decay)}};
}

// Reads keys out of one JSON object, rejecting any it was not asked about.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ValidationError("config: '" + name(key) + "' has the wrong type");
        }
    }

    Reader child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Reader(it == j_.end() ? empty : *it, name(key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ValidationError("config: unknown key '" + name(it.key()) + "'");
        }
    }

private:
    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_hyper(Reader r, TrainHyper& h) {
    r.get("epochs", h.epochs);
    r.get("batch_size", h.batch_size);
    r.get("lr", h.lr);
    r.get("momentum", h.momentum);
    r.get("cosine_decay", h.cosine_decay);
    r.get("clip_norm", h.clip_norm);
    r.get("weight_decay", h.weight_decay);
    r.finish();
}

}  // namespace

std::string RunConfig::to_json() const {
    const auto& s = data.synthetic;
    json j;
    j["seed"] = seed;
    j["data"] = {{"n_samples", data.n_samples},
                 {"image_size", data.image_size},
                 {"channels", data.channels},
                 {"split_ratios", data.split_ratios},
                 {"source_dir", data.source_dir},
                 {"synthetic",
                  {{"background_lo", s.background_lo},
                   {"background_hi", s.background_hi},
                   {"noise_std", s.noise_std},
                   {"blob_amplitude_lo", s.blob_amplitude_lo},
                   {"blob_amplitude_hi", s.blob_amplitude_hi},
                   {"stripe_amplitude_lo", s.stripe_amplitude_lo},
                   {"stripe_amplitude_hi", s.stripe_amplitude_hi},
                   {"stripe_period_fraction", s.stripe_period_fraction}}}};
    j["vit"] = {{"patch_size", vit.patch_size}, {"embed_dim", vit.embed_dim},   {"num_blocks", vit.num_blocks},
                {"num_heads", vit.num_heads},   {"mlp_ratio", vit.mlp_ratio},   {"blur_augment", vit.blur_augment},
                {"train", hyper_json(vit.train)}};
    j["sevit"] = {{"m", sevit.m},
                  {"hidden", sevit.hidden},
                  {"detection_threshold", sevit.detection_threshold},
                  {"train", hyper_json(sevit.train)}};
    j["student"] = {{"widths", student.widths},
                    {"temperature", num(student.temperature)},
                    {"hard_blend", num(student.hard_blend)},
                    {"train", hyper_json(student.train)}};
    j["diffusion"] = {{"T", diffusion.T},
                      {"sigma_first", diffusion.sigma_first},
                      {"sigma_last", diffusion.sigma_last},
                      {"kernel_size", diffusion.kernel_size},
                      {"t_star", diffusion.t_star},
                      {"unet_base_width", diffusion.unet_base_width},
                      {"train", hyper_json(diffusion.train)}};
    j["attack"] = {{"epsilon", num(attack.epsilon)},
                   {"pgd_steps", attack.pgd_steps},
                   {"pgd_step_size", num(attack.pgd_step_size)},
                   {"autopgd_steps", attack.autopgd_steps},
                   {"random_start", attack.random_start},
                   {"batch_size", attack.batch_size},
                   {"attack_student", attack.attack_student}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("config: malformed JSON: ") + e.what());
    }
    RunConfig c;
    Reader root(j, "");
    root.get("seed", c.seed);
    {
        Reader d = root.child("data");
        d.get("n_samples", c.data.n_samples);
        d.get("image_size", c.data.image_size);
        d.get("channels", c.data.channels);
        d.get("split_ratios", c.data.split_ratios);
        d.get("source_dir", c.data.source_dir);
        Reader s = d.child("synthetic");
        auto& sp = c.data.synthetic;
        s.get("background_lo", sp.background_lo);
        s.get("background_hi", sp.background_hi);
        s.get("noise_std", sp.noise_std);
        s.get("blob_amplitude_lo", sp.blob_amplitude_lo);
        s.get("blob_amplitude_hi", sp.blob_amplitude_hi);
        s.get("stripe_amplitude_lo", sp.stripe_amplitude_lo);
        s.get("stripe_amplitude_hi", sp.stripe_amplitude_hi);
        s.get("stripe_period_fraction", sp.stripe_period_fraction);
        s.finish();
        d.finish();
    }
    {
        Reader v = root.child("vit");
        v.get("patch_size", c.vit.patch_size);
        v.get("embed_dim", c.vit.embed_dim);
        v.get("num_blocks", c.vit.num_blocks);
        v.get("num_heads", c.vit.num_heads);
        v.get("mlp_ratio", c.vit.mlp_ratio);
        v.get("blur_augment", c.vit.blur_augment);
        read_hyper(v.child("train"), c.vit.train);
        v.finish();
    }
    {
        Reader s = root.child("sevit");
        s.get("m", c.sevit.m);
        s.get("hidden", c.sevit.hidden);
        s.get("detection_threshold", c.sevit.detection_threshold);
        read_hyper(s.child("train"), c.sevit.train);
        s.finish();
    }
    {
        Reader s = root.child("student");
        s.get("widths", c.student.widths);
        s.get("temperature", c.student.temperature);
        s.get("hard_blend", c.student.hard_blend);
        read_hyper(s.child("train"), c.student.train);
        s.finish();
    }
    {
        Reader d = root.child("diffusion");
        d.get("T", c.diffusion.T);
        d.get("sigma_first", c.diffusion.sigma_first);
        d.get("sigma_last", c.diffusion.sigma_last);
        d.get("kernel_size", c.diffusion.kernel_size);
        d.get("t_star", c.diffusion.t_star);
        d.get("unet_base_width", c.diffusion.unet_base_width);
        read_hyper(d.child("train"), c.diffusion.train);
        d.finish();
    }
    {
        Reader a = root.child("attack");
        a.get("epsilon", c.attack.epsilon);
        a.get("pgd_steps", c.attack.pgd_steps);
        a.get("pgd_step_size", c.attack.pgd_step_size);
        a.get("autopgd_steps", c.attack.autopgd_steps);
        a.get("random_start", c.attack.random_start);
        a.get("batch_size", c.attack.batch_size);
        a.get("attack_student", c.attack.attack_student);
        a.finish();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

}  // namespace ddlab
