#include "ddlab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "ddlab/errors.hpp"
#include "ddlab/formats.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/train.hpp"
#include "json.hpp"

namespace ddlab::report {

using nlohmann::ordered_json;

namespace {

std::string cell_key(std::string_view m, std::string_view a, std::string_view v) {
    return std::string(m) + "/" + std::string(a) + "/" + std::string(v);
}

template <std::size_t N>
int rank_of(const std::array<std::string_view, N>& names, std::string_view s) {
    const auto it = std::find(names.begin(), names.end(), s);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

std::vector<GridCell> canonical(std::vector<GridCell> cells) {
    std::stable_sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
        const std::array<int, 3> ka{rank_of(kModels, a.model), rank_of(kAttacks, a.attack), rank_of(kVariations, a.variation)};
        const std::array<int, 3> kb{rank_of(kModels, b.model), rank_of(kAttacks, b.attack), rank_of(kVariations, b.variation)};
        return ka < kb;
    });
    return cells;
}

}  // namespace

const GridCell* EvalReport::find(std::string_view model, std::string_view attack, std::string_view variation) const {
    for (const auto& c : grid) {
        if (c.model == model && c.attack == attack && c.variation == variation) return &c;
    }
    return nullptr;
}

double EvalReport::accuracy(std::string_view model, std::string_view attack, std::string_view variation) const {
    const GridCell* c = find(model, attack, variation);
    if (!c) throw ValidationError("report has no cell " + cell_key(model, attack, variation));
    return c->accuracy;
}

std::vector<std::string> EvalReport::missing_cells() const {
    std::vector<std::string> out;
    for (auto m : kModels)
        for (auto a : kAttacks)
            for (auto v : kVariations)
                if (!find(m, a, v)) out.push_back(cell_key(m, a, v));
    return out;
}

void EvalReport::validate() const {
    std::set<std::string> seen;
    for (const auto& c : grid) {
        const std::string key = cell_key(c.model, c.attack, c.variation);
        if (rank_of(kModels, c.model) < 0 || rank_of(kAttacks, c.attack) < 0 || rank_of(kVariations, c.variation) < 0) {
            throw ValidationError("report: unknown cell " + key);
        }
        if (!seen.insert(key).second) throw ValidationError("report: duplicate cell " + key);
        if (!(c.accuracy >= 0.0 && c.accuracy <= 1.0)) throw ValidationError("report: accuracy outside [0, 1] in " + key);
    }
    const auto missing = missing_cells();
    if (!missing.empty()) {
        std::string msg = "report: incomplete grid, missing " + std::to_string(missing.size()) + " cells:";
        for (const auto& m : missing) msg += " " + m;
        throw ValidationError(msg);
    }
}

double evaluate_cell(const LogitsFn& model, const Tensor& images, std::span<const int> labels) {
    if (labels.empty()) throw ValidationError("evaluate_cell: empty batch");
    if (images.rank() < 1 || static_cast<std::size_t>(images.dim(0)) != labels.size()) {
        throw DimensionError("evaluate_cell: " + shape_str(images.shape()) + " images for " +
                             std::to_string(labels.size()) + " labels");
    }
    const auto pred = ops::argmax_rows(predict_logits(model, images));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    return double(correct) / double(pred.size());
}

std::string to_json(const EvalReport& r) {
    ordered_json j;
    j["config"] = r.config_json.empty() ? ordered_json::object() : ordered_json::parse(r.config_json);
    j["accuracy_convention"] = "fraction of the full test split classified correctly";
    j["grid"] = ordered_json::array();
    for (const auto& c : canonical(r.grid)) {
        j["grid"].push_back({{"model", c.model}, {"attack", c.attack}, {"variation", c.variation},
                             {"accuracy", c.accuracy}, {"n", c.n}});
    }
    j["timings"] = ordered_json::object();
    for (const auto& [k, v] : r.timings) j["timings"][k] = v;
    j["metrics"] = ordered_json::object();
    for (const auto& [k, v] : r.metrics) j["metrics"][k] = v;
    return j.dump(2) + "\n";
}

std::string to_csv(const EvalReport& r) {
    std::string out = "model,attack,variation,accuracy,n\n";
    char buf[64];
    for (const auto& c : canonical(r.grid)) {
        std::snprintf(buf, sizeof buf, "%.6f", c.accuracy);
        out += c.model + "," + c.attack + "," + c.variation + "," + buf + "," + std::to_string(c.n) + "\n";
    }
    return out;
}

EvalReport from_json(const std::string& text) {
    EvalReport r;
    try {
        const auto j = ordered_json::parse(text);
        const auto& cfg = j.at("config");
        r.config_json = cfg.empty() ? std::string() : nlohmann::json(cfg).dump(2) + "\n";
        for (const auto& c : j.at("grid")) {
            r.grid.push_back({c.at("model").get<std::string>(), c.at("attack").get<std::string>(),
                              c.at("variation").get<std::string>(), c.at("accuracy").get<double>(),
                              c.at("n").get<std::size_t>()});
        }
        for (const auto& [k, v] : j.at("timings").items()) r.timings[k] = v.get<double>();
        if (j.contains("metrics"))
            for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = v.get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("report JSON: ") + e.what());
    }
    r.grid = canonical(std::move(r.grid));
    return r;
}

void emit_report(const EvalReport& r, const std::filesystem::path& dir) {
    r.validate();
    std::filesystem::create_directories(dir);
    write_text_atomic(dir / "report.json", to_json(r));
    write_text_atomic(dir / "report.csv", to_csv(r));
}

EvalReport read_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path, std::ios::binary);
    if (!in) throw ValidationError("cannot open report " + json_path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

}  // namespace ddlab::report
