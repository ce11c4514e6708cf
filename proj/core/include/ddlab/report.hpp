#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ddlab/models.hpp"

namespace ddlab::report {

inline constexpr std::array<std::string_view, 3> kModels = {"vit", "sevit", "student_cnn"};
inline constexpr std::array<std::string_view, 4> kAttacks = {"clean", "fgsm", "pgd", "autopgd"};
inline constexpr std::array<std::string_view, 4> kVariations = {"none", "blurred", "algorithmic", "direct"};

struct GridCell {
    std::string model;
    std::string attack;
    std::string variation;
    double accuracy = 0.0;
    std::size_t n = 0;

    bool operator==(const GridCell&) const = default;
};

/// Accuracy grid over model x attack x purifier variation. Robust accuracy is
/// measured over the full test split, not only initially-correct samples.
struct EvalReport {
    /// RunConfig JSON snapshot that produced the report.
    std::string config_json;
    std::vector<GridCell> grid;
    /// Wall-clock seconds per stage.
    std::map<std::string, double> timings;
    /// Side measurements such as detection rates and per-head accuracies.
    std::map<std::string, double> metrics;

    const GridCell* find(std::string_view model, std::string_view attack, std::string_view variation) const;
    /// Accuracy of one cell; ValidationError if absent.
    double accuracy(std::string_view model, std::string_view attack, std::string_view variation) const;
    /// Cells of the full 48-cell grid that are absent ("model/attack/variation").
    std::vector<std::string> missing_cells() const;
    /// Complete grid, no duplicates, accuracies in [0, 1].
    void validate() const;

    bool operator==(const EvalReport&) const = default;
};

/// Fraction of rows where argmax(model(images)) == label.
double evaluate_cell(const LogitsFn& model, const Tensor& images, std::span<const int> labels);

std::string to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);
EvalReport from_json(const std::string& text);

/// Writes `report.json` and `report.csv` into `dir` atomically. Cells are
/// emitted in canonical model/attack/variation order.
void emit_report(const EvalReport& r, const std::filesystem::path& dir);
EvalReport read_report(const std::filesystem::path& json_path);

}  // namespace ddlab::report
