// ddlab: command-line driver for the adversarial-robustness pipeline.
//
//   ddlab run-pipeline --config cfg.json --out runs/a
//   ddlab attack --out runs/a          (trains whatever the attack needs first)
//   ddlab report --out runs/a
//
// Exit status: 0 success, 1 invalid configuration or arguments, 2 stage failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ddlab/config.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/pipeline.hpp"
#include "ddlab/report.hpp"

namespace {

constexpr int kValidationExit = 1;
constexpr int kStageExit = 2;

void print_grid(const ddlab::report::EvalReport& r) {
    std::cout << ddlab::report::to_csv(r);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Defensive-diffusion robustness lab"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "run";
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "RunConfig JSON (defaults when omitted)")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the config seed");
        sub->add_option("--out", out, "Artifact directory")->capture_default_str();
    };

    std::vector<std::pair<CLI::App*, ddlab::pipeline::Stage>> stage_cmds;
    for (auto s : ddlab::pipeline::kStages) {
        auto* sub = app.add_subcommand(std::string(ddlab::pipeline::to_string(s)), "Run one stage (and missing prerequisites)");
        add_common(sub);
        stage_cmds.emplace_back(sub, s);
    }
    auto* run_all = app.add_subcommand("run-pipeline", "Run every stage and emit report.json/report.csv");
    add_common(run_all);
    auto* report = app.add_subcommand("report", "Re-emit and print the report of a finished run");
    add_common(report);
    auto* show = app.add_subcommand("show-config", "Print the fully materialized config");
    add_common(show);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kValidationExit;
    }

    ddlab::RunConfig cfg;
    try {
        if (!config_path.empty()) cfg = ddlab::RunConfig::load(config_path);
        if (seed) cfg.seed = *seed;
        cfg.validate();
        if (show->parsed()) {
            std::cout << cfg.to_json();
            return 0;
        }
        ddlab::pipeline::Pipeline p(cfg, out, &std::cerr);
        if (run_all->parsed()) {
            print_grid(p.run_all());
        } else if (report->parsed()) {
            print_grid(p.reemit_report());
        } else {
            for (auto& [sub, stage] : stage_cmds) {
                if (sub->parsed()) p.run(stage);
            }
        }
    } catch (const ddlab::pipeline::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStageExit;
    } catch (const ddlab::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationExit;
    } catch (const ddlab::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationExit;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStageExit;
    }
    return 0;
}
