// Acceptance report: one PASS/FAIL line per criterion, thresholds pinned below.
//
//   ddlab_acceptance --cli build/tools/ddlab --desk-root build/desk --work build/acceptance --expect-red 8
//
// Exit status 0 when every failing criterion is listed in --expect-red.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "checks.hpp"
#include "desk.hpp"
#include "ddlab/diffusion.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/formats.hpp"
#include "ddlab/report.hpp"

using namespace ddlab;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradTol = 1e-3, kGradStep = 1e-3, kGradCpuSeconds = 120.0;
constexpr int kShapesPerOp = 5;
constexpr double kVitClean = 0.95, kPgdDrop = 0.30, kThreatSeconds = 600.0;
constexpr double kBlurGain = 0.15, kBlurSlack = 0.05;
constexpr int kSeedsRequired = 2;
constexpr double kStudentCleanGap = 0.05, kStudentGain = 0.20, kGapRecovery = 0.5;
constexpr double kSevitGain = 0.10, kSevitCleanGap = 0.03;
constexpr double kSmokeSeconds = 900.0;
constexpr const char* kAttacks[] = {"fgsm", "pgd", "autopgd"};

struct Line {
    int id;
    std::string title;
    bool passed = true;
    std::vector<std::string> facts;
    std::vector<std::string> info;

    void check(bool ok, const std::string& fact) {
        passed = passed && ok;
        facts.push_back(std::string(ok ? "ok " : "NO ") + fact);
    }
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string pct(double v) { return fmt("%.1f%%", 100.0 * v); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double cpu_seconds() { return double(std::clock()) / CLOCKS_PER_SEC; }

void add_outcomes(Line& l, const std::vector<checks::Outcome>& outs) {
    for (const auto& o : outs) l.check(o.passed, o.name + " (worst " + fmt("%.3g", o.worst) + "; " + o.detail + ")");
}

/// Desk runs that finished, keyed by seed.
std::map<int, checks::DeskRun> load_desks(const fs::path& root, std::vector<std::string>& notes) {
    std::map<int, checks::DeskRun> out;
    for (int seed = 0; seed < 3; ++seed) {
        const fs::path dir = root / ("seed" + std::to_string(seed));
        try {
            out.emplace(seed, checks::load_desk(dir));
        } catch (const std::exception& e) {
            notes.push_back("seed " + std::to_string(seed) + ": " + e.what());
        }
    }
    return out;
}

double acc(const checks::DeskRun& d, const char* m, const char* a, const char* v) { return d.report.accuracy(m, a, v); }

/// Smoke-scale config: default architecture, 256 samples, 2 epochs per trained stage.
std::string smoke_config_json(const fs::path& dir) {
    RunConfig c;
    c.data.n_samples = 256;
    c.vit.train.epochs = 2;
    c.sevit.train.epochs = 2;
    c.student.train.epochs = 2;
    c.diffusion.train.epochs = 2;
    const fs::path p = dir / "smoke.json";
    write_text_atomic(p, c.to_json());
    return p.string();
}

struct CliRun {
    int status = -1;
    double seconds = 0.0;
};

CliRun run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string cmd = "\"" + cli + "\" " + args + " >\"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string cli, desk_root, work;
    std::vector<int> expect_red;
    std::uint64_t seed = 2024;
    app.add_option("--cli", cli, "ddlab executable")->required();
    app.add_option("--desk-root", desk_root, "Directory with seed0..seed2 default-scale runs")->required();
    app.add_option("--work", work, "Scratch directory for the smoke runs")->required();
    app.add_option("--expect-red", expect_red, "Criteria known not to hold at this scale");
    app.add_option("--seed", seed, "Seed of the property suites")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    std::vector<std::string> notes;
    const auto desks = load_desks(desk_root, notes);
    const checks::DeskRun* seed0 = desks.count(0) ? &desks.at(0) : nullptr;
    std::vector<Line> lines;

    // 1 ------------------------------------------------------------------------
    {
        Line l{1, "gradient suite"};
        const double c0 = cpu_seconds();
        const auto outs = checks::gradient_suite(seed, kGradStep, kGradTol, kShapesPerOp);
        const double cpu = cpu_seconds() - c0;
        std::map<std::string, int> shapes;
        for (const auto& c : checks::gradient_cases(Prng(seed), kShapesPerOp)) ++shapes[c.op];
        double worst = 0.0;
        std::string worst_op;
        for (const auto& o : outs) {
            if (o.worst > worst) worst = o.worst, worst_op = o.name;
            if (!o.passed) l.check(false, o.name + " relative error " + fmt("%.3g", o.worst));
        }
        const int fewest = shapes.empty() ? 0 : std::min_element(shapes.begin(), shapes.end(), [](auto& a, auto& b) {
                                                    return a.second < b.second;
                                                })->second;
        l.check(true, std::to_string(outs.size()) + " ops, worst " + fmt("%.2e", worst) + " (" + worst_op + ") <= " +
                          fmt("%.0e", kGradTol) + ", step " + fmt("%.0e", kGradStep));
        l.check(fewest >= kShapesPerOp, "fewest shapes per op " + std::to_string(fewest) + " >= " + std::to_string(kShapesPerOp));
        l.check(cpu < kGradCpuSeconds, "CPU " + fmt("%.2f", cpu) + " s < " + fmt("%.0f", kGradCpuSeconds) + " s");
        lines.push_back(l);
    }

    // 2 ------------------------------------------------------------------------
    {
        Line l{2, "attack correctness"};
        add_outcomes(l, checks::attack_suite(seed, 100));
        lines.push_back(l);
    }

    // 3 ------------------------------------------------------------------------
    {
        Line l{3, "threat reproduction (seed 0)"};
        if (!seed0) {
            l.check(false, "seed-0 desk run missing");
        } else {
            const double clean = acc(*seed0, "vit", "clean", "none"), pgd = acc(*seed0, "vit", "pgd", "none");
            l.check(clean >= kVitClean, "ViT clean " + pct(clean) + " >= " + pct(kVitClean));
            l.check(clean - pgd >= kPgdDrop, "PGD eps=" + fmt("%.2f", seed0->cfg.attack.epsilon) + " accuracy " + pct(pgd) +
                                                 ", drop " + pct(clean - pgd) + " >= " + pct(kPgdDrop));
            double secs = 0.0;
            for (const char* s : {"gen-data", "train-vit", "attack"}) secs += seed0->timings.count(s) ? seed0->timings.at(s) : 1e9;
            l.check(secs < kThreatSeconds, "data + ViT training + attacks " + fmt("%.0f", secs) + " s < " +
                                               fmt("%.0f", kThreatSeconds) + " s");
        }
        for (const auto& [s, d] : desks) {
            if (s == 0) continue;
            l.info.push_back("seed " + std::to_string(s) + ": clean " + pct(acc(d, "vit", "clean", "none")) + ", PGD " +
                             pct(acc(d, "vit", "pgd", "none")));
        }
        lines.push_back(l);
    }

    // 4 ------------------------------------------------------------------------
    {
        Line l{4, "blurred purification helps (>= 2 of 3 seeds)"};
        int holding = 0;
        for (const auto& [s, d] : desks) {
            bool ok = true;
            std::string row = "seed " + std::to_string(s) + ":";
            for (const char* a : kAttacks) {
                const double none = acc(d, "vit", a, "none"), blur = acc(d, "vit", a, "blurred");
                const double algo = acc(d, "vit", a, "algorithmic"), direct = acc(d, "vit", a, "direct");
                const bool cell = blur - none >= kBlurGain && blur >= algo - kBlurSlack && blur >= direct - kBlurSlack;
                ok = ok && cell;
                row += std::string(" ") + a + " none " + pct(none) + " blurred " + pct(blur) + " algo " + pct(algo) +
                       " direct " + pct(direct) + (cell ? "" : " [miss]") + ";";
            }
            holding += ok;
            l.check(true, row + (ok ? " holds" : " fails"));
        }
        l.check(holding >= kSeedsRequired, std::to_string(holding) + " seeds satisfy gain >= " + pct(kBlurGain) +
                                               " and slack " + pct(kBlurSlack) + "; need " + std::to_string(kSeedsRequired));
        if (seed0) {
            // t* sweep on seed 0: blurred accuracy of the ViT for every timestep.
            const auto sched = seed0->cfg.diffusion.schedule();
            const LogitsFn vit = [seed0](const Tensor& x) { return seed0->vit->logits(x); };
            for (const char* a : {"clean", "fgsm", "pgd", "autopgd"}) {
                const Tensor x = seed0->attacked(a);
                std::string row = std::string("t* sweep ") + a + ":";
                for (int t = 1; t <= sched.T; ++t) {
                    const Tensor p = diffusion::map_batches(x, 100, [&](const Tensor& b) { return diffusion::purify_blurred(b, t, sched); });
                    row += " " + std::to_string(t) + "=" + pct(report::evaluate_cell(vit, p, seed0->test.labels));
                }
                l.info.push_back(row + " (default t* = " + std::to_string(seed0->cfg.diffusion.t_star) + ")");
            }
        }
        lines.push_back(l);
    }

    // 5 ------------------------------------------------------------------------
    {
        Line l{5, "blur mathematics"};
        add_outcomes(l, checks::blur_suite(seed, 100));
        lines.push_back(l);
    }

    // 6 ------------------------------------------------------------------------
    {
        Line l{6, "cold-sampling oracle equivalence"};
        add_outcomes(l, {checks::cold_sampling_oracle(seed, 8)});
        lines.push_back(l);
    }

    // 7 ------------------------------------------------------------------------
    auto distill_facts = [](const checks::DeskRun& d, Line* l, std::string* summary) {
        const double vit_clean = acc(d, "vit", "clean", "none"), st_clean = acc(d, "student_cnn", "clean", "none");
        const double vit_pgd = acc(d, "vit", "pgd", "none"), st_pgd = acc(d, "student_cnn", "pgd", "none");
        bool all = true;
        auto put = [&](bool ok, const std::string& f) {
            all = all && ok;
            if (l) l->check(ok, f);
        };
        put(std::abs(st_clean - vit_clean) <= kStudentCleanGap,
            "student clean " + pct(st_clean) + " vs ViT " + pct(vit_clean) + " within " + pct(kStudentCleanGap));
        put(st_pgd >= vit_pgd + kStudentGain,
            "student under ViT-crafted PGD " + pct(st_pgd) + " >= ViT " + pct(vit_pgd) + " + " + pct(kStudentGain));
        for (const char* a : kAttacks) {
            const double none = acc(d, "vit", a, "none"), blur = acc(d, "vit", a, "blurred");
            const double gap = vit_clean - none;
            const double recovered = gap > 0 ? (blur - none) / gap : 1.0;
            put(blur - none >= kGapRecovery * gap, std::string("blurred recovers ") + pct(recovered) + " of the " + a +
                                                       " gap (" + pct(none) + " -> " + pct(blur) + "), need " + pct(kGapRecovery));
        }
        if (summary) *summary = all ? "holds" : "fails";
    };
    {
        Line l{7, "distillation transferability (seed 0)"};
        if (!seed0) l.check(false, "seed-0 desk run missing");
        else distill_facts(*seed0, &l, nullptr);
        for (const auto& [s, d] : desks) {
            if (s == 0) continue;
            std::string sum;
            distill_facts(d, nullptr, &sum);
            l.info.push_back("seed " + std::to_string(s) + ": " + sum + ", student PGD " +
                             pct(acc(d, "student_cnn", "pgd", "none")) + " vs ViT " + pct(acc(d, "vit", "pgd", "none")));
        }
        lines.push_back(l);
    }

    // 8 ------------------------------------------------------------------------
    auto sevit_facts = [](const checks::DeskRun& d, Line* l, std::string* summary) {
        const double vit_fgsm = acc(d, "vit", "fgsm", "none"), se_fgsm = acc(d, "sevit", "fgsm", "none");
        const double vit_clean = acc(d, "vit", "clean", "none"), se_clean = acc(d, "sevit", "clean", "none");
        const double flag_pgd = d.report.metrics.at("sevit.flag_rate.pgd"), flag_clean = d.report.metrics.at("sevit.flag_rate.clean");
        bool all = true;
        auto put = [&](bool ok, const std::string& f) {
            all = all && ok;
            if (l) l->check(ok, f);
        };
        put(d.cfg.sevit.m == 3 && d.cfg.sevit.detection_threshold == 1, "m = 3, detection threshold 1");
        put(se_fgsm >= vit_fgsm + kSevitGain, "SEViT FGSM " + pct(se_fgsm) + " >= ViT " + pct(vit_fgsm) + " + " + pct(kSevitGain));
        put(std::abs(se_clean - vit_clean) <= kSevitCleanGap,
            "SEViT clean " + pct(se_clean) + " vs ViT " + pct(vit_clean) + " within " + pct(kSevitCleanGap));
        put(flag_pgd > flag_clean, "PGD flag rate " + pct(flag_pgd) + " > clean flag rate " + pct(flag_clean));
        if (summary) *summary = (all ? "holds: " : "fails: ") + std::string("SEViT FGSM ") + pct(se_fgsm) + " vs ViT " + pct(vit_fgsm);
    };
    {
        Line l{8, "SEViT baseline (seed 0)"};
        if (!seed0) l.check(false, "seed-0 desk run missing");
        else sevit_facts(*seed0, &l, nullptr);
        for (const auto& [s, d] : desks) {
            if (s == 0) continue;
            std::string sum;
            sevit_facts(d, nullptr, &sum);
            l.info.push_back("seed " + std::to_string(s) + ": " + sum);
        }
        if (seed0) {
            std::string heads = "head accuracy clean/PGD:";
            for (int h = 1; h <= seed0->cfg.sevit.m; ++h) {
                const std::string k = "sevit.head_" + std::to_string(h) + ".accuracy.";
                heads += " " + std::to_string(h) + "=" + pct(seed0->report.metrics.at(k + "clean")) + "/" +
                         pct(seed0->report.metrics.at(k + "pgd"));
            }
            l.info.push_back(heads);
        }
        lines.push_back(l);
    }

    // 9 and 10: two fresh smoke runs of one config ----------------------------------
    fs::remove_all(work);
    fs::create_directories(work);
    const std::string smoke = smoke_config_json(work);
    const CliRun first = run_cli(cli, "run-pipeline --config \"" + smoke + "\" --out \"" + (fs::path(work) / "run_a").string() + "\"",
                                 fs::path(work) / "run_a.log");
    const CliRun second = run_cli(cli, "run-pipeline --config \"" + smoke + "\" --out \"" + (fs::path(work) / "run_b").string() + "\"",
                                  fs::path(work) / "run_b.log");
    {
        Line l{9, "determinism and formats"};
        const fs::path a = fs::path(work) / "run_a" / "report.csv", b = fs::path(work) / "run_b" / "report.csv";
        const bool ran = first.status == 0 && second.status == 0 && fs::exists(a) && fs::exists(b);
        l.check(ran, "two run-pipeline invocations exit " + std::to_string(first.status) + ", " + std::to_string(second.status));
        l.check(ran && slurp(a) == slurp(b), "report.csv byte-identical (" + std::to_string(ran ? slurp(a).size() : 0) + " bytes)");
        add_outcomes(l, checks::format_suite(seed, 200));
        if (seed0) {
            bool same = true;
            for (const auto& e : fs::directory_iterator(seed0->dir / "models")) {
                const auto bytes = read_file_bytes(e.path());
                same = same && encode_checkpoint(decode_checkpoint(bytes)) == bytes;
            }
            l.check(same, "seed-0 checkpoints re-encode byte-identically");
        }
        lines.push_back(l);
    }
    {
        Line l{10, "end-to-end smoke (n=256, 2 epochs per stage)"};
        l.check(first.status == 0, "run-pipeline exit " + std::to_string(first.status));
        l.check(first.seconds < kSmokeSeconds, "wall " + fmt("%.0f", first.seconds) + " s < " + fmt("%.0f", kSmokeSeconds) + " s");
        try {
            const auto r = report::read_report(fs::path(work) / "run_a" / "report.json");
            r.validate();
            l.check(r.grid.size() == 48, std::to_string(r.grid.size()) + " cells, complete");
        } catch (const std::exception& e) {
            l.check(false, std::string("grid: ") + e.what());
        }
        lines.push_back(l);
    }

    // Summary ------------------------------------------------------------------
    const std::set<int> expected(expect_red.begin(), expect_red.end());
    bool unexpected = false;
    for (const auto& n : notes) std::cout << "note: " << n << "\n";
    for (const auto& l : lines) {
        for (const auto& f : l.facts) std::cout << "      [" << l.id << "] " << f << "\n";
        for (const auto& f : l.info) std::cout << "      [" << l.id << "] info " << f << "\n";
    }
    std::cout << "\n";
    for (const auto& l : lines) {
        const bool known = expected.count(l.id) > 0;
        std::cout << (l.passed ? "PASS" : "FAIL") << "  " << l.id << ". " << l.title
                  << (!l.passed && known ? "  (expected red, see decisions ledger)" : "")
                  << (l.passed && known ? "  (listed as expected red but passed)" : "") << "\n";
        unexpected = unexpected || (!l.passed && !known);
    }
    return unexpected ? 1 : 0;
}
