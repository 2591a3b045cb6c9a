// Experiment driver: config-driven data synthesis, encoder training, victim
// derivation, universal-initialization training, attacks and analyses.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "umigrat/pipeline.hpp"

namespace {

using namespace umigrat;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct CommonArgs {
    std::string config_path;
    std::optional<std::string> output_dir;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides; // section.key=value
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file")->required();
    cmd->add_option("--out", args.output_dir, "override [run] output_dir");
    cmd->add_option("--seed", args.seed, "override [run] seed");
    cmd->add_option("--set", args.overrides,
                    "override any config key as section.key=value (repeatable)");
}

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = parse_config_file(args.config_path);
    for (const std::string& ov : args.overrides) {
        const auto dot = ov.find('.');
        const auto eq = ov.find('=');
        require(dot != std::string::npos && eq != std::string::npos && dot < eq,
                "override '" + ov + "' must look like section.key=value");
        apply_override(cfg, ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1),
                       ov.substr(eq + 1));
        std::cerr << "note: flag overrides config: " << ov << "\n";
    }
    if (args.output_dir) {
        cfg.output_dir = *args.output_dir;
        std::cerr << "note: flag overrides config: run.output_dir=" << *args.output_dir << "\n";
    }
    if (args.seed) {
        cfg.seed = *args.seed;
        std::cerr << "note: flag overrides config: run.seed=" << *args.seed << "\n";
    }
    if (const char* env = std::getenv("UMIGRAT_SEED")) {
        cfg.seed = std::stoull(env);
        std::cerr << "note: UMIGRAT_SEED overrides the master seed: " << env << "\n";
    }
    cfg.validate();
    return cfg;
}

void dump_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    require(in.good(), "report: missing " + p.string());
    std::cout << in.rdbuf();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale transfer-attack laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string attack_method = "umi-grat";
    std::size_t attack_input = 0;
    std::string analyze_what = "transfer";
    std::string report_format = "csv";

    CLI::App* run = app.add_subcommand("run", "run every stage in dependency order");
    add_common(run, args);
    CLI::App* make_data = app.add_subcommand("make-data", "generate the synthetic datasets");
    add_common(make_data, args);
    CLI::App* build_foundation =
        app.add_subcommand("build-foundation", "train the surrogate foundation encoders");
    add_common(build_foundation, args);
    CLI::App* derive_victims =
        app.add_subcommand("derive-victims", "derive the fine-tuned victim encoders");
    add_common(derive_victims, args);
    CLI::App* umi_train =
        app.add_subcommand("umi-train", "train the universal meta-initialization");
    add_common(umi_train, args);
    umi_train->add_option("--rounds", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("umi.rounds=" + v.front());
        return true;
    }, "meta rounds");
    umi_train->add_option("--eta", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("umi.eta=" + v.front());
        return true;
    }, "universal step size");

    CLI::App* attack = app.add_subcommand("attack", "attack one evaluation input");
    add_common(attack, args);
    attack->add_option("--method", attack_method, "ifgsm | mifgsm | umi-grat | umi-mifgsm");
    attack->add_option("--input", attack_input, "evaluation input index");
    attack->add_option("--eps255", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("attack.eps255=" + v.front());
        return true;
    }, "l-inf budget in 0-255 units");
    attack->add_option("--alpha255", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("attack.alpha255=" + v.front());
        return true;
    }, "step size in 0-255 units");
    attack->add_option("--iters", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("attack.iterations=" + v.front());
        return true;
    }, "attack iterations");
    attack->add_option("--sigma", [&args](const std::vector<std::string>& v) {
        args.overrides.push_back("attack.sigma=" + v.front());
        return true;
    }, "gradient noise scale");

    CLI::App* analyze = app.add_subcommand("analyze", "run one analysis report");
    add_common(analyze, args);
    analyze->add_option("what", analyze_what, "deviation | transfer | cosine")->required();

    CLI::App* report = app.add_subcommand("report", "print the aggregate reports");
    add_common(report, args);
    report->add_option("--format", report_format, "csv | json");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load_config(args);

        if (analyze->parsed()) {
            require(analyze_what == "deviation" || analyze_what == "transfer" ||
                        analyze_what == "cosine",
                    "analyze: unknown report '" + analyze_what + "'");
            cfg.reports = {analyze_what};
        }

        Pipeline pipeline(std::move(cfg));
        if (run->parsed()) {
            pipeline.run();
        } else if (make_data->parsed()) {
            pipeline.stage_data();
            pipeline.write_manifest();
        } else if (build_foundation->parsed()) {
            pipeline.stage_foundation();
            pipeline.write_manifest();
        } else if (derive_victims->parsed()) {
            pipeline.stage_victims();
            pipeline.write_manifest();
        } else if (umi_train->parsed()) {
            pipeline.stage_umi();
            pipeline.write_manifest();
        } else if (attack->parsed()) {
            const auto path =
                pipeline.attack_single(attack_input, attack_method_from_string(attack_method));
            pipeline.write_manifest();
            std::cout << path.string() << "\n";
        } else if (analyze->parsed()) {
            pipeline.stage_experiment();
            pipeline.write_manifest();
        } else if (report->parsed()) {
            pipeline.stage_experiment();
            pipeline.write_manifest();
            require(report_format == "csv" || report_format == "json",
                    "report: unknown format '" + report_format + "'");
            for (const auto& entry :
                 std::filesystem::directory_iterator(pipeline.reports_dir())) {
                if (entry.path().extension() == ("." + report_format)) dump_file(entry.path());
            }
        }
        return kExitOk;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
}
