#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cfu/harness.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual explanations with uncertainty and out-of-distribution scoring"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string instances;

    for (const char* name : {"train", "exp1", "exp2", "score"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON experiment config")->required();
        sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
        sub->add_option("--seed", seed, "seed override");
        if (std::string(name) == "score") sub->add_option("--instances", instances, "CSV of instances to score");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cfu::kExitUsage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    cfu::ExperimentConfig cfg;
    try {
        cfg = cfu::load_config(config_path);
    } catch (const cfu::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cfu::kExitUsage;
    }
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (seed) cfg.seed = *seed;
    if (!instances.empty()) cfg.instances = instances;
    return cfu::run_command(command, cfg, std::cerr);
}
