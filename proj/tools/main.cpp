#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "app/app.hpp"

namespace fs = std::filesystem;
using namespace racmf::app;

int main(int argc, char** argv) {
    CLI::App cli{"Region-adaptive conditional MeanFlow for CT image enhancement"};
    cli.require_subcommand(1);
    cli.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::optional<std::string> config;
    std::vector<std::string> overrides;
    std::optional<std::string> out;
    std::string manifest, backbone, controller, policy, split, images;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "JSON or TOML experiment config");
        sub->add_option("--set", overrides, "Override a config value, e.g. rollout.K=4 (repeatable)");
        sub->add_option("--out", out, "Base directory for run outputs (default: config out_dir)");
    };
    auto* gen = cli.add_subcommand("gen-data", "Generate the synthetic paired dataset");
    common(gen);
    auto* tb = cli.add_subcommand("train-backbone", "Train the conditional MeanFlow backbone");
    common(tb);
    tb->add_option("--manifest", manifest, "Dataset manifest")->required();
    auto* tc = cli.add_subcommand("train-controller", "Train the refinement controller against a frozen backbone");
    common(tc);
    tc->add_option("--manifest", manifest, "Dataset manifest")->required();
    tc->add_option("--backbone", backbone, "Backbone checkpoint")->required();
    auto* en = cli.add_subcommand("enhance", "Enhance every pair of a split");
    common(en);
    en->add_option("--manifest", manifest, "Dataset manifest")->required();
    en->add_option("--backbone", backbone, "Backbone checkpoint")->required();
    en->add_option("--controller", controller, "Controller checkpoint (omit for the plain CMF rollout)");
    en->add_option("--policy", policy, "cmf, zero, uniform, random or controller");
    en->add_option("--split", split, "Split to enhance (default: eval.split)");
    auto* ev = cli.add_subcommand("eval", "Quality, radiomic concordance and NPS metrics of enhanced images");
    common(ev);
    ev->add_option("--manifest", manifest, "Dataset manifest")->required();
    ev->add_option("--enhanced", images, "Enhance run directory or its enhanced/ folder")->required();
    ev->add_option("--split", split, "Split to evaluate (default: eval.split)");
    auto* np = cli.add_subcommand("nps", "Noise power spectrum profiles of input, enhanced and target images");
    common(np);
    np->add_option("--manifest", manifest, "Dataset manifest")->required();
    np->add_option("--images", images, "Enhance run directory or its enhanced/ folder")->required();
    np->add_option("--split", split, "Split to analyse (default: eval.split)");

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = cli.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        std::optional<std::string> env_seed;
        if (const char* s = std::getenv("RACMF_SEED")) env_seed = s;
        CommandContext ctx;
        ctx.cfg = load_experiment(config ? std::optional<fs::path>(*config) : std::nullopt, overrides, env_seed);
        ctx.out_base = out ? fs::path(*out) : fs::path(ctx.cfg.out_dir);
        ctx.log = &std::cout;
        if (gen->parsed()) {
            cmd_gen_data(ctx);
        } else if (tb->parsed()) {
            cmd_train_backbone(ctx, manifest);
        } else if (tc->parsed()) {
            cmd_train_controller(ctx, manifest, backbone);
        } else if (en->parsed()) {
            EnhanceOptions o{manifest, backbone, std::nullopt, policy, split};
            if (!controller.empty()) o.controller = controller;
            cmd_enhance(ctx, o);
        } else if (ev->parsed()) {
            cmd_eval(ctx, manifest, images, split);
        } else if (np->parsed()) {
            cmd_nps(ctx, manifest, images, split);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 0;
}
