// Command-line driver for the pipeline stages.
//
//   tapter <stage> --config <path> [--mode tapt|tapter] [--seed N] [--out DIR]
//                  [--corpus general|target] [--init CKPT]
//   tapter write-config <path>
//
// Exit codes: 0 success, 1 usage/config error, 2 missing dependency artifact.

#include "tapter/pipeline.hpp"

#include <iostream>

#include "CLI11.hpp"

int main(int argc, char** argv) {
    CLI::App app{"task-adaptive pre-training with word-embedding regularization"};
    app.require_subcommand(1);

    std::string config_path;
    tapter::StageOptions opts;
    uint64_t seed_arg = 0;

    auto add_common = [&](CLI::App* sub, bool needs_config = true) {
        if (needs_config)
            sub->add_option("--config", config_path, "pipeline config (json)")->required();
        sub->add_option("--out", opts.out_dir, "output directory (overrides config)");
        sub->add_option("--seed", seed_arg, "global seed (overrides config)")
            ->each([&](const std::string&) { opts.has_seed = true; });
    };

    std::vector<std::pair<tapter::Stage, CLI::App*>> stage_subs;
    for (tapter::Stage s :
         {tapter::Stage::Generate, tapter::Stage::TrainFasttext, tapter::Stage::InferEmbeddings,
          tapter::Stage::Pretrain, tapter::Stage::Finetune, tapter::Stage::Evaluate,
          tapter::Stage::Analyze}) {
        CLI::App* sub = app.add_subcommand(tapter::stage_name(s));
        add_common(sub);
        if (s == tapter::Stage::Pretrain) {
            sub->add_option("--mode", opts.mode, "tapt (no regularizer) or tapter")
                ->check(CLI::IsMember({"tapt", "tapter"}));
            sub->add_option("--corpus", opts.corpus, "which corpus to pre-train on")
                ->check(CLI::IsMember({"general", "target"}));
            sub->add_option("--init", opts.init, "initial checkpoint (optional)");
        }
        if (s == tapter::Stage::Finetune || s == tapter::Stage::Evaluate)
            sub->add_option("--init", opts.init, "checkpoint to start from")->required();
        stage_subs.emplace_back(s, sub);
    }

    std::string write_path;
    CLI::App* write_cfg = app.add_subcommand("write-config", "write a default config file");
    write_cfg->add_option("path", write_path, "destination")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (write_cfg->parsed()) {
            tapter::PipelineConfig{}.save(write_path);
            std::cout << "wrote " << write_path << '\n';
            return 0;
        }
        tapter::PipelineConfig cfg = tapter::PipelineConfig::load(config_path);
        opts.seed = seed_arg;
        for (const auto& [stage, sub] : stage_subs) {
            if (!sub->parsed()) continue;
            const int code = tapter::run_stage(cfg, stage, opts, std::cerr);
            if (code == 0) std::cout << tapter::stage_name(stage) << ": done\n";
            return code;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
