// Command-line front end for the extraction-audit pipeline. Every subcommand
// runs one stage (run-all chains them); stages are skipped when the run
// ledger shows their settings and inputs unchanged.
//
// Exit codes: 0 success, 1 stage failure (error JSON on stderr), 2 usage.

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "entaudit/pipeline.hpp"

using namespace entaudit;

namespace {

std::vector<std::uint64_t> select_seeds(const ExperimentConfig& cfg, long chosen) {
    if (chosen < 0) return cfg.seeds;
    auto s = static_cast<std::uint64_t>(chosen);
    for (auto v : cfg.seeds)
        if (v == s) return {s};
    throw std::runtime_error("seed " + std::to_string(chosen) +
                             " is not in the configured seeds list");
}

std::vector<std::string> select_setups(const ExperimentConfig& cfg, const std::string& chosen,
                                       bool include_base) {
    if (chosen == "base" && !include_base)
        throw std::runtime_error("base is the pre-trained model; nothing to fine-tune");
    std::vector<std::string> out;
    if (chosen.empty()) {
        out = cfg.setups;
    } else {
        if (std::find(cfg.setups.begin(), cfg.setups.end(), chosen) == cfg.setups.end())
            throw std::runtime_error("setup " + chosen + " is not in the configured setups list");
        out.push_back(chosen);
    }
    if (!include_base) out.erase(std::remove(out.begin(), out.end(), "base"), out.end());
    if (out.empty()) throw std::runtime_error("no applicable setup selected");
    return out;
}

std::vector<PromptKind> select_kinds(const std::string& chosen) {
    if (chosen.empty()) return {PromptKind::naive, PromptKind::informed};
    return {parse_prompt_kind(chosen)};
}

void note(const std::string& stage, bool ran) {
    std::cout << "[" << stage << "] " << (ran ? "done" : "cached") << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-data extraction audit pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, workdir, setup, prompt;
    long seed = -1;
    int workers = 0;
    app.add_option("--config", config_path, "experiment configuration file")->required();
    app.add_option("--workdir", workdir, "override the working directory");
    app.add_option("--setup", setup, "restrict to one setup: base|full|partial|dp");
    app.add_option("--prompt", prompt, "restrict to one prompt kind: naive|informed");
    app.add_option("--seed", seed, "restrict to one run seed from the configured list");
    app.add_option("--workers", workers, "override the worker-thread count");

    app.add_subcommand("synth", "write the synthetic study inputs");
    app.add_subcommand("tokenizer-train", "train the subword tokenizer on the pre-training corpus");
    app.add_subcommand("pretrain", "masked-token pre-training, one run per seed");
    app.add_subcommand("finetune", "fine-tune pre-trained checkpoints per setup and seed");
    app.add_subcommand("generate", "sample text from checkpoints per setup, prompt kind and seed");
    app.add_subcommand("audit", "scan generated samples for entity matches");
    app.add_subcommand("report", "aggregate audits into the comparison report");
    app.add_subcommand("run-all", "run every stage in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // nonzero parse outcomes are usage errors here
    }

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        ConfigFile file = ConfigFile::parse_file(config_path);
        if (const char* env = std::getenv("ENTAUDIT_WORKDIR"); env && *env)
            file.set("paths", "workdir", env);
        if (!workdir.empty()) file.set("paths", "workdir", workdir);
        if (workers > 0) file.set("study", "workers", std::to_string(workers));
        ExperimentConfig cfg = ExperimentConfig::from_config(file);
        Pipeline pipe(cfg);

        if (cmd == "synth") {
            if (!cfg.synth_enabled) throw std::runtime_error("synth is disabled in the config");
            note("synth", pipe.stage_synth());
        } else if (cmd == "tokenizer-train") {
            if (cfg.synth_enabled) note("synth", pipe.stage_synth());
            note("tokenizer", pipe.stage_tokenizer());
        } else if (cmd == "pretrain") {
            if (cfg.synth_enabled) note("synth", pipe.stage_synth());
            note("tokenizer", pipe.stage_tokenizer());
            for (auto s : select_seeds(cfg, seed))
                note("pretrain.s" + std::to_string(s), pipe.stage_pretrain(s));
        } else if (cmd == "finetune") {
            if (cfg.synth_enabled) note("synth", pipe.stage_synth());
            note("tokenizer", pipe.stage_tokenizer());
            note("plant", pipe.stage_plant());
            for (const auto& su : select_setups(cfg, setup, false))
                for (auto s : select_seeds(cfg, seed))
                    note("finetune." + su + ".s" + std::to_string(s), pipe.stage_finetune(su, s));
        } else if (cmd == "generate") {
            if (cfg.synth_enabled) note("synth", pipe.stage_synth());
            note("tokenizer", pipe.stage_tokenizer());
            note("plant", pipe.stage_plant());
            for (const auto& su : select_setups(cfg, setup, true))
                for (PromptKind kind : select_kinds(prompt))
                    for (auto s : select_seeds(cfg, seed))
                        note("generate." + su + "." + prompt_kind_name(kind) + ".s" +
                                 std::to_string(s),
                             pipe.stage_generate(su, kind, s));
        } else if (cmd == "audit") {
            if (cfg.synth_enabled) note("synth", pipe.stage_synth());
            note("plant", pipe.stage_plant());
            for (const auto& su : select_setups(cfg, setup, true))
                for (PromptKind kind : select_kinds(prompt))
                    note("audit." + su + "." + prompt_kind_name(kind),
                         pipe.stage_audit(su, kind));
        } else if (cmd == "report") {
            note("report", pipe.stage_report());
        } else if (cmd == "run-all") {
            pipe.run_all();
            note("run-all", true);
        }
    } catch (const std::exception& e) {
        nlohmann::json err = {{"error", e.what()}, {"stage", cmd}};
        std::cerr << err.dump() << std::endl;
        return 1;
    }
    return 0;
}
