#pragma once

// Study orchestration: resolved experiment configuration, a content-hashed
// run ledger that skips up-to-date stages, the staged pipeline (inputs ->
// tokenizer -> canary planting -> pre-training -> fine-tuning -> generation
// -> audit) and the cross-setup comparison report. Report artifacts carry no
// timestamps, so a rerun from the same config is byte-identical; wall times
// live only in the ledger.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "entaudit/audit.hpp"
#include "entaudit/config.hpp"
#include "entaudit/corpus.hpp"
#include "entaudit/generator.hpp"
#include "entaudit/synth.hpp"
#include "entaudit/tokenizer.hpp"
#include "entaudit/training.hpp"

namespace entaudit {

// fixed-format double rendering for digests and CSVs
inline std::string num_str(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string pct_str(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
    std::string workdir = "work";
    std::string finetune_path, pretrain_path, prompts_path, gazetteer_path, canaries_path;

    bool synth_enabled = true;
    SynthSpec synth;

    int tokenizer_vocab = 512;
    ModelConfig model;             // vocab_size filled from the tokenizer at train time
    TrainConfig pretrain_train;    // objective mlm
    std::map<std::string, TrainConfig> finetune_train;  // keys: full, partial, dp
    DpConfig dp;
    DecodingConfig decoding;
    int prompt_chars = 50;

    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    long n_samples = 2000;  // per (setup, prompt kind), pooled over all seeds
    std::vector<std::string> setups = {"base", "full", "partial", "dp"};
    std::uint64_t split_seed = kDefaultSplitSeed;
    std::uint64_t plant_seed = 97;
    double equal_band_pct = 5.0;  // "about equal" band for base-vs-finetuned, in points
    int workers = 1;

    static ExperimentConfig load(const std::string& path) {
        return from_config(ConfigFile::parse_file(path));
    }

    static ExperimentConfig from_config(const ConfigFile& f) {
        ExperimentConfig c;
        c.workdir = f.get_string("paths", "workdir", c.workdir);
        const std::string data = c.workdir + "/data";
        c.finetune_path = f.get_string("paths", "finetune", data + "/finetune.jsonl");
        c.pretrain_path = f.get_string("paths", "pretrain", data + "/pretrain.jsonl");
        c.prompts_path = f.get_string("paths", "prompts", data + "/prompts.jsonl");
        c.gazetteer_path = f.get_string("paths", "gazetteer", data + "/gazetteer.tsv");
        c.canaries_path = f.get_string("paths", "canaries", data + "/canaries.json");

        c.synth_enabled = f.get_bool("synth", "enabled", true);
        c.synth.finetune_docs = static_cast<int>(f.get_int("synth", "finetune_docs", 5000));
        c.synth.pretrain_docs = static_cast<int>(f.get_int("synth", "pretrain_docs", 1200));
        c.synth.prompt_docs = static_cast<int>(f.get_int("synth", "prompt_docs", 300));
        c.synth.seed = static_cast<std::uint64_t>(f.get_int("synth", "seed", 7));

        c.tokenizer_vocab = static_cast<int>(f.get_int("tokenizer", "vocab_size", 512));

        c.model.n_layers = static_cast<int>(f.get_int("model", "n_layers", 2));
        c.model.n_heads = static_cast<int>(f.get_int("model", "n_heads", 2));
        c.model.d_model = static_cast<int>(f.get_int("model", "d_model", 16));
        c.model.d_ff = static_cast<int>(f.get_int("model", "d_ff", 64));
        c.model.max_seq = static_cast<int>(f.get_int("model", "max_seq", 96));
        c.model.dropout_attn = f.get_double("model", "dropout_attn", 0.1);
        c.model.dropout_classifier = f.get_double("model", "dropout_classifier", 0.3);

        c.pretrain_train.setup = Setup::full;
        c.pretrain_train.objective = Objective::mlm;
        c.pretrain_train.batch_size = static_cast<int>(f.get_int("pretrain", "batch_size", 32));
        c.pretrain_train.learning_rate = f.get_double("pretrain", "learning_rate", 1e-3);
        c.pretrain_train.epochs = static_cast<int>(f.get_int("pretrain", "epochs", 6));

        // lr/epoch defaults come from a small grid search at this model size:
        // full and partial need 1e-3 x 5 epochs to pull clear of the majority
        // baseline, dp stays at 3 because the noise dominates anyway.
        const std::map<std::string, std::pair<double, int>> finetune_defaults = {
            {"full", {1e-3, 5}}, {"partial", {1e-3, 5}}, {"dp", {1e-3, 3}}};
        for (const auto& [name, lr_ep] : finetune_defaults) {
            TrainConfig t;
            t.setup = parse_setup(name);
            t.objective = Objective::classify;
            const std::string section = "finetune." + name;
            t.batch_size = static_cast<int>(f.get_int(section, "batch_size", 32));
            t.learning_rate = f.get_double(section, "learning_rate", lr_ep.first);
            t.epochs = static_cast<int>(f.get_int(section, "epochs", lr_ep.second));
            c.finetune_train.emplace(name, t);
        }

        c.dp.clip_norm = f.get_double("dp", "clip_norm", 10.0);
        c.dp.noise_multiplier = f.get_double("dp", "noise_multiplier", 0.5);
        c.dp.delta = f.get_double("dp", "delta", 0.0);  // 0 = 1/N at run time
        c.dp.clip_mode = parse_clip_mode(f.get_string("dp", "clip_mode", "global"));

        c.decoding.pool_size = static_cast<int>(f.get_int("decoding", "pool_size", 30));
        c.decoding.nucleus_p = f.get_double("decoding", "nucleus_p", 0.8);
        c.decoding.temperature = f.get_double("decoding", "temperature", 2.0);
        c.decoding.no_repeat_ngram = static_cast<int>(f.get_int("decoding", "no_repeat_ngram", 3));
        c.decoding.target_len = static_cast<int>(f.get_int("decoding", "target_len", 64));
        c.prompt_chars = static_cast<int>(f.get_int("decoding", "prompt_chars", 50));

        if (f.has("study", "seeds")) {
            c.seeds.clear();
            for (long s : f.get_int_list("study", "seeds")) {
                if (s < 0) throw std::runtime_error("config: seeds must be non-negative");
                c.seeds.push_back(static_cast<std::uint64_t>(s));
            }
        }
        c.n_samples = f.get_int("study", "n_samples", 2000);
        if (f.has("study", "setups")) c.setups = f.get_string_list("study", "setups");
        c.split_seed = static_cast<std::uint64_t>(f.get_int("study", "split_seed", 13));
        c.plant_seed = static_cast<std::uint64_t>(f.get_int("study", "plant_seed", 97));
        c.equal_band_pct = f.get_double("study", "equal_band", 5.0);
        c.workers = static_cast<int>(f.get_int("study", "workers", 1));

        c.validate();
        return c;
    }

    void validate() const {
        ModelConfig m = model;
        m.vocab_size = tok::kMinVocab;
        m.validate();
        pretrain_train.validate();
        for (const auto& [name, t] : finetune_train) t.validate();
        dp.validate();
        if (decoding.target_len + 1 > model.max_seq)
            throw std::runtime_error("config: max_seq must be at least target_len + 1");
        if (tokenizer_vocab < tok::kMinVocab)
            throw std::runtime_error("config: tokenizer vocab_size below the minimum");
        if (seeds.empty()) throw std::runtime_error("config: seeds list is empty");
        std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
        if (uniq.size() != seeds.size()) throw std::runtime_error("config: duplicate seeds");
        if (n_samples < static_cast<long>(seeds.size()))
            throw std::runtime_error("config: n_samples must cover every seed");
        if (setups.empty()) throw std::runtime_error("config: setups list is empty");
        for (const auto& s : setups)
            if (s != "base" && s != "full" && s != "partial" && s != "dp")
                throw std::runtime_error("config: unknown setup " + s);
        if (prompt_chars < 1) throw std::runtime_error("config: prompt_chars must be positive");
        if (workers < 1) throw std::runtime_error("config: workers must be positive");
        if (!(equal_band_pct >= 0.0))
            throw std::runtime_error("config: equal_band must be non-negative");
    }

    // samples generated for one seed (the per-(setup,kind) budget split evenly,
    // remainder on the earliest seeds)
    long samples_for_seed(std::size_t seed_index) const {
        long per = n_samples / static_cast<long>(seeds.size());
        long rem = n_samples % static_cast<long>(seeds.size());
        return per + (static_cast<long>(seed_index) < rem ? 1 : 0);
    }
};

// ---------------------------------------------------------------------------
// Run ledger

inline std::uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("file_digest: cannot open " + path);
    std::uint64_t h = kFnvOffset;
    char buf[1 << 16];
    for (;;) {
        in.read(buf, sizeof buf);
        std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= kFnvPrime;
        }
        if (n < static_cast<std::streamsize>(sizeof buf)) break;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// digest of the resolved settings a stage depends on
inline std::uint64_t settings_digest(const std::vector<std::string>& parts) {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : parts) {
        h = fnv1a64(p, h);
        h = fnv1a64("\x1f", h);
    }
    return h;
}

// Per-stage record of what was run: settings digest, input file digests and
// expected outputs. A stage is skipped when nothing it depends on changed and
// its outputs still exist.
class RunLedger {
  public:
    explicit RunLedger(std::string path) : path_(std::move(path)) {
        std::ifstream in(path_, std::ios::binary);
        if (!in) return;
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception&) {
            return;  // unreadable ledger: treat every stage as stale
        }
        if (!j.contains("stages")) return;
        for (const auto& [stage, e] : j["stages"].items()) {
            Entry entry;
            entry.settings = e.value("settings", "");
            if (e.contains("inputs"))
                for (const auto& [file, digest] : e["inputs"].items())
                    entry.inputs[file] = digest.get<std::string>();
            if (e.contains("outputs"))
                for (const auto& o : e["outputs"]) entry.outputs.push_back(o.get<std::string>());
            entry.wall_ms = e.value("wall_ms", 0.0);
            entries_[stage] = std::move(entry);
        }
    }

    bool up_to_date(const std::string& stage, std::uint64_t settings,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) const {
        auto it = entries_.find(stage);
        if (it == entries_.end()) return false;
        const Entry& e = it->second;
        if (e.settings != hex64(settings)) return false;
        if (e.inputs.size() != inputs.size()) return false;
        for (const auto& in : inputs) {
            auto f = e.inputs.find(in);
            if (f == e.inputs.end()) return false;
            if (!std::filesystem::exists(in)) return false;
            if (f->second != hex64(file_digest(in))) return false;
        }
        for (const auto& out : outputs)
            if (!std::filesystem::exists(out)) return false;
        return true;
    }

    void record(const std::string& stage, std::uint64_t settings,
                const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                double wall_ms) {
        Entry e;
        e.settings = hex64(settings);
        for (const auto& in : inputs) e.inputs[in] = hex64(file_digest(in));
        e.outputs = outputs;
        e.wall_ms = wall_ms;
        entries_[stage] = std::move(e);
        save();
    }

    std::string settings_of(const std::string& stage) const {
        auto it = entries_.find(stage);
        return it == entries_.end() ? "" : it->second.settings;
    }

    void save() const {
        nlohmann::json stages = nlohmann::json::object();
        for (const auto& [stage, e] : entries_) {
            nlohmann::json inputs = nlohmann::json::object();
            for (const auto& [file, digest] : e.inputs) inputs[file] = digest;
            stages[stage] = {{"settings", e.settings},
                             {"inputs", std::move(inputs)},
                             {"outputs", e.outputs},
                             {"wall_ms", e.wall_ms}};
        }
        nlohmann::json j = {{"stages", std::move(stages)}};
        std::ofstream out(path_, std::ios::binary);
        if (!out) throw std::runtime_error("RunLedger: cannot write " + path_);
        out << j.dump(2) << "\n";
    }

  private:
    struct Entry {
        std::string settings;
        std::map<std::string, std::string> inputs;  // file -> digest
        std::vector<std::string> outputs;
        double wall_ms = 0.0;
    };

    std::string path_;
    std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Cross-setup comparison

// canary outcome for one setup: k -> (extracted surfaces, planted surfaces)
using CanaryRates = std::map<int, RateCell>;

// Side-by-side extraction ratios with deltas against the first report's
// setup ("base" in the shipped study), plus pass/fail flags for the
// directional claims under audit. Reports must agree on entity-set sizes.
inline nlohmann::json compare_report(const std::vector<AuditReport>& reports,
                                     const std::map<std::string, CanaryRates>& canaries,
                                     double equal_band_pct) {
    if (reports.size() < 2)
        throw std::runtime_error("compare_report: needs at least two reports");
    for (const auto& r : reports) {
        for (const auto& [set_name, by_type] : reports.front().cells) {
            auto it = r.cells.find(set_name);
            if (it == r.cells.end())
                throw std::runtime_error("compare_report: report for " + r.setup +
                                         " lacks entity set " + set_name);
            for (const auto& [type, cell] : by_type) {
                auto jt = it->second.find(type);
                if (jt == it->second.end() || jt->second.size != cell.size)
                    throw std::runtime_error("compare_report: entity sets differ between reports (" +
                                             set_name + "/" + type + ")");
            }
        }
    }

    auto find_pct = [&](const std::string& setup, const std::string& kind,
                        const std::string& set_name,
                        const std::string& type) -> std::optional<double> {
        for (const auto& r : reports) {
            if (r.setup != setup || r.prompt_kind != kind) continue;
            auto s = r.cells.find(set_name);
            if (s == r.cells.end()) return std::nullopt;
            auto t = s->second.find(type);
            if (t == s->second.end()) return std::nullopt;
            return t->second.pct();
        }
        return std::nullopt;
    };

    std::set<std::string> setups, kinds;
    for (const auto& r : reports) {
        setups.insert(r.setup);
        kinds.insert(r.prompt_kind);
    }

    nlohmann::json cells = nlohmann::json::object();
    nlohmann::json deltas = nlohmann::json::object();
    const bool have_base = setups.count("base") > 0;
    for (const auto& r : reports) {
        for (const auto& [set_name, by_type] : r.cells) {
            for (const auto& [type, cell] : by_type) {
                nlohmann::json& slot = cells[r.prompt_kind][set_name][type][r.setup];
                slot = {{"extracted", cell.extracted}, {"size", cell.size}, {"pct", cell.pct()}};
                if (have_base && r.setup != "base") {
                    auto base = find_pct("base", r.prompt_kind, set_name, type);
                    if (base)
                        deltas[r.prompt_kind][set_name][type][r.setup] = cell.pct() - *base;
                }
            }
        }
    }

    // claims are judged on the private set's TOTAL row
    nlohmann::json claims = nlohmann::json::object();
    {
        nlohmann::json per_setup = nlohmann::json::object();
        for (const auto& s : setups) {
            auto naive = find_pct(s, "naive", "private", "TOTAL");
            auto informed = find_pct(s, "informed", "private", "TOTAL");
            if (naive && informed) per_setup[s] = *naive >= *informed;
        }
        claims["naive_ge_informed"] = std::move(per_setup);
    }
    {
        nlohmann::json per_kind = nlohmann::json::object();
        for (const auto& kind : kinds) {
            auto dp = find_pct("dp", kind, "private", "TOTAL");
            if (!dp) continue;
            bool ok = true;
            for (const char* other : {"full", "partial"}) {
                auto v = find_pct(other, kind, "private", "TOTAL");
                if (v && *dp > *v) ok = false;
            }
            per_kind[kind] = ok;
        }
        claims["dp_le_nondp"] = std::move(per_kind);
    }
    if (have_base) {
        nlohmann::json per = nlohmann::json::object();
        for (const auto& kind : kinds) {
            auto base = find_pct("base", kind, "private", "TOTAL");
            if (!base) continue;
            for (const auto& s : setups) {
                if (s == "base" || s == "dp") continue;  // dp is expected to fall below
                auto v = find_pct(s, kind, "private", "TOTAL");
                if (v) per[kind][s] = std::abs(*v - *base) <= equal_band_pct;
            }
        }
        claims["base_within_band"] = std::move(per);
        claims["equal_band_pct"] = equal_band_pct;
    }

    // canary rates: per setup and planting count k, pooled over prompt kinds
    nlohmann::json canary_json = nlohmann::json::object();
    for (const auto& [setup, rates] : canaries) {
        nlohmann::json by_k = nlohmann::json::object();
        for (const auto& [k, cell] : rates) {
            by_k["k" + std::to_string(k)] = {
                {"extracted", cell.extracted}, {"size", cell.size}, {"pct", cell.pct()}};
        }
        canary_json[setup] = std::move(by_k);
    }
    nlohmann::json canary_claims = nlohmann::json::object();
    if (canaries.count("full")) {
        const auto& full = canaries.at("full");
        bool nondecreasing = true;
        double prev = -1.0;
        for (const auto& [k, cell] : full) {  // map: ascending k
            double r = cell.ratio();
            if (r < prev) nondecreasing = false;
            prev = r;
        }
        canary_claims["full_nondecreasing_in_k"] = nondecreasing;
        if (canaries.count("dp")) {
            long full_hits = 0, full_n = 0, dp_hits = 0, dp_n = 0;
            for (const auto& [k, cell] : full) {
                full_hits += cell.extracted;
                full_n += cell.size;
            }
            for (const auto& [k, cell] : canaries.at("dp")) {
                dp_hits += cell.extracted;
                dp_n += cell.size;
            }
            double full_rate = full_n ? static_cast<double>(full_hits) / full_n : 0.0;
            double dp_rate = dp_n ? static_cast<double>(dp_hits) / dp_n : 0.0;
            canary_claims["dp_le_full"] = dp_rate <= full_rate;
        }
    }

    nlohmann::json out;
    out["cells"] = std::move(cells);
    out["deltas"] = std::move(deltas);
    out["claims"] = std::move(claims);
    out["canaries"] = std::move(canary_json);
    out["canary_claims"] = std::move(canary_claims);
    out["n_samples"] = reports.front().n_samples;
    return out;
}

// one extraction table per (prompt kind, entity set): entity-type rows,
// per-setup count/size/percentage columns
inline std::string extraction_csv(const std::vector<AuditReport>& reports,
                                  const std::string& kind, const std::string& set_name,
                                  const std::vector<std::string>& setups) {
    std::ostringstream out;
    out << "type";
    for (const auto& s : setups) out << "," << s << "_extracted," << s << "_size," << s << "_pct";
    out << "\n";
    std::vector<std::string> rows = selected_entity_types();
    rows.push_back("TOTAL");
    for (const auto& type : rows) {
        out << type;
        for (const auto& s : setups) {
            RateCell cell;
            for (const auto& r : reports) {
                if (r.setup != s || r.prompt_kind != kind) continue;
                auto st = r.cells.find(set_name);
                if (st == r.cells.end()) break;
                auto tt = st->second.find(type);
                if (tt != st->second.end()) cell = tt->second;
                break;
            }
            out << "," << cell.extracted << "," << cell.size << "," << pct_str(cell.pct());
        }
        out << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
  public:
    explicit Pipeline(ExperimentConfig cfg)
        : cfg_(std::move(cfg)), ledger_(make_ledger(cfg_.workdir)) {}

    const ExperimentConfig& config() const { return cfg_; }

    // --- artifact paths ------------------------------------------------
    std::string tokenizer_path() const { return cfg_.workdir + "/tokenizer.json"; }
    std::string planted_path() const { return cfg_.workdir + "/planted.jsonl"; }
    std::string plant_record_path() const { return cfg_.workdir + "/plant_record.json"; }
    std::string pretrain_ckpt_path(std::uint64_t seed) const {
        return cfg_.workdir + "/ckpt/pre_s" + std::to_string(seed) + ".bin";
    }
    std::string finetune_ckpt_path(const std::string& setup, std::uint64_t seed) const {
        return cfg_.workdir + "/ckpt/ft_" + setup + "_s" + std::to_string(seed) + ".bin";
    }
    std::string samples_path(const std::string& setup, PromptKind kind,
                             std::uint64_t seed) const {
        return cfg_.workdir + "/samples/" + setup + "_" + prompt_kind_name(kind) + "_s" +
               std::to_string(seed) + ".jsonl";
    }
    std::string audit_report_path(const std::string& setup, PromptKind kind) const {
        return cfg_.workdir + "/audit/" + setup + "_" + prompt_kind_name(kind) + ".report.json";
    }
    std::string match_log_path(const std::string& setup, PromptKind kind) const {
        return cfg_.workdir + "/audit/" + setup + "_" + prompt_kind_name(kind) + ".matches.jsonl";
    }
    std::string comparison_path() const { return cfg_.workdir + "/report/comparison.json"; }
    std::string accuracy_csv_path() const { return cfg_.workdir + "/report/accuracy.csv"; }
    std::string entity_sets_path() const { return cfg_.workdir + "/report/entity_sets.json"; }
    std::string extraction_csv_path(PromptKind kind, SetKind set) const {
        return cfg_.workdir + "/report/extraction_" + std::string(prompt_kind_name(kind)) + "_" +
               set_kind_name(set) + ".csv";
    }

    // --- stages ---------------------------------------------------------
    // each returns true if work ran, false on a ledger hit

    bool stage_synth() {
        if (!cfg_.synth_enabled) return false;
        const std::string dir = cfg_.workdir + "/data";
        const auto& sp = cfg_.synth;
        return run_stage(
            "synth",
            settings_digest({std::to_string(sp.finetune_docs), std::to_string(sp.pretrain_docs),
                             std::to_string(sp.prompt_docs), std::to_string(sp.seed)}),
            {},
            {dir + "/finetune.jsonl", dir + "/pretrain.jsonl", dir + "/prompts.jsonl",
             dir + "/gazetteer.tsv", dir + "/canaries.json"},
            [&] { write_synthetic_inputs(dir, sp); });
    }

    bool stage_tokenizer() {
        return run_stage("tokenizer", settings_digest({std::to_string(cfg_.tokenizer_vocab)}),
                         {cfg_.pretrain_path}, {tokenizer_path()}, [&] {
                             TokenizerModel tok = train_tokenizer(pretrain_corpus(),
                                                                  cfg_.tokenizer_vocab);
                             save_tokenizer(tok, tokenizer_path());
                         });
    }

    bool stage_plant() {
        return run_stage(
            "plant",
            settings_digest({std::to_string(cfg_.split_seed), std::to_string(cfg_.plant_seed)}),
            {cfg_.finetune_path, cfg_.canaries_path}, {planted_path(), plant_record_path()}, [&] {
                Corpus raw = ingest_jsonl(cfg_.finetune_path, {}, cfg_.split_seed);
                CanaryPlan plan = load_canary_plan(cfg_.canaries_path);
                auto [planted, record] = plant_canaries(raw, plan, cfg_.plant_seed);
                save_corpus_jsonl(planted, planted_path());
                nlohmann::json rj = nlohmann::json::object();
                for (const auto& [surface, ids] : record.insertions) rj[surface] = ids;
                write_json(plant_record_path(), {{"insertions", std::move(rj)}});
            });
    }

    bool stage_pretrain(std::uint64_t seed) {
        TrainConfig t = cfg_.pretrain_train;
        t.seed = seed;
        t.workers = cfg_.workers;
        const std::string ckpt = pretrain_ckpt_path(seed);
        return run_stage(
            "pretrain.s" + std::to_string(seed),
            settings_digest({model_digest(), std::to_string(t.batch_size),
                             num_str(t.learning_rate), std::to_string(t.epochs),
                             std::to_string(cfg_.split_seed), std::to_string(seed)}),
            {cfg_.pretrain_path, tokenizer_path()},
            {ckpt, ckpt + ".json", ckpt + ".loss.csv"}, [&] {
                TrainRunResult r = pretrain_mlm(pretrain_corpus(), tokenizer(), cfg_.model, t);
                save_checkpoint(r.checkpoint, ckpt);
                write_json(ckpt + ".json", r.manifest);
                write_loss_csv(ckpt + ".loss.csv", r.loss_curve);
            });
    }

    bool stage_finetune(const std::string& setup, std::uint64_t seed) {
        if (setup == "base")
            throw std::runtime_error("stage_finetune: base setup is the pre-trained model");
        TrainConfig t = finetune_cfg(setup);
        t.seed = seed;
        t.workers = cfg_.workers;
        std::optional<DpConfig> dp;
        std::vector<std::string> settings = {std::to_string(t.batch_size),
                                             num_str(t.learning_rate), std::to_string(t.epochs),
                                             std::to_string(cfg_.split_seed),
                                             std::to_string(seed), setup};
        if (setup == "dp") {
            dp = cfg_.dp;
            settings.push_back(num_str(cfg_.dp.clip_norm));
            settings.push_back(num_str(cfg_.dp.noise_multiplier));
            settings.push_back(num_str(cfg_.dp.delta));
            settings.push_back(clip_mode_name(cfg_.dp.clip_mode));
        }
        const std::string ckpt = finetune_ckpt_path(setup, seed);
        std::vector<std::string> outputs = {ckpt, ckpt + ".json", ckpt + ".loss.csv"};
        if (setup == "dp") outputs.push_back(ckpt + ".accountant.csv");
        return run_stage(
            "finetune." + setup + ".s" + std::to_string(seed), settings_digest(settings),
            {pretrain_ckpt_path(seed), planted_path(), tokenizer_path()}, outputs, [&] {
                ModelCheckpoint base = checkpoint(pretrain_ckpt_path(seed));
                TrainRunResult r = finetune(base, planted_corpus(), tokenizer(), t, dp);
                r.manifest["accuracy"] =
                    evaluate_accuracy(r.checkpoint, planted_corpus(), tokenizer(), cfg_.workers);
                save_checkpoint(r.checkpoint, ckpt);
                write_json(ckpt + ".json", r.manifest);
                write_loss_csv(ckpt + ".loss.csv", r.loss_curve);
                if (setup == "dp") {
                    std::ofstream out(ckpt + ".accountant.csv", std::ios::binary);
                    if (!out)
                        throw std::runtime_error("stage_finetune: cannot write accountant csv");
                    for (const auto& line : r.accountant_log) out << line << "\n";
                }
            });
    }

    bool stage_generate(const std::string& setup, PromptKind kind, std::uint64_t seed) {
        const std::size_t seed_index = index_of_seed(seed);
        const long n = cfg_.samples_for_seed(seed_index);
        const std::string ckpt_path =
            setup == "base" ? pretrain_ckpt_path(seed) : finetune_ckpt_path(setup, seed);
        const std::string out_path = samples_path(setup, kind, seed);
        const DecodingConfig& d = cfg_.decoding;
        return run_stage(
            "generate." + setup + "." + prompt_kind_name(kind) + ".s" + std::to_string(seed),
            settings_digest({std::to_string(d.pool_size), num_str(d.nucleus_p),
                             num_str(d.temperature), std::to_string(d.no_repeat_ngram),
                             std::to_string(d.target_len), std::to_string(cfg_.prompt_chars),
                             std::to_string(n), std::to_string(cfg_.split_seed),
                             std::to_string(seed), setup, prompt_kind_name(kind)}),
            {ckpt_path, tokenizer_path(),
             kind == PromptKind::naive ? cfg_.prompts_path : planted_path()},
            {out_path}, [&] {
                PromptSource source;
                source.kind = kind;
                source.corpus =
                    kind == PromptKind::naive ? &prompts_corpus() : &planted_corpus();
                source.prompt_chars = cfg_.prompt_chars;
                std::uint64_t base_seed =
                    derive_key(seed, "gen", fnv1a64(setup), fnv1a64(prompt_kind_name(kind)));
                auto samples = generate_corpus(checkpoint(ckpt_path), tokenizer(), source, d,
                                               static_cast<int>(n), base_seed, setup,
                                               cfg_.workers);
                save_samples_jsonl(samples, out_path);
            });
    }

    bool stage_audit(const std::string& setup, PromptKind kind) {
        std::vector<std::string> inputs = {cfg_.gazetteer_path, planted_path(),
                                           cfg_.pretrain_path};
        for (std::uint64_t seed : cfg_.seeds) inputs.push_back(samples_path(setup, kind, seed));
        return run_stage(
            "audit." + setup + "." + prompt_kind_name(kind),
            settings_digest({std::to_string(cfg_.split_seed), seeds_digest(), setup,
                             prompt_kind_name(kind)}),
            inputs, {audit_report_path(setup, kind), match_log_path(setup, kind)}, [&] {
                std::vector<GeneratedSample> samples;
                for (std::uint64_t seed : cfg_.seeds) {
                    auto part = load_samples_jsonl(samples_path(setup, kind, seed));
                    samples.insert(samples.end(), std::make_move_iterator(part.begin()),
                                   std::make_move_iterator(part.end()));
                }
                const EntitySets& sets = entity_sets();
                std::map<SetKind, ScanResult> scans;
                for (SetKind which :
                     {SetKind::all, SetKind::private_set, SetKind::private_1eidetic}) {
                    MatchIndex index = build_index(sets, which);
                    scans.emplace(which, scan(index, sets, which, samples, cfg_.workers));
                }
                save_match_log(scans.at(SetKind::all), match_log_path(setup, kind));
                AuditReport report =
                    extraction_rates(sets, scans, setup, prompt_kind_name(kind),
                                     static_cast<long>(samples.size()));
                write_json(audit_report_path(setup, kind), report_to_json(report));
            });
    }

    bool stage_report() {
        std::vector<std::string> inputs = {cfg_.canaries_path, planted_path(),
                                           cfg_.gazetteer_path, cfg_.pretrain_path};
        for (const auto& setup : cfg_.setups) {
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed}) {
                inputs.push_back(audit_report_path(setup, kind));
                inputs.push_back(match_log_path(setup, kind));
            }
            if (setup != "base")
                for (std::uint64_t seed : cfg_.seeds)
                    inputs.push_back(finetune_ckpt_path(setup, seed) + ".json");
        }
        std::vector<std::string> outputs = {comparison_path(), accuracy_csv_path(),
                                            entity_sets_path()};
        for (PromptKind kind : {PromptKind::naive, PromptKind::informed})
            for (SetKind set : {SetKind::all, SetKind::private_set, SetKind::private_1eidetic})
                outputs.push_back(extraction_csv_path(kind, set));
        return run_stage("report",
                         settings_digest({num_str(cfg_.equal_band_pct), seeds_digest(),
                                          setups_digest(), std::to_string(cfg_.n_samples)}),
                         inputs, outputs, [&] { build_reports(); });
    }

    void run_all() {
        stage_synth();
        stage_tokenizer();
        stage_plant();
        for (std::uint64_t seed : cfg_.seeds) stage_pretrain(seed);
        for (const auto& setup : cfg_.setups) {
            if (setup == "base") continue;
            for (std::uint64_t seed : cfg_.seeds) stage_finetune(setup, seed);
        }
        for (const auto& setup : cfg_.setups)
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed})
                for (std::uint64_t seed : cfg_.seeds) stage_generate(setup, kind, seed);
        for (const auto& setup : cfg_.setups)
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed})
                stage_audit(setup, kind);
        stage_report();
    }

  private:
    static RunLedger make_ledger(const std::string& workdir) {
        std::filesystem::create_directories(workdir);
        return RunLedger(workdir + "/ledger.json");
    }

    template <typename Fn>
    bool run_stage(const std::string& stage, std::uint64_t settings,
                   const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                   Fn&& fn) {
        for (const auto& in : inputs)
            if (!std::filesystem::exists(in))
                throw std::runtime_error(stage + ": missing input " + in +
                                         " (run the producing stage first)");
        if (ledger_.up_to_date(stage, settings, inputs, outputs)) return false;
        for (const auto& out : outputs) {
            auto parent = std::filesystem::path(out).parent_path();
            if (!parent.empty()) std::filesystem::create_directories(parent);
        }
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        for (const auto& out : outputs)
            if (!std::filesystem::exists(out))
                throw std::runtime_error(stage + ": stage did not produce " + out);
        ledger_.record(stage, settings, inputs, outputs,
                       std::chrono::duration<double, std::milli>(t1 - t0).count());
        return true;
    }

    TrainConfig finetune_cfg(const std::string& setup) const {
        auto it = cfg_.finetune_train.find(setup);
        if (it == cfg_.finetune_train.end())
            throw std::runtime_error("no fine-tuning settings for setup " + setup);
        return it->second;
    }

    std::size_t index_of_seed(std::uint64_t seed) const {
        for (std::size_t i = 0; i < cfg_.seeds.size(); ++i)
            if (cfg_.seeds[i] == seed) return i;
        throw std::runtime_error("seed " + std::to_string(seed) + " is not in the configured list");
    }

    std::string model_digest() const {
        const ModelConfig& m = cfg_.model;
        return std::to_string(m.n_layers) + "/" + std::to_string(m.n_heads) + "/" +
               std::to_string(m.d_model) + "/" + std::to_string(m.d_ff) + "/" +
               std::to_string(m.max_seq) + "/" + num_str(m.dropout_attn) + "/" +
               num_str(m.dropout_classifier) + "/" + std::to_string(cfg_.tokenizer_vocab);
    }

    std::string seeds_digest() const {
        std::string s;
        for (std::uint64_t seed : cfg_.seeds) s += std::to_string(seed) + ",";
        return s;
    }

    std::string setups_digest() const {
        std::string s;
        for (const auto& setup : cfg_.setups) s += setup + ",";
        return s;
    }

    static void write_json(const std::string& path, const nlohmann::json& j) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << j.dump(2) << "\n";
    }

    static void write_loss_csv(const std::string& path, const std::vector<double>& curve) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << "step,loss\n";
        for (std::size_t i = 0; i < curve.size(); ++i)
            out << i << "," << num_str(curve[i]) << "\n";
    }

    // --- cached artifacts -----------------------------------------------

    const Corpus& pretrain_corpus() {
        if (!pretrain_corpus_)
            pretrain_corpus_ = ingest_jsonl(cfg_.pretrain_path, {}, cfg_.split_seed);
        return *pretrain_corpus_;
    }

    const Corpus& planted_corpus() {
        if (!planted_corpus_) planted_corpus_ = ingest_jsonl(planted_path(), {}, cfg_.split_seed);
        return *planted_corpus_;
    }

    const Corpus& prompts_corpus() {
        if (!prompts_corpus_) prompts_corpus_ = ingest_jsonl(cfg_.prompts_path, {}, cfg_.split_seed);
        return *prompts_corpus_;
    }

    const TokenizerModel& tokenizer() {
        if (!tokenizer_) tokenizer_ = load_tokenizer(tokenizer_path());
        return *tokenizer_;
    }

    const EntitySets& entity_sets() {
        if (!entity_sets_)
            entity_sets_ = load_gazetteer(cfg_.gazetteer_path, planted_corpus(), pretrain_corpus());
        return *entity_sets_;
    }

    const ModelCheckpoint& checkpoint(const std::string& path) {
        auto it = ckpt_cache_.find(path);
        if (it == ckpt_cache_.end()) {
            if (ckpt_cache_.size() >= 4) ckpt_cache_.clear();  // bound memory across a study
            it = ckpt_cache_.emplace(path, load_checkpoint(path)).first;
        }
        return it->second;
    }

    // --- report stage ----------------------------------------------------

    void build_reports() {
        std::vector<AuditReport> reports;
        for (const auto& setup : cfg_.setups)
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed})
                reports.push_back(report_from_json(read_json(audit_report_path(setup, kind))));

        // canary outcomes: surfaces matched anywhere in a setup's samples,
        // pooled over prompt kinds, grouped by planted k
        CanaryPlan plan = load_canary_plan(cfg_.canaries_path);
        std::map<std::string, CanaryRates> canary_rates;
        for (const auto& setup : cfg_.setups) {
            std::set<std::string> matched;
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed}) {
                std::ifstream in(match_log_path(setup, kind), std::ios::binary);
                if (!in)
                    throw std::runtime_error("build_reports: cannot open match log for " + setup);
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty()) continue;
                    matched.insert(nlohmann::json::parse(line).at("surface").get<std::string>());
                }
            }
            CanaryRates rates;
            for (const auto& e : plan.entries) {
                RateCell& cell = rates[e.k];
                ++cell.size;
                if (matched.count(e.surface)) ++cell.extracted;
            }
            canary_rates.emplace(setup, std::move(rates));
        }

        nlohmann::json comparison = compare_report(reports, canary_rates, cfg_.equal_band_pct);
        comparison["seeds"] = cfg_.seeds;
        comparison["setups"] = cfg_.setups;
        nlohmann::json digests = nlohmann::json::object();
        for (const auto& setup : cfg_.setups)
            for (PromptKind kind : {PromptKind::naive, PromptKind::informed}) {
                std::string stage = "audit." + setup + "." + prompt_kind_name(kind);
                digests[stage] = ledger_.settings_of(stage);
            }
        comparison["audit_settings"] = std::move(digests);
        write_json(comparison_path(), comparison);

        for (PromptKind kind : {PromptKind::naive, PromptKind::informed})
            for (SetKind set : {SetKind::all, SetKind::private_set, SetKind::private_1eidetic}) {
                std::ofstream out(extraction_csv_path(kind, set), std::ios::binary);
                if (!out) throw std::runtime_error("build_reports: cannot write extraction csv");
                out << extraction_csv(reports, prompt_kind_name(kind), set_kind_name(set),
                                      cfg_.setups);
            }

        write_accuracy_csv();
        write_entity_sets_json();
    }

    void write_accuracy_csv() {
        std::ofstream out(accuracy_csv_path(), std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + accuracy_csv_path());
        out << "setup,seed,accuracy\n";
        // chance-level reference: always predict the train split's majority class
        const Corpus& corpus = planted_corpus();
        std::map<std::string, long> train_counts;
        for (const auto& d : corpus.documents)
            if (corpus.split.at(d.id) == Split::train && d.label) ++train_counts[*d.label];
        std::string majority;
        long best = -1;
        for (const auto& [label, count] : train_counts)
            if (count > best) {
                best = count;
                majority = label;
            }
        long test_hits = 0, test_n = 0;
        for (const auto& d : corpus.documents) {
            if (corpus.split.at(d.id) != Split::test || !d.label) continue;
            ++test_n;
            if (*d.label == majority) ++test_hits;
        }
        double baseline = test_n ? static_cast<double>(test_hits) / test_n : 0.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", baseline);
        out << "majority_baseline,-," << buf << "\n";
        for (const auto& setup : cfg_.setups) {
            if (setup == "base") continue;
            double sum = 0.0;
            for (std::uint64_t seed : cfg_.seeds) {
                nlohmann::json m = read_json(finetune_ckpt_path(setup, seed) + ".json");
                double acc = m.at("accuracy").get<double>();
                sum += acc;
                std::snprintf(buf, sizeof buf, "%.4f", acc);
                out << setup << "," << seed << "," << buf << "\n";
            }
            std::snprintf(buf, sizeof buf, "%.4f", sum / static_cast<double>(cfg_.seeds.size()));
            out << setup << ",mean," << buf << "\n";
        }
    }

    void write_entity_sets_json() {
        const EntitySets& sets = entity_sets();
        nlohmann::json j = nlohmann::json::object();
        for (SetKind which : {SetKind::all, SetKind::private_set, SetKind::private_1eidetic}) {
            std::map<std::string, long> by_type;
            long total = 0;
            for (const auto* r : sets.select(which)) {
                ++by_type[r->type];
                ++total;
            }
            nlohmann::json types = nlohmann::json::object();
            for (const auto& [type, count] : by_type) types[type] = count;
            types["TOTAL"] = total;
            j[set_kind_name(which)] = std::move(types);
        }
        write_json(entity_sets_path(), j);
    }

    static nlohmann::json read_json(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read " + path);
        nlohmann::json j;
        in >> j;
        return j;
    }

    ExperimentConfig cfg_;
    RunLedger ledger_;

    std::optional<Corpus> pretrain_corpus_, planted_corpus_, prompts_corpus_;
    std::optional<TokenizerModel> tokenizer_;
    std::optional<EntitySets> entity_sets_;
    std::map<std::string, ModelCheckpoint> ckpt_cache_;
};

}  // namespace entaudit
