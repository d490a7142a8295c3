#pragma once

// Synthetic study inputs: a labeled fine-tuning corpus (4 keyword-themed
// classes), a disjoint pre-training corpus, an unrelated prompt corpus, a
// gazetteer covering the seven audited entity types, and a canary plan.
// Everything is deterministic in the seed. Entity pools are split into
// "known" surfaces (also mentioned in pre-training text) and "fresh" ones
// (fine-tuning only), so the Private set is a strict subset of All; "rare"
// surfaces are injected into exactly one document each to populate the
// 1-eidetic set.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "entaudit/corpus.hpp"
#include "entaudit/rng.hpp"

namespace entaudit {

struct SynthSpec {
    int finetune_docs = 5000;
    int pretrain_docs = 1200;
    int prompt_docs = 300;
    std::uint64_t seed = 7;
};

namespace synth {

inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> v = {"finance", "shipping", "medical", "sports"};
    return v;
}

inline const std::vector<std::vector<std::string>>& class_keywords() {
    static const std::vector<std::vector<std::string>> v = {
        {"invoice", "ledger", "budget", "audit", "payroll", "refund", "taxes", "loan"},
        {"cargo", "vessel", "harbor", "freight", "dock", "manifest", "container", "anchor"},
        {"clinic", "patient", "dosage", "ward", "symptom", "nurse", "therapy", "scan"},
        {"stadium", "match", "coach", "score", "league", "referee", "trophy", "season"}};
    return v;
}

inline const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v = {"reviewed", "filed",  "noted",  "approved",
                                               "moved",    "checked", "sent",   "logged",
                                               "updated",  "tracked", "signed", "closed"};
    return v;
}

inline const std::vector<std::string>& nouns() {
    static const std::vector<std::string> v = {"report",  "meeting", "schedule", "update",
                                               "notice",  "record",  "summary",  "plan",
                                               "request", "receipt", "memo",     "list"};
    return v;
}

inline const std::vector<std::string>& time_words() {
    static const std::vector<std::string> v = {"yesterday", "today",  "on monday", "on friday",
                                               "recently",  "twice",  "last week", "this week"};
    return v;
}

// persons: first ten are mentioned in pre-training text too
inline const std::vector<std::string>& persons_known() {
    static const std::vector<std::string> v = {
        "marla vintner", "dovin okafor",  "kesra hollin",  "tobin marsh",   "elda prine",
        "rufo calder",   "nyla sorrel",   "bram hutchin",  "ivet landor",   "oskar fenwick"};
    return v;
}

inline const std::vector<std::string>& persons_fresh() {
    static const std::vector<std::string> v = {
        "petra quillon", "hanso dreyfus", "milla corvin",  "jorun ashby",   "selda norwick",
        "arvid plummer", "tessa goldrin", "colm ravenel",  "inga thornbury", "dario velmont"};
    return v;
}

inline const std::vector<std::string>& persons_rare() {
    static const std::vector<std::string> v = {
        "wilmot harkness", "odessa finch",  "lazlo bremmer", "minerva coyle", "gideon saltus",
        "pernilla vask",   "eamon dunmore", "sable wrenfield", "casimir holt", "ottilie marchbank"};
    return v;
}

inline const std::vector<std::string>& orgs_known() {
    static const std::vector<std::string> v = {"veltron systems", "qorvex holdings",
                                               "bramble logistics", "nordwin supply",
                                               "calyx partners"};
    return v;
}

inline const std::vector<std::string>& orgs_fresh() {
    static const std::vector<std::string> v = {"tindral works", "moswell group",
                                               "perrin exchange", "aldefair council",
                                               "sorvana trading"};
    return v;
}

inline const std::vector<std::string>& gpes_known() {
    static const std::vector<std::string> v = {"bryndale", "vostermouth", "kelding"};
    return v;
}

inline const std::vector<std::string>& gpes_fresh() {
    static const std::vector<std::string> v = {"ostrevan", "quillmere", "darrowfield"};
    return v;
}

inline const std::vector<std::string>& locs() {
    static const std::vector<std::string> v = {"ketter valley", "mor ridge", "haslow plain",
                                               "virel coast"};
    return v;
}

inline const std::vector<std::string>& facs() {
    static const std::vector<std::string> v = {"harrow mill", "kellan bridge", "vost terminal",
                                               "ashgate depot"};
    return v;
}

inline const std::vector<std::string>& moneys() {
    static const std::vector<std::string> v = {"4500 dollars", "120 dollars", "98 dollars",
                                               "67000 dollars"};
    return v;
}

inline const std::vector<std::string>& cardinals() {
    static const std::vector<std::string> v = {"forty seven", "three hundred", "eighty eight",
                                               "nineteen"};
    return v;
}

// invented two-word surfaces, absent from every text pool above
inline const std::vector<std::string>& canary_surfaces() {
    static const std::vector<std::string> v = {
        // planted once each
        "quolvac zendrit", "prubek xaldrin", "fyxol grenvak", "zorvelt prandik", "vexnor culdrim",
        // planted ten times each
        "drazek voltmir", "kyrven plasnor", "ulbrex fandrik", "smyrle qovatch", "trendak wilvorn",
        // planted one hundred times each
        "blosk verandil", "crellum zapheer", "gorvan mystrel", "harnex doveril", "jelvak runmore"};
    return v;
}

inline const std::string& pick(const std::vector<std::string>& pool, StreamRng& rng) {
    return pool[rng.next_below(pool.size())];
}

}  // namespace synth

namespace detail {

inline std::string synth_sentence(int cls, StreamRng& rng, bool with_entities) {
    using namespace synth;
    const auto& kw = class_keywords()[static_cast<std::size_t>(cls)];
    auto person = [&]() -> std::string {
        if (!with_entities) return "the clerk";
        return rng.next_uniform() < 0.6 ? pick(persons_known(), rng) : pick(persons_fresh(), rng);
    };
    auto org = [&]() -> std::string {
        if (!with_entities) return "the office";
        return rng.next_uniform() < 0.5 ? pick(orgs_known(), rng) : pick(orgs_fresh(), rng);
    };
    auto gpe = [&]() -> std::string {
        if (!with_entities) return "town";
        return rng.next_uniform() < 0.5 ? pick(gpes_known(), rng) : pick(gpes_fresh(), rng);
    };
    switch (rng.next_below(8)) {
        case 0:
            return person() + " " + pick(verbs(), rng) + " the " + pick(kw, rng) + " " +
                   pick(nouns(), rng) + " for " + org();
        case 1:
            return "the " + pick(kw, rng) + " " + pick(nouns(), rng) + " from " + gpe() +
                   " arrived " + pick(time_words(), rng);
        case 2:
            return person() + " and " + person() + " discussed the " + pick(kw, rng) + " " +
                   pick(nouns(), rng);
        case 3:
            return org() + " confirmed the " + pick(kw, rng) + " " + pick(nouns(), rng) +
                   (with_entities ? " near " + pick(locs(), rng) : " near the river");
        case 4:
            return "the " + pick(nouns(), rng) + " listed " +
                   (with_entities ? pick(moneys(), rng) : "a sum") + " for the " + pick(kw, rng);
        case 5:
            return person() + " counted " +
                   (with_entities ? pick(cardinals(), rng) : "several") + " items at " +
                   (with_entities ? pick(facs(), rng) : "the site");
        case 6:
            return person() + " " + pick(verbs(), rng) + " the " + pick(kw, rng) + " at " + gpe() +
                   " " + pick(time_words(), rng);
        default:
            return "the " + pick(kw, rng) + " " + pick(nouns(), rng) + " was " +
                   pick(verbs(), rng) + " " + pick(time_words(), rng);
    }
}

}  // namespace detail

// Writes finetune.jsonl, pretrain.jsonl, prompts.jsonl, gazetteer.tsv and
// canaries.json into dir.
inline void write_synthetic_inputs(const std::string& dir, const SynthSpec& spec) {
    namespace fs = std::filesystem;
    using namespace synth;
    if (spec.finetune_docs < 100 || spec.pretrain_docs < 10 || spec.prompt_docs < 10)
        throw std::runtime_error("write_synthetic_inputs: corpus sizes too small");
    fs::create_directories(dir);

    // fine-tuning corpus: balanced classes, entity-rich
    {
        std::ofstream out(fs::path(dir) / "finetune.jsonl", std::ios::binary);
        if (!out) throw std::runtime_error("write_synthetic_inputs: cannot write finetune.jsonl");
        // each rare surface goes into exactly one document
        std::vector<std::string> rare_slot(static_cast<std::size_t>(spec.finetune_docs));
        StreamRng place(derive_key(spec.seed, "rareplace"));
        for (const auto& rare : persons_rare()) {
            std::size_t doc;
            do {
                doc = place.next_below(static_cast<std::uint64_t>(spec.finetune_docs));
            } while (!rare_slot[doc].empty());
            rare_slot[doc] = rare;
        }
        for (int i = 0; i < spec.finetune_docs; ++i) {
            int cls = i % 4;
            StreamRng rng(derive_key(spec.seed, "ft", static_cast<std::uint64_t>(i)));
            int n_sent = 3 + static_cast<int>(rng.next_below(3));
            std::string text;
            for (int s = 0; s < n_sent; ++s) {
                if (s) text += ". ";
                text += detail::synth_sentence(cls, rng, true);
            }
            if (!rare_slot[static_cast<std::size_t>(i)].empty())
                text += ". " + rare_slot[static_cast<std::size_t>(i)] + " attended the review";
            text += ".";
            nlohmann::json obj = {{"id", "ft" + std::to_string(i)},
                                  {"text", text},
                                  {"label", class_names()[static_cast<std::size_t>(cls)]}};
            out << obj.dump() << "\n";
        }
    }

    // pre-training corpus: same general language, only the "known" entities
    {
        std::ofstream out(fs::path(dir) / "pretrain.jsonl", std::ios::binary);
        if (!out) throw std::runtime_error("write_synthetic_inputs: cannot write pretrain.jsonl");
        for (int i = 0; i < spec.pretrain_docs; ++i) {
            StreamRng rng(derive_key(spec.seed, "pt", static_cast<std::uint64_t>(i)));
            int cls = static_cast<int>(rng.next_below(4));
            int n_sent = 3 + static_cast<int>(rng.next_below(4));
            std::string text;
            for (int s = 0; s < n_sent; ++s) {
                if (s) text += ". ";
                // entity slots restricted to the known pools
                StreamRng sub(derive_key(spec.seed, "ptsent", static_cast<std::uint64_t>(i) * 64 +
                                                                  static_cast<std::uint64_t>(s)));
                switch (sub.next_below(4)) {
                    case 0:
                        text += pick(persons_known(), sub) + " " + pick(verbs(), sub) + " the " +
                                pick(class_keywords()[static_cast<std::size_t>(cls)], sub) + " " +
                                pick(nouns(), sub);
                        break;
                    case 1:
                        text += pick(orgs_known(), sub) + " " + pick(verbs(), sub) + " a " +
                                pick(nouns(), sub) + " " + pick(time_words(), sub);
                        break;
                    case 2:
                        text += "the " + pick(nouns(), sub) + " from " + pick(gpes_known(), sub) +
                                " was " + pick(verbs(), sub);
                        break;
                    default:
                        text += "the " + pick(class_keywords()[static_cast<std::size_t>(cls)], sub) +
                                " " + pick(nouns(), sub) + " was " + pick(verbs(), sub) + " " +
                                pick(time_words(), sub);
                        break;
                }
            }
            text += ".";
            nlohmann::json obj = {{"id", "pt" + std::to_string(i)}, {"text", text}};
            out << obj.dump() << "\n";
        }
    }

    // naive prompt corpus: generic text, no entities at all
    {
        std::ofstream out(fs::path(dir) / "prompts.jsonl", std::ios::binary);
        if (!out) throw std::runtime_error("write_synthetic_inputs: cannot write prompts.jsonl");
        for (int i = 0; i < spec.prompt_docs; ++i) {
            StreamRng rng(derive_key(spec.seed, "np", static_cast<std::uint64_t>(i)));
            int cls = static_cast<int>(rng.next_below(4));
            int n_sent = 4 + static_cast<int>(rng.next_below(3));
            std::string text;
            for (int s = 0; s < n_sent; ++s) {
                if (s) text += ". ";
                text += detail::synth_sentence(cls, rng, false);
            }
            text += ".";
            nlohmann::json obj = {{"id", "np" + std::to_string(i)}, {"text", text}};
            out << obj.dump() << "\n";
        }
    }

    // gazetteer over every pool surface plus the canaries
    {
        std::ofstream out(fs::path(dir) / "gazetteer.tsv", std::ios::binary);
        if (!out) throw std::runtime_error("write_synthetic_inputs: cannot write gazetteer.tsv");
        auto emit = [&](const std::vector<std::string>& pool, const char* type) {
            for (const auto& s : pool) out << s << "\t" << type << "\n";
        };
        emit(persons_known(), "PERSON");
        emit(persons_fresh(), "PERSON");
        emit(persons_rare(), "PERSON");
        emit(canary_surfaces(), "PERSON");
        emit(orgs_known(), "ORG");
        emit(orgs_fresh(), "ORG");
        emit(gpes_known(), "GPE");
        emit(gpes_fresh(), "GPE");
        emit(locs(), "LOC");
        emit(facs(), "FAC");
        emit(moneys(), "MONEY");
        emit(cardinals(), "CARDINAL");
    }

    // canary plan: five surfaces per k level
    {
        nlohmann::json plan;
        plan["template"] = "my account manager is {} today";
        nlohmann::json entries = nlohmann::json::array();
        const int ks[3] = {1, 10, 100};
        for (std::size_t i = 0; i < canary_surfaces().size(); ++i)
            entries.push_back({{"surface", canary_surfaces()[i]},
                               {"type", "PERSON"},
                               {"k", ks[i / 5]}});
        plan["entries"] = std::move(entries);
        std::ofstream out(fs::path(dir) / "canaries.json", std::ios::binary);
        if (!out) throw std::runtime_error("write_synthetic_inputs: cannot write canaries.json");
        out << plan.dump(2) << "\n";
    }
}

}  // namespace entaudit
