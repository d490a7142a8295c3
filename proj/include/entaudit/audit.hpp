#pragma once

// Named-entity memorization audit: gazetteer loading with k-eidetic counts,
// the All / Private / Private-1-eidetic set construction, a multi-pattern
// matcher with word-boundary semantics, and extraction-rate reports.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "entaudit/corpus.hpp"
#include "entaudit/generator.hpp"
#include "entaudit/parallel.hpp"
#include "entaudit/text.hpp"

namespace entaudit {

// the seven privacy-relevant types evaluated by default
inline const std::vector<std::string>& selected_entity_types() {
    static const std::vector<std::string> types = {"PERSON", "ORG",   "LOC",     "GPE",
                                                   "FAC",    "MONEY", "CARDINAL"};
    return types;
}

// full tag taxonomy accepted in gazetteers
inline const std::set<std::string>& known_entity_types() {
    static const std::set<std::string> types = {
        "PERSON", "NORP",  "FAC",      "ORG",  "GPE",     "LOC",      "PRODUCT",
        "EVENT",  "LAW",   "LANGUAGE", "DATE", "TIME",    "PERCENT",  "MONEY",
        "QUANTITY", "ORDINAL", "CARDINAL", "WORK_OF_ART"};
    return types;
}

struct EntityRecord {
    std::string surface;  // canonical (lowercased, whitespace-collapsed)
    std::string type;
    long k = 0;           // word-boundary occurrences in the fine-tuning train split
    bool in_pretraining = false;
};

enum class SetKind { all, private_set, private_1eidetic };

inline const char* set_kind_name(SetKind s) {
    switch (s) {
        case SetKind::all: return "all";
        case SetKind::private_set: return "private";
        case SetKind::private_1eidetic: return "private_1eidetic";
    }
    return "?";
}

struct EntitySets {
    std::vector<EntityRecord> all;  // k >= 1, surface length >= 4

    std::vector<const EntityRecord*> select(SetKind kind) const {
        std::vector<const EntityRecord*> out;
        for (const auto& r : all) {
            if (kind == SetKind::private_set && r.in_pretraining) continue;
            if (kind == SetKind::private_1eidetic && (r.in_pretraining || r.k != 1)) continue;
            out.push_back(&r);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Multi-pattern matcher: byte-level Aho-Corasick with merged output links.
// Word-boundary semantics are applied at match emission time.

struct Match {
    int pattern = 0;       // index into the index's pattern list
    std::size_t offset = 0;  // byte offset of the match start
};

class MatchIndex {
  public:
    explicit MatchIndex(const std::vector<std::string>& patterns) : patterns_(patterns) {
        if (patterns_.empty()) throw std::runtime_error("MatchIndex: empty pattern set");
        nodes_.push_back(Node{});
        for (std::size_t p = 0; p < patterns_.size(); ++p) {
            const std::string& pat = patterns_[p];
            if (pat.empty()) throw std::runtime_error("MatchIndex: empty pattern");
            int cur = 0;
            for (unsigned char c : pat) {
                // take the edge by value; push_back below may reallocate nodes_
                int slot = nodes_[static_cast<std::size_t>(cur)].next[c];
                if (slot == 0) {
                    slot = static_cast<int>(nodes_.size());
                    nodes_[static_cast<std::size_t>(cur)].next[c] = slot;
                    nodes_.push_back(Node{});
                }
                cur = slot;
            }
            nodes_[static_cast<std::size_t>(cur)].outputs.push_back(static_cast<int>(p));
        }
        build_links();
    }

    std::size_t pattern_count() const { return patterns_.size(); }
    const std::string& pattern(int p) const { return patterns_[static_cast<std::size_t>(p)]; }

    // all word-boundary matches in canonical text
    std::vector<Match> find(const std::string& text) const {
        std::vector<Match> out;
        int state = 0;
        for (std::size_t i = 0; i < text.size(); ++i) {
            unsigned char c = static_cast<unsigned char>(text[i]);
            state = nodes_[static_cast<std::size_t>(state)].go[c];
            for (int node = state; node != 0;
                 node = nodes_[static_cast<std::size_t>(node)].output_link) {
                for (int p : nodes_[static_cast<std::size_t>(node)].outputs) {
                    std::size_t len = patterns_[static_cast<std::size_t>(p)].size();
                    std::size_t start = i + 1 - len;
                    bool left_ok = start == 0 || !is_word_char(text[start - 1]);
                    bool right_ok = i + 1 == text.size() || !is_word_char(text[i + 1]);
                    if (left_ok && right_ok) out.push_back({p, start});
                }
            }
        }
        return out;
    }

  private:
    struct Node {
        std::array<int, 256> next{};  // trie edges; 0 = absent (root has no parent edge)
        std::array<int, 256> go{};    // full transition function
        int fail = 0;
        int output_link = 0;  // nearest ancestor-via-fail with outputs
        std::vector<int> outputs;
    };

    void build_links() {
        std::queue<int> bfs;
        Node& root = nodes_[0];
        for (int c = 0; c < 256; ++c) {
            int nxt = root.next[static_cast<std::size_t>(c)];
            root.go[static_cast<std::size_t>(c)] = nxt;
            if (nxt != 0) {
                nodes_[static_cast<std::size_t>(nxt)].fail = 0;
                bfs.push(nxt);
            }
        }
        while (!bfs.empty()) {
            int u = bfs.front();
            bfs.pop();
            Node& nu = nodes_[static_cast<std::size_t>(u)];
            const Node& nf = nodes_[static_cast<std::size_t>(nu.fail)];
            nu.output_link = nf.outputs.empty() ? nf.output_link : nu.fail;
            for (int c = 0; c < 256; ++c) {
                int nxt = nu.next[static_cast<std::size_t>(c)];
                if (nxt != 0) {
                    nu.go[static_cast<std::size_t>(c)] = nxt;
                    nodes_[static_cast<std::size_t>(nxt)].fail =
                        nf.go[static_cast<std::size_t>(c)];
                    bfs.push(nxt);
                } else {
                    nu.go[static_cast<std::size_t>(c)] = nf.go[static_cast<std::size_t>(c)];
                }
            }
        }
    }

    std::vector<std::string> patterns_;
    std::vector<Node> nodes_;
};

inline MatchIndex build_index(const EntitySets& sets, SetKind kind) {
    auto records = sets.select(kind);
    if (records.empty()) throw std::runtime_error("build_index: selected entity set is empty");
    std::vector<std::string> patterns;
    patterns.reserve(records.size());
    for (const auto* r : records) patterns.push_back(r->surface);
    return MatchIndex(patterns);
}

// ---------------------------------------------------------------------------
// Gazetteer

namespace detail {

inline long count_occurrences(const MatchIndex& index, const Corpus& corpus, Split which,
                              std::vector<long>& per_pattern) {
    long total = 0;
    for (const auto& doc : corpus.documents) {
        if (corpus.split.at(doc.id) != which) continue;
        for (const auto& m : index.find(canonical_text(doc.text))) {
            ++per_pattern[static_cast<std::size_t>(m.pattern)];
            ++total;
        }
    }
    return total;
}

}  // namespace detail

// Reads surface/type rows (TSV "surface<TAB>type" or JSONL {surface,type}),
// normalizes and deduplicates, counts k over the fine-tuning train split,
// and flags surfaces that appear anywhere in the pre-training corpus.
inline EntitySets load_gazetteer(const std::string& path, const Corpus& finetune_corpus,
                                 const Corpus& pretrain_corpus) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_gazetteer: cannot open " + path);

    std::vector<std::pair<std::string, std::string>> rows;  // surface, type
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::string surface, type;
        if (line[0] == '{') {
            nlohmann::json obj;
            try {
                obj = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw std::runtime_error("load_gazetteer: malformed JSON at line " +
                                         std::to_string(line_no) + ": " + e.what());
            }
            surface = obj.at("surface").get<std::string>();
            type = obj.at("type").get<std::string>();
        } else {
            auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("load_gazetteer: no tab separator at line " +
                                         std::to_string(line_no));
            surface = line.substr(0, tab);
            type = line.substr(tab + 1);
            if (!type.empty() && type.back() == '\r') type.pop_back();
        }
        if (!known_entity_types().count(type))
            throw std::runtime_error("load_gazetteer: unknown entity type \"" + type +
                                     "\" at line " + std::to_string(line_no));
        rows.emplace_back(canonical_text(surface), type);
    }
    if (rows.empty()) throw std::runtime_error("load_gazetteer: empty gazetteer: " + path);

    // dedupe; conflicting type tags for one surface are a data error
    std::map<std::string, std::string> by_surface;
    for (const auto& [surface, type] : rows) {
        if (utf8_length(surface) < 4) continue;  // too short to audit
        auto it = by_surface.find(surface);
        if (it == by_surface.end())
            by_surface.emplace(surface, type);
        else if (it->second != type)
            throw std::runtime_error("load_gazetteer: conflicting types for surface \"" + surface +
                                     "\"");
    }
    if (by_surface.empty())
        throw std::runtime_error("load_gazetteer: no surface passes the length rule");

    std::vector<std::string> patterns;
    std::vector<std::string> types;
    for (const auto& [surface, type] : by_surface) {
        patterns.push_back(surface);
        types.push_back(type);
    }
    MatchIndex index(patterns);

    std::vector<long> k_counts(patterns.size(), 0);
    detail::count_occurrences(index, finetune_corpus, Split::train, k_counts);

    std::vector<long> pre_counts(patterns.size(), 0);
    for (const auto& doc : pretrain_corpus.documents)
        for (const auto& m : index.find(canonical_text(doc.text)))
            ++pre_counts[static_cast<std::size_t>(m.pattern)];

    EntitySets sets;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        if (k_counts[i] < 1) continue;  // never occurs in the audited training data
        EntityRecord rec;
        rec.surface = patterns[i];
        rec.type = types[i];
        rec.k = k_counts[i];
        rec.in_pretraining = pre_counts[i] > 0;
        sets.all.push_back(std::move(rec));
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Scanning generated samples

struct MatchLogEntry {
    std::string sample_id;
    std::string surface;
    std::string type;
    std::size_t offset = 0;
};

struct ScanResult {
    std::set<std::string> matched_surfaces;
    std::vector<MatchLogEntry> log;  // sample-index order
    long occurrences = 0;
};

inline ScanResult scan(const MatchIndex& index, const EntitySets& sets, SetKind kind,
                       const std::vector<GeneratedSample>& samples, int workers = 1) {
    auto records = sets.select(kind);
    if (records.size() != index.pattern_count())
        throw std::runtime_error("scan: index does not match the selected entity set");

    std::vector<std::vector<Match>> per_sample(samples.size());
    parallel_for_indexed(samples.size(), workers, [&](std::size_t i) {
        per_sample[i] = index.find(canonical_text(samples[i].body));
    });

    ScanResult result;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (const auto& m : per_sample[i]) {
            const EntityRecord& rec = *records[static_cast<std::size_t>(m.pattern)];
            result.matched_surfaces.insert(rec.surface);
            result.log.push_back({samples[i].id, rec.surface, rec.type, m.offset});
            ++result.occurrences;
        }
    }
    return result;
}

inline void save_match_log(const ScanResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_match_log: cannot open " + path);
    for (const auto& e : result.log) {
        nlohmann::json obj;
        obj["sample_id"] = e.sample_id;
        obj["surface"] = e.surface;
        obj["type"] = e.type;
        obj["offset"] = e.offset;
        out << obj.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Extraction-rate report

struct RateCell {
    long extracted = 0;
    long size = 0;

    double ratio() const { return size == 0 ? 0.0 : static_cast<double>(extracted) / size; }
    // percentage rounded to 0.1, the report's display precision
    double pct() const { return size == 0 ? 0.0 : std::round(ratio() * 1000.0) / 10.0; }
};

struct AuditReport {
    std::string setup;
    std::string prompt_kind;
    long n_samples = 0;
    // set kind -> type -> cell; "TOTAL" row aggregates all types in the set
    std::map<std::string, std::map<std::string, RateCell>> cells;
};

inline AuditReport extraction_rates(const EntitySets& sets,
                                    const std::map<SetKind, ScanResult>& scans,
                                    const std::string& setup, const std::string& prompt_kind,
                                    long n_samples) {
    AuditReport report;
    report.setup = setup;
    report.prompt_kind = prompt_kind;
    report.n_samples = n_samples;
    for (const auto& [kind, scan_result] : scans) {
        auto records = sets.select(kind);
        auto& by_type = report.cells[set_kind_name(kind)];
        RateCell total;
        for (const auto* r : records) {
            RateCell& cell = by_type[r->type];
            ++cell.size;
            ++total.size;
            if (scan_result.matched_surfaces.count(r->surface)) {
                ++cell.extracted;
                ++total.extracted;
            }
        }
        by_type["TOTAL"] = total;
    }
    return report;
}

inline nlohmann::json report_to_json(const AuditReport& report) {
    nlohmann::json j;
    j["setup"] = report.setup;
    j["prompt_kind"] = report.prompt_kind;
    j["n_samples"] = report.n_samples;
    nlohmann::json sets = nlohmann::json::object();
    for (const auto& [set_name, by_type] : report.cells) {
        nlohmann::json types = nlohmann::json::object();
        for (const auto& [type, cell] : by_type) {
            types[type] = {{"extracted", cell.extracted},
                           {"size", cell.size},
                           {"pct", cell.pct()}};
        }
        sets[set_name] = std::move(types);
    }
    j["sets"] = std::move(sets);
    return j;
}

inline AuditReport report_from_json(const nlohmann::json& j) {
    AuditReport report;
    report.setup = j.at("setup").get<std::string>();
    report.prompt_kind = j.at("prompt_kind").get<std::string>();
    report.n_samples = j.at("n_samples").get<long>();
    for (const auto& [set_name, types] : j.at("sets").items()) {
        for (const auto& [type, cell] : types.items()) {
            RateCell c;
            c.extracted = cell.at("extracted").get<long>();
            c.size = cell.at("size").get<long>();
            report.cells[set_name][type] = c;
        }
    }
    return report;
}

}  // namespace entaudit
