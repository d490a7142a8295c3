#pragma once

// Document corpora: JSONL ingestion, deterministic train/test splits and
// canary planting for ground-truth memorization experiments.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "entaudit/rng.hpp"
#include "entaudit/text.hpp"

namespace entaudit {

enum class Split { train, test };

struct Document {
    std::string id;
    std::string text;  // normalized UTF-8
    std::optional<std::string> label;
};

struct Corpus {
    std::vector<Document> documents;                 // stable file order
    std::unordered_map<std::string, Split> split;    // id -> assignment
    std::vector<std::string> labels;                 // first-appearance order

    std::size_t train_size() const {
        std::size_t n = 0;
        for (const auto& d : documents)
            if (split.at(d.id) == Split::train) ++n;
        return n;
    }
    std::size_t test_size() const { return documents.size() - train_size(); }

    int label_index(const std::string& name) const {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == name) return static_cast<int>(i);
        return -1;
    }
};

struct IngestSchema {
    std::string id_field = "id";
    std::string text_field = "text";
    std::string label_field = "label";
};

constexpr std::uint64_t kDefaultSplitSeed = 13;

// Seeded shuffle split; 20% of documents (rounded down) become test.
inline void assign_split(Corpus& corpus, std::uint64_t seed) {
    const std::size_t n = corpus.documents.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    StreamRng rng(derive_key(seed, "split"));
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = rng.next_below(i);
        std::swap(order[i - 1], order[j]);
    }
    const std::size_t n_test = n / 5;
    corpus.split.clear();
    for (std::size_t k = 0; k < n; ++k) {
        const auto& id = corpus.documents[order[k]].id;
        corpus.split[id] = (k < n_test) ? Split::test : Split::train;
    }
}

inline Corpus ingest_jsonl(const std::string& path, const IngestSchema& schema = {},
                           std::uint64_t split_seed = kDefaultSplitSeed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ingest_jsonl: cannot open " + path);

    Corpus corpus;
    std::unordered_set<std::string> seen_ids;
    std::set<std::string> seen_labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("ingest_jsonl: malformed JSON at line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.contains(schema.text_field) || !obj[schema.text_field].is_string())
            throw std::runtime_error("ingest_jsonl: missing text field at line " +
                                     std::to_string(line_no));
        Document doc;
        doc.text = normalize_text(obj[schema.text_field].get<std::string>());
        if (doc.text.empty())
            throw std::runtime_error("ingest_jsonl: empty text after normalization at line " +
                                     std::to_string(line_no));
        if (obj.contains(schema.id_field) && !obj[schema.id_field].is_null()) {
            const auto& v = obj[schema.id_field];
            doc.id = v.is_string() ? v.get<std::string>() : v.dump();
        } else {
            doc.id = "doc" + std::to_string(line_no);
        }
        if (!seen_ids.insert(doc.id).second)
            throw std::runtime_error("ingest_jsonl: duplicate id \"" + doc.id + "\" at line " +
                                     std::to_string(line_no));
        if (obj.contains(schema.label_field) && obj[schema.label_field].is_string()) {
            doc.label = obj[schema.label_field].get<std::string>();
            if (seen_labels.insert(*doc.label).second) corpus.labels.push_back(*doc.label);
        }
        corpus.documents.push_back(std::move(doc));
    }
    if (corpus.documents.empty())
        throw std::runtime_error("ingest_jsonl: empty corpus: " + path);
    assign_split(corpus, split_seed);
    return corpus;
}

// ---------------------------------------------------------------------------
// Canaries

struct CanaryEntry {
    std::string surface;  // canonical form
    std::string type;     // entity type tag
    int k = 1;            // number of train documents to plant into
};

struct CanaryPlan {
    std::string template_text = "my account manager is {} today";
    std::vector<CanaryEntry> entries;
};

struct PlantRecord {
    // surface -> ids of the train documents it was inserted into
    std::map<std::string, std::vector<std::string>> insertions;
};

inline CanaryPlan load_canary_plan(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_canary_plan: cannot open " + path);
    nlohmann::json j;
    in >> j;
    CanaryPlan plan;
    if (j.contains("template")) plan.template_text = j["template"].get<std::string>();
    for (const auto& e : j.at("entries")) {
        CanaryEntry entry;
        entry.surface = canonical_text(e.at("surface").get<std::string>());
        entry.type = e.at("type").get<std::string>();
        entry.k = e.at("k").get<int>();
        plan.entries.push_back(std::move(entry));
    }
    return plan;
}

inline std::string apply_template(const std::string& tmpl, const std::string& surface) {
    auto pos = tmpl.find("{}");
    if (pos == std::string::npos)
        throw std::runtime_error("canary template has no {} placeholder");
    std::string out = tmpl;
    out.replace(pos, 2, surface);
    return out;
}

// Insert each surface, wrapped in the plan template, into exactly k distinct
// seeded-random train documents. Returns the modified corpus and an audit
// record of which documents received which surface.
inline std::pair<Corpus, PlantRecord> plant_canaries(const Corpus& corpus, const CanaryPlan& plan,
                                                     std::uint64_t seed) {
    std::vector<std::size_t> train_idx;
    for (std::size_t i = 0; i < corpus.documents.size(); ++i)
        if (corpus.split.at(corpus.documents[i].id) == Split::train) train_idx.push_back(i);

    for (const auto& e : plan.entries) {
        if (utf8_length(e.surface) < 4)
            throw std::runtime_error("canary surface too short (needs length >= 4): " + e.surface);
        if (e.k < 1) throw std::runtime_error("canary k must be positive: " + e.surface);
        if (static_cast<std::size_t>(e.k) > train_idx.size())
            throw std::runtime_error("canary k exceeds train split size: " + e.surface);
    }

    Corpus out = corpus;
    PlantRecord record;
    for (std::size_t ei = 0; ei < plan.entries.size(); ++ei) {
        const auto& e = plan.entries[ei];
        StreamRng rng(derive_key(seed, "canary", fnv1a64(e.surface)));
        // sample k distinct train docs
        std::vector<std::size_t> pool = train_idx;
        std::vector<std::string>& ids = record.insertions[e.surface];
        for (int c = 0; c < e.k; ++c) {
            std::size_t j = rng.next_below(pool.size());
            std::size_t doc_i = pool[j];
            pool[j] = pool.back();
            pool.pop_back();
            Document& doc = out.documents[doc_i];
            doc.text = normalize_text(doc.text + " " + apply_template(plan.template_text, e.surface));
            ids.push_back(doc.id);
        }
        std::sort(ids.begin(), ids.end());
    }
    return {std::move(out), std::move(record)};
}

inline void save_corpus_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_corpus_jsonl: cannot open " + path);
    for (const auto& d : corpus.documents) {
        nlohmann::json obj;
        obj["id"] = d.id;
        obj["text"] = d.text;
        if (d.label) obj["label"] = *d.label;
        out << obj.dump() << "\n";
    }
}

}  // namespace entaudit
