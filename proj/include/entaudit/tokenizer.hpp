#pragma once

// Byte-level pair-merging subword tokenizer. Base alphabet is the 256 byte
// values; training greedily merges the most frequent adjacent symbol pair
// inside whitespace-delimited chunks of the lowercased train split.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "entaudit/corpus.hpp"
#include "entaudit/text.hpp"

namespace entaudit {

namespace tok {
constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kCls = 2;
constexpr int kSep = 3;
constexpr int kMask = 4;
constexpr int kNumSpecials = 5;
constexpr int kByteBase = kNumSpecials;                 // byte b lives at id kByteBase + b
constexpr int kMinVocab = kNumSpecials + 256;           // 261
inline const char* kSpecialNames[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
}  // namespace tok

struct TokenizerModel {
    std::vector<std::string> vocab;               // id -> byte string (specials keep bracket names)
    std::vector<std::pair<int, int>> merges;      // rank order; merge r yields id kMinVocab + r

    // derived, rebuilt after load/train
    std::unordered_map<std::uint64_t, int> merge_lookup;  // packed pair -> merged id

    int vocab_size() const { return static_cast<int>(vocab.size()); }
    static bool is_special(int id) { return id >= 0 && id < tok::kNumSpecials; }

    static std::uint64_t pack_pair(int a, int b) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
               static_cast<std::uint32_t>(b);
    }

    void rebuild_lookup() {
        merge_lookup.clear();
        merge_lookup.reserve(merges.size() * 2);
        for (std::size_t r = 0; r < merges.size(); ++r)
            merge_lookup[pack_pair(merges[r].first, merges[r].second)] =
                tok::kMinVocab + static_cast<int>(r);
    }
};

inline TokenizerModel make_base_tokenizer() {
    TokenizerModel model;
    model.vocab.reserve(tok::kMinVocab);
    for (int i = 0; i < tok::kNumSpecials; ++i) model.vocab.emplace_back(tok::kSpecialNames[i]);
    for (int b = 0; b < 256; ++b) model.vocab.emplace_back(1, static_cast<char>(b));
    return model;
}

// Chunks are maximal non-space runs with the preceding space attached, so
// merges may absorb the leading space but never bridge two words. A bare run
// of spaces with no word after it stays together as one chunk.
inline std::vector<std::string_view> split_chunks(std::string_view text) {
    std::vector<std::string_view> chunks;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t start = i;
        if (text[i] == ' ') ++i;
        if (i < text.size() && text[i] != ' ') {
            while (i < text.size() && text[i] != ' ') ++i;
        } else {
            while (i < text.size() && text[i] == ' ') ++i;
        }
        chunks.push_back(text.substr(start, i - start));
    }
    return chunks;
}

namespace detail {

inline std::vector<int> chunk_to_base_ids(std::string_view chunk) {
    std::vector<int> ids;
    ids.reserve(chunk.size());
    for (unsigned char c : chunk) ids.push_back(tok::kByteBase + c);
    return ids;
}

// Merge every non-overlapping occurrence of (left,right), scanning left to right.
inline void apply_merge(std::vector<int>& ids, int left, int right, int merged) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size();) {
        if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
            ids[w++] = merged;
            r += 2;
        } else {
            ids[w++] = ids[r++];
        }
    }
    ids.resize(w);
}

}  // namespace detail

inline TokenizerModel train_tokenizer(const Corpus& corpus, int vocab_size) {
    if (vocab_size < tok::kMinVocab)
        throw std::runtime_error("train_tokenizer: vocab_size must be >= " +
                                 std::to_string(tok::kMinVocab));

    TokenizerModel model = make_base_tokenizer();

    // unique chunks with multiplicities keep the recount per merge cheap
    std::map<std::string, std::int64_t> chunk_counts;
    for (const auto& doc : corpus.documents) {
        if (corpus.split.at(doc.id) != Split::train) continue;
        // keep the canonical string alive while the views into it are used
        const std::string canon = canonical_text(doc.text);
        for (auto chunk : split_chunks(canon)) ++chunk_counts[std::string(chunk)];
    }

    struct Entry {
        std::vector<int> ids;
        std::int64_t count;
    };
    std::vector<Entry> entries;
    entries.reserve(chunk_counts.size());
    for (const auto& [chunk, count] : chunk_counts)
        entries.push_back({detail::chunk_to_base_ids(chunk), count});

    while (model.vocab_size() < vocab_size) {
        std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
        for (const auto& e : entries)
            for (std::size_t i = 0; i + 1 < e.ids.size(); ++i)
                pair_counts[TokenizerModel::pack_pair(e.ids[i], e.ids[i + 1])] += e.count;

        std::uint64_t best_key = 0;
        std::int64_t best_count = 0;
        bool have_best = false;
        for (const auto& [key, count] : pair_counts) {
            if (count < 2) continue;
            if (!have_best || count > best_count) {
                best_key = key;
                best_count = count;
                have_best = true;
                continue;
            }
            if (count == best_count) {
                int a = static_cast<int>(best_key >> 32), b = static_cast<int>(best_key & 0xffffffffu);
                int c = static_cast<int>(key >> 32), d = static_cast<int>(key & 0xffffffffu);
                auto cand = std::make_pair(std::string_view(model.vocab[c]), std::string_view(model.vocab[d]));
                auto cur = std::make_pair(std::string_view(model.vocab[a]), std::string_view(model.vocab[b]));
                if (cand < cur) best_key = key;
            }
        }
        if (!have_best) break;  // nothing repeats; further merges would be noise

        int left = static_cast<int>(best_key >> 32);
        int right = static_cast<int>(best_key & 0xffffffffu);
        int merged = model.vocab_size();
        model.vocab.push_back(model.vocab[left] + model.vocab[right]);
        model.merges.emplace_back(left, right);
        for (auto& e : entries) detail::apply_merge(e.ids, left, right, merged);
    }

    model.rebuild_lookup();
    return model;
}

inline std::vector<int> encode_chunk(const TokenizerModel& model, std::string_view chunk) {
    std::vector<int> ids = detail::chunk_to_base_ids(chunk);
    // repeatedly apply the earliest-trained merge present, same order as training
    while (ids.size() > 1) {
        int best_merged = -1, best_left = 0, best_right = 0;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = model.merge_lookup.find(TokenizerModel::pack_pair(ids[i], ids[i + 1]));
            if (it != model.merge_lookup.end() && (best_merged < 0 || it->second < best_merged)) {
                best_merged = it->second;
                best_left = ids[i];
                best_right = ids[i + 1];
            }
        }
        if (best_merged < 0) break;
        detail::apply_merge(ids, best_left, best_right, best_merged);
    }
    return ids;
}

inline std::vector<int> encode(const TokenizerModel& model, std::string_view text) {
    std::string canon = canonical_text(text);
    std::vector<int> out;
    out.reserve(canon.size() / 3 + 4);
    for (auto chunk : split_chunks(canon)) {
        std::vector<int> ids = encode_chunk(model, chunk);
        for (int id : ids) {
            // byte-level base alphabet covers everything, but a loaded model
            // could in principle be truncated; stay defensive
            if (id < 0 || id >= model.vocab_size())
                id = tok::kUnk;
            out.push_back(id);
        }
    }
    return out;
}

inline std::string decode(const TokenizerModel& model, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id <= tok::kMask) continue;  // specials and UNK carry no surface text
        if (id >= model.vocab_size())
            throw std::runtime_error("decode: token id out of range: " + std::to_string(id));
        out += model.vocab[id];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization. Byte strings are stored as strings of U+0000..U+00FF
// codepoints so the JSON stays valid UTF-8 regardless of corpus bytes.

namespace detail {

inline std::string latin1_encode(const std::string& bytes) {
    std::string out;
    out.reserve(bytes.size());
    for (unsigned char c : bytes) {
        if (c < 0x80) {
            out += static_cast<char>(c);
        } else {
            out += static_cast<char>(0xC0 | (c >> 6));
            out += static_cast<char>(0x80 | (c & 0x3F));
        }
    }
    return out;
}

inline std::string latin1_decode(const std::string& utf8) {
    std::string out;
    for (std::size_t i = 0; i < utf8.size();) {
        unsigned char c = static_cast<unsigned char>(utf8[i]);
        if (c < 0x80) {
            out += static_cast<char>(c);
            i += 1;
        } else {
            if (i + 1 >= utf8.size())
                throw std::runtime_error("tokenizer file: truncated UTF-8 in vocab entry");
            unsigned char c2 = static_cast<unsigned char>(utf8[i + 1]);
            out += static_cast<char>(((c & 0x1F) << 6) | (c2 & 0x3F));
            i += 2;
        }
    }
    return out;
}

}  // namespace detail

inline void save_tokenizer(const TokenizerModel& model, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json specials = nlohmann::json::object();
    for (int i = 0; i < tok::kNumSpecials; ++i) specials[tok::kSpecialNames[i]] = i;
    j["specials"] = specials;
    nlohmann::json vocab = nlohmann::json::array();
    for (int i = 0; i < model.vocab_size(); ++i)
        vocab.push_back(i < tok::kNumSpecials ? model.vocab[i] : detail::latin1_encode(model.vocab[i]));
    j["vocab"] = std::move(vocab);
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : model.merges) merges.push_back({a, b});
    j["merges"] = std::move(merges);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tokenizer: cannot open " + path);
    out << j.dump() << "\n";
}

inline TokenizerModel load_tokenizer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tokenizer: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.at("version").get<int>() != 1)
        throw std::runtime_error("load_tokenizer: unsupported version in " + path);

    TokenizerModel model;
    const auto& vocab = j.at("vocab");
    if (vocab.size() < static_cast<std::size_t>(tok::kMinVocab))
        throw std::runtime_error("load_tokenizer: vocab smaller than base alphabet");
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        std::string s = vocab[i].get<std::string>();
        model.vocab.push_back(i < tok::kNumSpecials ? s : detail::latin1_decode(s));
    }
    for (const auto& m : j.at("merges")) {
        int a = m.at(0).get<int>(), b = m.at(1).get<int>();
        int merged = tok::kMinVocab + static_cast<int>(model.merges.size());
        if (a < 0 || b < 0 || a >= merged || b >= merged || TokenizerModel::is_special(a) ||
            TokenizerModel::is_special(b))
            throw std::runtime_error("load_tokenizer: invalid merge pair");
        model.merges.emplace_back(a, b);
    }
    if (model.vocab.size() != static_cast<std::size_t>(tok::kMinVocab) + model.merges.size())
        throw std::runtime_error("load_tokenizer: vocab/merge size mismatch");
    model.rebuild_lookup();
    return model;
}

}  // namespace entaudit
