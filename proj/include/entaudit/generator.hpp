#pragma once

// Text generation by sequential mask-append decoding: append a mask token,
// predict it, keep the top candidates, nucleus-filter, block n-gram repeats,
// sample, repeat. One active hypothesis; diversity comes from temperature
// and the per-step candidate pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "entaudit/checkpoint.hpp"
#include "entaudit/corpus.hpp"
#include "entaudit/model.hpp"
#include "entaudit/parallel.hpp"
#include "entaudit/rng.hpp"
#include "entaudit/text.hpp"
#include "entaudit/tokenizer.hpp"

namespace entaudit {

enum class PromptKind { naive, informed };

inline const char* prompt_kind_name(PromptKind k) {
    return k == PromptKind::naive ? "naive" : "informed";
}

inline PromptKind parse_prompt_kind(const std::string& s) {
    if (s == "naive") return PromptKind::naive;
    if (s == "informed") return PromptKind::informed;
    throw std::runtime_error("unknown prompt kind: " + s);
}

struct PromptSource {
    PromptKind kind = PromptKind::naive;
    const Corpus* corpus = nullptr;  // naive: unrelated public text; informed: fine-tuning corpus
    int prompt_chars = 100;
};

struct DecodingConfig {
    int pool_size = 30;
    int active_hypotheses = 1;
    double nucleus_p = 0.8;
    double temperature = 2.0;
    int no_repeat_ngram = 3;
    int target_len = 256;
    bool greedy = false;  // temperature -> 0 limit; argmax of pooled non-repeating candidates

    void validate(int vocab_size) const {
        if (pool_size < 1 || pool_size > vocab_size)
            throw std::runtime_error("DecodingConfig: pool_size must be in [1, vocab_size]");
        if (active_hypotheses != 1)
            throw std::runtime_error("DecodingConfig: only one active hypothesis is supported");
        if (!(nucleus_p > 0.0) || nucleus_p > 1.0)
            throw std::runtime_error("DecodingConfig: nucleus_p must be in (0,1]");
        if (!(temperature > 0.0))
            throw std::runtime_error("DecodingConfig: temperature must be positive");
        if (no_repeat_ngram < 1)
            throw std::runtime_error("DecodingConfig: no_repeat_ngram must be positive");
        if (target_len < 1) throw std::runtime_error("DecodingConfig: target_len must be positive");
    }
};

struct GeneratedSample {
    std::string id;
    std::string setup;
    PromptKind prompt_kind = PromptKind::naive;
    std::string prompt;
    std::string body;            // detokenized, prompt stripped
    std::vector<int> prompt_ids;  // token-level views; not serialized
    std::vector<int> body_ids;
    int n_tokens = 0;            // pre-strip token count (prompt + body)
    std::uint64_t seed = 0;
};

// Uniformly seeded choice of a long-enough document, then a uniformly random
// character window of exactly prompt_chars codepoints.
inline std::string select_prompt(const PromptSource& source, std::uint64_t seed) {
    if (!source.corpus || source.corpus->documents.empty())
        throw std::runtime_error("select_prompt: empty prompt corpus");
    if (source.prompt_chars < 1)
        throw std::runtime_error("select_prompt: prompt_chars must be positive");

    std::vector<const Document*> eligible;
    for (const auto& doc : source.corpus->documents) {
        if (source.kind == PromptKind::informed &&
            source.corpus->split.at(doc.id) != Split::test)
            continue;
        if (utf8_length(doc.text) >= static_cast<std::size_t>(source.prompt_chars))
            eligible.push_back(&doc);
    }
    if (eligible.empty())
        throw std::runtime_error("select_prompt: no document has enough characters");

    StreamRng rng(derive_key(seed, "prompt"));
    const Document& doc = *eligible[rng.next_below(eligible.size())];
    std::size_t len = utf8_length(doc.text);
    std::size_t max_off = len - static_cast<std::size_t>(source.prompt_chars);
    std::size_t off = max_off == 0 ? 0 : rng.next_below(max_off + 1);
    return utf8_substr(doc.text, off, static_cast<std::size_t>(source.prompt_chars));
}

// Smallest prefix of the descending-probability order whose cumulative mass
// strictly exceeds p; probability ties resolved by ascending index. p = 1
// returns the full support.
inline std::vector<int> nucleus_filter(const std::vector<double>& dist, double p) {
    std::vector<int> order(dist.size());
    for (std::size_t i = 0; i < dist.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (dist[static_cast<std::size_t>(a)] != dist[static_cast<std::size_t>(b)])
            return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)];
        return a < b;
    });
    std::vector<int> out;
    if (p >= 1.0) {
        for (int idx : order)
            if (dist[static_cast<std::size_t>(idx)] > 0.0) out.push_back(idx);
        if (out.empty()) out.push_back(order.empty() ? 0 : order[0]);
        return out;
    }
    double cum = 0.0;
    for (int idx : order) {
        out.push_back(idx);
        cum += dist[static_cast<std::size_t>(idx)];
        if (cum > p) break;
    }
    return out;
}

namespace detail {

// token ids that would complete an n-gram already present in the context
inline std::unordered_set<int> blocked_continuations(const std::vector<int>& context, int n) {
    std::unordered_set<int> blocked;
    if (n < 1 || context.size() < static_cast<std::size_t>(n)) return blocked;
    const std::size_t plen = static_cast<std::size_t>(n) - 1;
    const std::size_t suffix_start = context.size() - plen;
    for (std::size_t start = 0; start + plen < context.size(); ++start) {
        bool match = true;
        for (std::size_t j = 0; j < plen; ++j) {
            if (context[start + j] != context[suffix_start + j]) {
                match = false;
                break;
            }
        }
        if (match) blocked.insert(context[start + plen]);
    }
    return blocked;
}

}  // namespace detail

// One decoding step: mask-append prediction restricted to the candidate pool,
// nucleus filter, n-gram blocking, then a seeded sample. Special tokens are
// never candidates.
inline int next_token(const ModelCheckpoint& ckpt, const std::vector<int>& context,
                      const DecodingConfig& cfg, std::uint64_t seed, std::uint64_t step) {
    const ModelConfig& mc = ckpt.config;
    cfg.validate(mc.vocab_size);
    if (context.size() + 1 > static_cast<std::size_t>(mc.max_seq))
        throw std::runtime_error("next_token: context is at the maximum sequence length");

    std::vector<int> ids = context;
    ids.push_back(tok::kMask);
    const int mask_pos = static_cast<int>(ids.size()) - 1;
    Mat logits = forward_mlm_logits(ckpt.params, mc, ids, {mask_pos});

    std::vector<double> probs(static_cast<std::size_t>(mc.vocab_size));
    for (std::size_t j = 0; j < probs.size(); ++j)
        probs[j] = TokenizerModel::is_special(static_cast<int>(j))
                       ? -1e30
                       : logits(0, j) / cfg.temperature;
    softmax_row(probs.data(), probs.size());

    // top pool_size candidates, descending probability, ties by ascending id
    std::vector<int> order(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t pool_n = std::min<std::size_t>(static_cast<std::size_t>(cfg.pool_size), probs.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(pool_n),
                      order.end(), [&](int a, int b) {
                          if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)])
                              return probs[static_cast<std::size_t>(a)] >
                                     probs[static_cast<std::size_t>(b)];
                          return a < b;
                      });
    order.resize(pool_n);

    auto blocked = detail::blocked_continuations(context, cfg.no_repeat_ngram);

    if (cfg.greedy) {
        for (int id : order)
            if (!blocked.count(id)) return id;
    } else {
        // renormalize over the pool, then nucleus-filter inside it
        std::vector<double> pool_probs(pool_n);
        double pool_mass = 0.0;
        for (std::size_t i = 0; i < pool_n; ++i) pool_mass += probs[static_cast<std::size_t>(order[i])];
        for (std::size_t i = 0; i < pool_n; ++i)
            pool_probs[i] = probs[static_cast<std::size_t>(order[i])] / pool_mass;
        std::vector<int> kept = nucleus_filter(pool_probs, cfg.nucleus_p);

        std::vector<int> candidates;     // token ids, nucleus order
        std::vector<double> weights;
        for (int ki : kept) {
            int id = order[static_cast<std::size_t>(ki)];
            if (blocked.count(id)) continue;
            candidates.push_back(id);
            weights.push_back(pool_probs[static_cast<std::size_t>(ki)]);
        }
        if (!candidates.empty()) {
            double total = 0.0;
            for (double w : weights) total += w;
            StreamRng rng(derive_key(seed, "sample", step));
            double u = rng.next_uniform() * total;
            double cum = 0.0;
            for (std::size_t i = 0; i < candidates.size(); ++i) {
                cum += weights[i];
                if (u < cum) return candidates[i];
            }
            return candidates.back();  // guard against accumulated rounding
        }
        // every nucleus candidate was blocked: highest-probability
        // non-repeating candidate from the pool instead
        for (int id : order)
            if (!blocked.count(id)) return id;
    }

    // the entire pool is blocked: fall back to the best non-repeating token
    // over the whole vocabulary (context has far fewer n-grams than vocab
    // entries, so this always succeeds)
    std::vector<int> full(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) full[i] = static_cast<int>(i);
    std::sort(full.begin(), full.end(), [&](int a, int b) {
        if (probs[static_cast<std::size_t>(a)] != probs[static_cast<std::size_t>(b)])
            return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
        return a < b;
    });
    for (int id : full)
        if (!TokenizerModel::is_special(id) && !blocked.count(id)) return id;
    throw std::runtime_error("next_token: no admissible token (vocabulary exhausted)");
}

// Decode from a fresh prompt until prompt + body reach target_len tokens,
// then strip the prompt. The CLS anchor at position 0 is structural and not
// counted against target_len.
inline GeneratedSample generate_sample(const ModelCheckpoint& ckpt, const TokenizerModel& tok_model,
                                       const PromptSource& source, const DecodingConfig& cfg,
                                       std::uint64_t seed) {
    const ModelConfig& mc = ckpt.config;
    cfg.validate(mc.vocab_size);
    if (!ckpt.params.count("mlm.dense.w"))
        throw std::runtime_error("generate_sample: checkpoint lacks the mask-prediction head");
    if (mc.max_seq < cfg.target_len + 1)
        throw std::runtime_error("generate_sample: max_seq must cover target_len plus CLS");

    GeneratedSample sample;
    sample.prompt_kind = source.kind;
    sample.seed = seed;
    sample.prompt = select_prompt(source, seed);

    std::vector<int> prompt_ids = encode(tok_model, sample.prompt);
    // a character-sized prompt can tokenize long; cap it at half the budget so
    // generation always has room, and record exactly what conditioned the model
    const std::size_t prompt_cap = static_cast<std::size_t>(cfg.target_len) / 2;
    if (prompt_ids.size() > prompt_cap) {
        prompt_ids.resize(prompt_cap);
        sample.prompt = decode(tok_model, prompt_ids);
    }
    if (prompt_ids.size() >= static_cast<std::size_t>(cfg.target_len))
        throw std::runtime_error("generate_sample: prompt does not leave room for generation");

    std::vector<int> context;
    context.reserve(static_cast<std::size_t>(cfg.target_len) + 1);
    context.push_back(tok::kCls);
    context.insert(context.end(), prompt_ids.begin(), prompt_ids.end());

    std::uint64_t step = 0;
    while (context.size() - 1 < static_cast<std::size_t>(cfg.target_len)) {
        context.push_back(next_token(ckpt, context, cfg, seed, step));
        ++step;
    }

    sample.n_tokens = static_cast<int>(context.size()) - 1;
    sample.prompt_ids = std::move(prompt_ids);
    sample.body_ids.assign(context.begin() + 1 + static_cast<std::ptrdiff_t>(sample.prompt_ids.size()),
                           context.end());
    sample.body = decode(tok_model, sample.body_ids);
    return sample;
}

// sample i is seeded base_seed + i; output order is index order for any
// worker count
inline std::vector<GeneratedSample> generate_corpus(const ModelCheckpoint& ckpt,
                                                    const TokenizerModel& tok_model,
                                                    const PromptSource& source,
                                                    const DecodingConfig& cfg, int n_samples,
                                                    std::uint64_t base_seed,
                                                    const std::string& setup_tag, int workers = 1) {
    if (n_samples < 1) throw std::runtime_error("generate_corpus: n_samples must be positive");
    std::vector<GeneratedSample> samples(static_cast<std::size_t>(n_samples));
    parallel_for_indexed(samples.size(), workers, [&](std::size_t i) {
        std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
        GeneratedSample s = generate_sample(ckpt, tok_model, source, cfg, seed);
        s.id = "s" + std::to_string(seed);
        s.setup = setup_tag;
        samples[i] = std::move(s);
    });
    return samples;
}

inline void save_samples_jsonl(const std::vector<GeneratedSample>& samples,
                               const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_samples_jsonl: cannot open " + path);
    for (const auto& s : samples) {
        nlohmann::json obj;
        obj["id"] = s.id;
        obj["setup"] = s.setup;
        obj["prompt_kind"] = prompt_kind_name(s.prompt_kind);
        // text fields hold raw decoded bytes; store them as U+00.. codepoints
        // (same convention as the tokenizer file) so the JSON stays valid UTF-8
        obj["prompt"] = detail::latin1_encode(s.prompt);
        obj["body"] = detail::latin1_encode(s.body);
        obj["n_tokens"] = s.n_tokens;
        obj["seed"] = s.seed;
        out << obj.dump() << "\n";
    }
}

inline std::vector<GeneratedSample> load_samples_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_samples_jsonl: cannot open " + path);
    std::vector<GeneratedSample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("load_samples_jsonl: malformed line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
        GeneratedSample s;
        s.id = obj.at("id").get<std::string>();
        s.setup = obj.at("setup").get<std::string>();
        s.prompt_kind = parse_prompt_kind(obj.at("prompt_kind").get<std::string>());
        s.prompt = detail::latin1_decode(obj.at("prompt").get<std::string>());
        s.body = detail::latin1_decode(obj.at("body").get<std::string>());
        s.n_tokens = obj.at("n_tokens").get<int>();
        s.seed = obj.at("seed").get<std::uint64_t>();
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace entaudit
