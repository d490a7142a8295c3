#include <catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "entaudit/generator.hpp"
#include "entaudit/training.hpp"
#include "oracles.hpp"
#include "util.hpp"

using namespace entaudit;

namespace {

Corpus prompt_corpus(std::size_t n_docs, std::size_t words_per_doc) {
    Corpus corpus;
    for (std::size_t i = 0; i < n_docs; ++i) {
        Document doc;
        doc.id = "p" + std::to_string(i);
        for (std::size_t w = 0; w < words_per_doc; ++w) {
            if (w) doc.text += " ";
            doc.text += "word" + std::to_string(i) + "x" + std::to_string(w);
        }
        corpus.documents.push_back(std::move(doc));
    }
    assign_split(corpus, 13);
    return corpus;
}

struct GenFixture {
    Corpus corpus = prompt_corpus(20, 30);
    TokenizerModel tok_model = train_tokenizer(corpus, 320);
    ModelCheckpoint ckpt;

    GenFixture() {
        ModelConfig cfg;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.max_seq = 40;
        cfg.vocab_size = tok_model.vocab_size();
        ckpt.config = cfg;
        ckpt.n_classes = 0;
        ckpt.params = init_params(cfg, 0, 77);
    }
};

std::vector<double> random_dist(std::uint64_t key, std::size_t n, bool with_ties,
                                bool with_zeros) {
    StreamRng rng(key);
    std::vector<double> d(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double v = rng.next_uniform();
        if (with_zeros && rng.next_uniform() < 0.2) v = 0.0;
        if (with_ties && i > 0 && rng.next_uniform() < 0.3) v = d[i - 1];
        d[i] = v;
        total += v;
    }
    if (total == 0.0) {
        d[0] = 1.0;
        total = 1.0;
    }
    for (double& v : d) v /= total;
    return d;
}

}  // namespace

TEST_CASE("nucleus filter equals the brute-force prefix oracle") {
    for (std::uint64_t trial = 0; trial < 1000; ++trial) {
        StreamRng rng(derive_key(100, "case", trial));
        std::size_t n = 2 + rng.next_below(999);
        auto dist = random_dist(derive_key(101, "d", trial), n, trial % 3 == 0, trial % 4 == 0);
        double p = trial % 10 == 0 ? 1.0 : 0.01 + 0.98 * rng.next_uniform();

        std::vector<int> got = nucleus_filter(dist, p);
        std::sort(got.begin(), got.end());
        std::vector<int> want = oracles::nucleus_bruteforce(dist, p);
        INFO("trial " << trial << " n=" << n << " p=" << p);
        REQUIRE(got == want);
    }
}

TEST_CASE("nucleus filter keeps the full support at p=1 and breaks ties by id") {
    std::vector<double> dist = {0.25, 0.25, 0.25, 0.25, 0.0};
    auto full = nucleus_filter(dist, 1.0);
    REQUIRE(full == std::vector<int>{0, 1, 2, 3});  // zero-probability tail excluded

    auto half = nucleus_filter(dist, 0.5);
    REQUIRE(half == std::vector<int>{0, 1, 2});  // 0.75 strictly exceeds 0.5, ids ascend
}

TEST_CASE("continuations completing a seen n-gram are blocked") {
    // context "a b a b": appending "a" would repeat the bigram (b, a)
    std::vector<int> ctx = {10, 11, 10, 11};
    auto b2 = detail::blocked_continuations(ctx, 2);
    REQUIRE(b2 == std::unordered_set<int>{10});

    auto b3 = detail::blocked_continuations({7, 8, 9, 7, 8}, 3);
    REQUIRE(b3 == std::unordered_set<int>{9});

    // n=1 blocks every token already present
    auto b1 = detail::blocked_continuations({5, 6, 5}, 1);
    REQUIRE(b1 == std::unordered_set<int>{5, 6});

    CHECK(detail::blocked_continuations({5}, 3).empty());
    CHECK(detail::blocked_continuations({}, 2).empty());
}

TEST_CASE("decoding steps are reproducible and never emit special tokens") {
    GenFixture fx;
    DecodingConfig cfg;
    cfg.target_len = 24;
    std::vector<int> context = {tok::kCls, 30, 28, 27};  // byte-range ids, always in vocab
    for (std::uint64_t step = 0; step < 50; ++step) {
        int a = next_token(fx.ckpt, context, cfg, 5, step);
        int b = next_token(fx.ckpt, context, cfg, 5, step);
        REQUIRE(a == b);
        REQUIRE(!TokenizerModel::is_special(a));
        context.push_back(a);
        if (context.size() + 1 >= static_cast<std::size_t>(fx.ckpt.config.max_seq)) break;
    }
    // a different sampling seed diverges somewhere
    std::vector<int> other = {tok::kCls, 30, 28, 27};
    bool diverged = false;
    for (std::uint64_t step = 0; step < 20 && !diverged; ++step) {
        int a = next_token(fx.ckpt, other, cfg, 5, step);
        int b = next_token(fx.ckpt, other, cfg, 6, step);
        if (a != b) diverged = true;
        other.push_back(a);
    }
    CHECK(diverged);
}

TEST_CASE("greedy decoding ignores the sampling seed") {
    GenFixture fx;
    DecodingConfig cfg;
    cfg.greedy = true;
    std::vector<int> context = {tok::kCls, 30, 28};
    CHECK(next_token(fx.ckpt, context, cfg, 1, 0) == next_token(fx.ckpt, context, cfg, 2, 0));
}

TEST_CASE("generated samples meet their length and content contracts") {
    GenFixture fx;
    PromptSource source;
    source.kind = PromptKind::naive;
    source.corpus = &fx.corpus;
    source.prompt_chars = 40;
    DecodingConfig cfg;
    cfg.target_len = 30;

    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        GeneratedSample s = generate_sample(fx.ckpt, fx.tok_model, source, cfg, seed);
        REQUIRE(s.n_tokens == cfg.target_len);
        REQUIRE(s.prompt_ids.size() + s.body_ids.size() ==
                static_cast<std::size_t>(cfg.target_len));
        for (int id : s.body_ids) REQUIRE(!TokenizerModel::is_special(id));
        REQUIRE(s.body == decode(fx.tok_model, s.body_ids));
        REQUIRE(!s.body.empty());

        // no generated position may close a 3-gram seen earlier in the
        // CLS + prompt + body sequence
        std::vector<int> full = {tok::kCls};
        full.insert(full.end(), s.prompt_ids.begin(), s.prompt_ids.end());
        full.insert(full.end(), s.body_ids.begin(), s.body_ids.end());
        std::map<std::vector<int>, std::size_t> first_end;  // trigram -> first end index
        for (std::size_t end = 2; end < full.size(); ++end) {
            std::vector<int> tri = {full[end - 2], full[end - 1], full[end]};
            auto [it, fresh] = first_end.emplace(tri, end);
            if (!fresh) {
                // duplicates may only live entirely inside the fixed prefix
                REQUIRE(end <= s.prompt_ids.size());
            }
        }
    }
}

TEST_CASE("regeneration under the same seeds is identical") {
    GenFixture fx;
    PromptSource source;
    source.kind = PromptKind::naive;
    source.corpus = &fx.corpus;
    source.prompt_chars = 30;
    DecodingConfig cfg;
    cfg.target_len = 20;

    auto a = generate_corpus(fx.ckpt, fx.tok_model, source, cfg, 6, 500, "base", 1);
    auto b = generate_corpus(fx.ckpt, fx.tok_model, source, cfg, 6, 500, "base", 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].id == "s" + std::to_string(500 + i));
        REQUIRE(a[i].id == b[i].id);
        REQUIRE(a[i].prompt == b[i].prompt);
        REQUIRE(a[i].body == b[i].body);
        REQUIRE(a[i].body_ids == b[i].body_ids);
        REQUIRE(a[i].setup == "base");
    }
    // distinct seeds give distinct texts somewhere in the batch
    bool any_diff = false;
    for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i].body != a[0].body) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("oversized prompts are cut to half the token budget") {
    GenFixture fx;
    PromptSource source;
    source.kind = PromptKind::naive;
    source.corpus = &fx.corpus;
    source.prompt_chars = 200;  // tokenizes far past target_len/2
    DecodingConfig cfg;
    cfg.target_len = 16;

    GeneratedSample s = generate_sample(fx.ckpt, fx.tok_model, source, cfg, 9);
    REQUIRE(s.prompt_ids.size() == 8);
    REQUIRE(s.prompt == decode(fx.tok_model, s.prompt_ids));
    REQUIRE(s.n_tokens == 16);
}

TEST_CASE("prompt selection respects length, split and determinism") {
    Corpus corpus = prompt_corpus(15, 12);
    PromptSource naive;
    naive.kind = PromptKind::naive;
    naive.corpus = &corpus;
    naive.prompt_chars = 25;

    std::string a = select_prompt(naive, 3);
    std::string b = select_prompt(naive, 3);
    REQUIRE(a == b);
    REQUIRE(utf8_length(a) == 25);
    CHECK(select_prompt(naive, 4) != a);

    PromptSource informed = naive;
    informed.kind = PromptKind::informed;
    std::set<std::string> test_docs;
    for (const auto& doc : corpus.documents)
        if (corpus.split.at(doc.id) == Split::test) test_docs.insert(doc.text);
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        std::string prompt = select_prompt(informed, seed);
        bool from_test = false;
        for (const auto& text : test_docs)
            if (text.find(prompt) != std::string::npos) from_test = true;
        REQUIRE(from_test);
    }

    PromptSource empty;
    empty.kind = PromptKind::naive;
    Corpus none;
    empty.corpus = &none;
    CHECK_THROWS(select_prompt(empty, 1));
    PromptSource too_long = naive;
    too_long.prompt_chars = 100000;
    CHECK_THROWS_WITH(select_prompt(too_long, 1),
                      Catch::Matchers::ContainsSubstring("enough characters"));
}

TEST_CASE("decoder configuration and checkpoint requirements are enforced") {
    GenFixture fx;
    PromptSource source;
    source.corpus = &fx.corpus;
    source.prompt_chars = 20;

    DecodingConfig cfg;
    cfg.target_len = 60;  // max_seq is 40
    CHECK_THROWS_WITH(generate_sample(fx.ckpt, fx.tok_model, source, cfg, 1),
                      Catch::Matchers::ContainsSubstring("max_seq"));

    DecodingConfig bad = DecodingConfig{};
    bad.pool_size = 0;
    CHECK_THROWS(bad.validate(fx.ckpt.config.vocab_size));
    bad = DecodingConfig{};
    bad.nucleus_p = 0.0;
    CHECK_THROWS(bad.validate(fx.ckpt.config.vocab_size));
    bad = DecodingConfig{};
    bad.temperature = 0.0;
    CHECK_THROWS(bad.validate(fx.ckpt.config.vocab_size));

    ModelCheckpoint headless = fx.ckpt;
    headless.params.erase("mlm.dense.w");
    DecodingConfig ok;
    ok.target_len = 20;
    CHECK_THROWS_WITH(generate_sample(headless, fx.tok_model, source, ok, 1),
                      Catch::Matchers::ContainsSubstring("mask-prediction head"));
}

TEST_CASE("sample files survive a save and load round trip") {
    GenFixture fx;
    PromptSource source;
    source.kind = PromptKind::informed;
    source.corpus = &fx.corpus;
    source.prompt_chars = 20;
    DecodingConfig cfg;
    cfg.target_len = 16;
    auto samples = generate_corpus(fx.ckpt, fx.tok_model, source, cfg, 4, 10, "full");

    testutil::TempDir dir;
    std::string path = (dir.path / "samples.jsonl").string();
    save_samples_jsonl(samples, path);
    auto loaded = load_samples_jsonl(path);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].id == samples[i].id);
        CHECK(loaded[i].setup == samples[i].setup);
        CHECK(loaded[i].prompt_kind == samples[i].prompt_kind);
        CHECK(loaded[i].prompt == samples[i].prompt);
        CHECK(loaded[i].body == samples[i].body);
        CHECK(loaded[i].n_tokens == samples[i].n_tokens);
        CHECK(loaded[i].seed == samples[i].seed);
    }
    CHECK_THROWS(load_samples_jsonl((dir.path / "absent.jsonl").string()));
}
