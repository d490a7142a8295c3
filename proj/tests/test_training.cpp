#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "entaudit/training.hpp"
#include "util.hpp"

using namespace entaudit;

namespace {

Corpus toy_corpus(std::size_t n_docs) {
    Corpus corpus;
    const char* subjects[] = {"the quarterly report", "our pipeline review", "a vendor invoice",
                              "the travel budget",    "an outage ticket",    "the staffing plan"};
    const char* verbs[] = {"was sent to", "never reached", "got approved by", "was drafted for"};
    const char* objects[] = {"alice smith", "the finance desk", "bob jones", "the board",
                             "carol at acme corp"};
    for (std::size_t i = 0; i < n_docs; ++i) {
        Document doc;
        doc.id = "doc" + std::to_string(i);
        doc.text = std::string(subjects[i % 6]) + " " + verbs[i % 4] + " " + objects[i % 5] +
                   " on day " + std::to_string(i);
        doc.label = (i % 3 == 0) ? "urgent" : "routine";
        corpus.documents.push_back(std::move(doc));
    }
    corpus.labels = {"urgent", "routine"};
    assign_split(corpus, 13);
    return corpus;
}

TokenizerModel toy_tokenizer(const Corpus& corpus) { return train_tokenizer(corpus, 300); }

ModelConfig toy_model() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.max_seq = 24;
    cfg.dropout_attn = 0.0;
    cfg.dropout_classifier = 0.0;
    return cfg;
}

bool params_equal(const Parameters& a, const Parameters& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, m] : a) {
        auto it = b.find(name);
        if (it == b.end() || !m.same_shape(it->second)) return false;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m.a[i] != it->second.a[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("first Adam step reduces to lr * g / (|g| + eps)") {
    Parameters params;
    params.emplace("w", Mat(2, 2));
    params.at("w").a = {1.0, -2.0, 0.5, 3.0};
    GradientBundle grads;
    grads.emplace("w", Mat(2, 2));
    grads.at("w").a = {0.3, -0.7, 0.0, 1e-3};

    Parameters before = params;
    AdamState adam;
    adam_step(adam, params, grads, 0.01);
    for (std::size_t i = 0; i < 4; ++i) {
        double g = grads.at("w").a[i];
        double expect = before.at("w").a[i] - 0.01 * g / (std::abs(g) + 1e-8);
        REQUIRE(std::abs(params.at("w").a[i] - expect) < 1e-15);
    }
    CHECK(adam.t == 1);
}

TEST_CASE("Adam rejects gradient bundles that change between steps") {
    Parameters params;
    params.emplace("w", Mat(1, 2));
    GradientBundle g1;
    g1.emplace("w", Mat(1, 2));
    AdamState adam;
    adam_step(adam, params, g1, 0.1);

    GradientBundle g2;
    g2.emplace("w", Mat(1, 2));
    g2.emplace("extra", Mat(1, 1));
    CHECK_THROWS_WITH(adam_step(adam, params, g2, 0.1),
                      Catch::Matchers::ContainsSubstring("keys changed"));

    GradientBundle g3;
    g3.emplace("w", Mat(2, 2));
    CHECK_THROWS_WITH(adam_step(adam, params, g3, 0.1),
                      Catch::Matchers::ContainsSubstring("shape"));
}

TEST_CASE("masking selects about 15% and splits actions 80/10/10") {
    const int vocab = 600;
    std::size_t total = 0, selected = 0;
    long masked = 0, random_sub = 0, kept = 0;
    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        std::vector<int> ids(120);
        StreamRng rng(derive_key(7, "fill", trial));
        for (int& id : ids)
            id = tok::kNumSpecials + static_cast<int>(rng.next_below(vocab - tok::kNumSpecials));
        MaskPlan plan = plan_masking(ids, vocab, derive_key(3, "mask", trial));

        REQUIRE(plan.masked_ids.size() == ids.size());
        REQUIRE(plan.positions.size() == plan.targets.size());
        std::set<int> touched(plan.positions.begin(), plan.positions.end());
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (!touched.count(static_cast<int>(i))) REQUIRE(plan.masked_ids[i] == ids[i]);
        for (std::size_t k = 0; k < plan.positions.size(); ++k) {
            REQUIRE(plan.targets[k] == ids[static_cast<std::size_t>(plan.positions[k])]);
            int sub = plan.masked_ids[static_cast<std::size_t>(plan.positions[k])];
            REQUIRE((sub == tok::kMask || sub >= tok::kNumSpecials));
        }
        total += ids.size();
        selected += plan.positions.size();
        masked += plan.n_masked;
        random_sub += plan.n_random;
        kept += plan.n_kept;
    }
    double sel_rate = static_cast<double>(selected) / static_cast<double>(total);
    CHECK(std::abs(sel_rate - 0.15) < 0.01);
    double n_sel = static_cast<double>(selected);
    CHECK(std::abs(masked / n_sel - 0.8) < 0.02);
    CHECK(std::abs(random_sub / n_sel - 0.1) < 0.02);
    CHECK(std::abs(kept / n_sel - 0.1) < 0.02);
}

TEST_CASE("masking never selects special tokens and always selects at least one") {
    std::vector<int> ids = {tok::kCls, 9, tok::kSep};
    for (std::uint64_t key = 0; key < 300; ++key) {
        MaskPlan plan = plan_masking(ids, 50, key);
        REQUIRE(plan.positions.size() >= 1);
        for (int p : plan.positions) REQUIRE(p == 1);  // only maskable slot
    }
    CHECK_THROWS(plan_masking({tok::kCls, tok::kSep}, 50, 1));
}

TEST_CASE("training windows are CLS-prefixed max_seq chunks of train docs") {
    Corpus corpus;
    // 50 letter tokens; with max_seq=11 each window holds 10 body tokens
    std::string text;
    for (int i = 0; i < 50; ++i) text += (i ? " x" : "x");
    corpus.documents.push_back({"a", text, std::nullopt});
    corpus.documents.push_back({"b", "q q q q q q", std::nullopt});
    corpus.split["a"] = Split::train;
    corpus.split["b"] = Split::test;

    // bytes only (no merges), so token counts are predictable
    TokenizerModel tok_model = train_tokenizer(corpus, 261);

    auto seqs = build_mlm_sequences(corpus, tok_model, 11);
    // doc a encodes to 99 byte tokens ("x" + 49 " x"), -> 9 full windows + 9 leftover
    REQUIRE(seqs.size() == 10);
    for (const auto& s : seqs) {
        REQUIRE(s.front() == tok::kCls);
        REQUIRE(s.size() <= 11);
        REQUIRE(s.size() >= 5);
    }
    // windows tile the document: total body tokens add back up
    std::size_t body = 0;
    for (const auto& s : seqs) body += s.size() - 1;
    REQUIRE(body == 99);
}

TEST_CASE("classification input is CLS plus truncated text") {
    Corpus corpus = toy_corpus(40);
    TokenizerModel tok_model = toy_tokenizer(corpus);
    auto seq = classify_sequence(tok_model, corpus.documents[0].text, 8);
    REQUIRE(seq.size() == 8);
    REQUIRE(seq[0] == tok::kCls);
    auto full = classify_sequence(tok_model, "hi", 64);
    REQUIRE(full.size() < 64);
    REQUIRE(full[0] == tok::kCls);
}

TEST_CASE("epoch shuffles are permutations, reproducible and key-sensitive") {
    auto a = detail::shuffled_order(101, 5);
    auto b = detail::shuffled_order(101, 5);
    auto c = detail::shuffled_order(101, 6);
    REQUIRE(a == b);
    REQUIRE(a != c);
    std::set<std::size_t> seen(a.begin(), a.end());
    REQUIRE(seen.size() == 101);
    REQUIRE(*seen.rbegin() == 100);
}

TEST_CASE("pretraining drives the masked-token loss down, reproducibly") {
    Corpus corpus = toy_corpus(60);
    TokenizerModel tok_model = toy_tokenizer(corpus);
    TrainConfig train;
    train.objective = Objective::mlm;
    train.batch_size = 8;
    train.learning_rate = 1e-3;
    train.epochs = 4;
    train.seed = 11;

    TrainRunResult run = pretrain_mlm(corpus, tok_model, toy_model(), train);
    REQUIRE(!run.loss_curve.empty());
    double head = 0.0, tail = 0.0;
    std::size_t k = std::min<std::size_t>(5, run.loss_curve.size() / 2);
    for (std::size_t i = 0; i < k; ++i) {
        head += run.loss_curve[i];
        tail += run.loss_curve[run.loss_curve.size() - 1 - i];
    }
    CHECK(tail < head);
    CHECK(run.checkpoint.n_classes == 0);
    CHECK(run.checkpoint.params.count("cls.w") == 0);
    CHECK(run.checkpoint.params.count("mlm.dense.w") == 1);
    CHECK(run.manifest.at("steps").get<std::size_t>() == run.loss_curve.size());

    TrainRunResult again = pretrain_mlm(corpus, tok_model, toy_model(), train);
    REQUIRE(params_equal(run.checkpoint.params, again.checkpoint.params));
    REQUIRE(run.loss_curve == again.loss_curve);

    TrainConfig other = train;
    other.seed = 12;
    TrainRunResult different = pretrain_mlm(corpus, tok_model, toy_model(), other);
    REQUIRE(!params_equal(run.checkpoint.params, different.checkpoint.params));
}

TEST_CASE("fine-tuning regimes update exactly their trainable subset") {
    Corpus corpus = toy_corpus(60);
    TokenizerModel tok_model = toy_tokenizer(corpus);
    TrainConfig pre;
    pre.objective = Objective::mlm;
    pre.batch_size = 8;
    pre.epochs = 1;
    pre.seed = 11;
    TrainRunResult base = pretrain_mlm(corpus, tok_model, toy_model(), pre);

    TrainConfig ft;
    ft.objective = Objective::classify;
    ft.batch_size = 8;
    ft.learning_rate = 1e-3;
    ft.epochs = 1;
    ft.seed = 21;

    SECTION("full updates embeddings, ignores the idle head") {
        ft.setup = Setup::full;
        TrainRunResult run = finetune(base.checkpoint, corpus, tok_model, ft, std::nullopt);
        REQUIRE(run.checkpoint.n_classes == 2);
        REQUIRE(run.checkpoint.params.count("cls.w") == 1);
        const Mat& before = base.checkpoint.params.at("emb.tok");
        const Mat& after = run.checkpoint.params.at("emb.tok");
        bool moved = false;
        for (std::size_t i = 0; i < before.size(); ++i)
            if (before.a[i] != after.a[i]) moved = true;
        CHECK(moved);
        // dormant masked-token head rides along unchanged
        const Mat& mlm_before = base.checkpoint.params.at("mlm.dense.w");
        const Mat& mlm_after = run.checkpoint.params.at("mlm.dense.w");
        for (std::size_t i = 0; i < mlm_before.size(); ++i)
            REQUIRE(mlm_before.a[i] == mlm_after.a[i]);
    }

    SECTION("partial freezes everything below the last encoder layer") {
        ft.setup = Setup::partial;
        TrainRunResult run = finetune(base.checkpoint, corpus, tok_model, ft, std::nullopt);
        for (const char* frozen : {"emb.tok", "emb.pos", "mlm.dense.w", "mlm.ln.g"}) {
            const Mat& before = base.checkpoint.params.at(frozen);
            const Mat& after = run.checkpoint.params.at(frozen);
            for (std::size_t i = 0; i < before.size(); ++i)
                REQUIRE(before.a[i] == after.a[i]);
        }
        const Mat& before = base.checkpoint.params.at("enc.0.attn.wq");
        const Mat& after = run.checkpoint.params.at("enc.0.attn.wq");
        bool moved = false;
        for (std::size_t i = 0; i < before.size(); ++i)
            if (before.a[i] != after.a[i]) moved = true;
        CHECK(moved);  // single-layer model: layer 0 is the last layer
    }

    SECTION("setup and dp config must agree") {
        ft.setup = Setup::dp;
        CHECK_THROWS_WITH(finetune(base.checkpoint, corpus, tok_model, ft, std::nullopt),
                          Catch::Matchers::ContainsSubstring("requires a dp config"));
        ft.setup = Setup::full;
        DpConfig dp;
        CHECK_THROWS_WITH(finetune(base.checkpoint, corpus, tok_model, ft, dp),
                          Catch::Matchers::ContainsSubstring("setup is not dp"));
    }

    SECTION("dp run accounts one row per optimizer step") {
        ft.setup = Setup::dp;
        DpConfig dp;
        dp.clip_norm = 1.0;
        dp.noise_multiplier = 0.8;
        TrainRunResult run = finetune(base.checkpoint, corpus, tok_model, ft, dp);
        REQUIRE(run.accountant_log.size() == run.loss_curve.size() + 1);
        CHECK(run.accountant_log[0].rfind("step,q,sigma", 0) == 0);
        double eps = run.manifest.at("epsilon").get<double>();
        CHECK(eps > 0.0);
        CHECK(std::isfinite(eps));
        CHECK(run.manifest.at("delta").get<double>() > 0.0);
    }

    SECTION("dp without noise degenerates to a clipped run, no guarantee claimed") {
        ft.setup = Setup::dp;
        DpConfig dp;
        dp.clip_norm = 1.0;
        dp.noise_multiplier = 0.0;
        TrainRunResult run = finetune(base.checkpoint, corpus, tok_model, ft, dp);
        CHECK(run.accountant_log.empty());
        CHECK(std::isinf(run.manifest.at("epsilon").get<double>()));
    }
}

TEST_CASE("accuracy evaluation scores the test split only") {
    Corpus corpus = toy_corpus(60);
    TokenizerModel tok_model = toy_tokenizer(corpus);
    TrainConfig pre;
    pre.objective = Objective::mlm;
    pre.batch_size = 8;
    pre.epochs = 1;
    pre.seed = 3;
    TrainRunResult base = pretrain_mlm(corpus, tok_model, toy_model(), pre);

    TrainConfig ft;
    ft.objective = Objective::classify;
    ft.setup = Setup::full;
    ft.batch_size = 8;
    ft.epochs = 2;
    ft.seed = 5;
    TrainRunResult run = finetune(base.checkpoint, corpus, tok_model, ft, std::nullopt);

    double acc = evaluate_accuracy(run.checkpoint, corpus, tok_model);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(evaluate_accuracy(run.checkpoint, corpus, tok_model, 2) == acc);

    Corpus no_test = corpus;
    for (auto& [id, split] : no_test.split) split = Split::train;
    CHECK_THROWS_WITH(evaluate_accuracy(run.checkpoint, no_test, tok_model),
                      Catch::Matchers::ContainsSubstring("empty test split"));
}

TEST_CASE("checkpoints survive a save and load round trip") {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.max_seq = 12;
    cfg.vocab_size = 280;
    ModelCheckpoint ckpt;
    ckpt.config = cfg;
    ckpt.n_classes = 3;
    ckpt.params = init_params(cfg, 3, 99);

    testutil::TempDir dir;
    std::string path = (dir.path / "model.bin").string();
    save_checkpoint(ckpt, path);
    ModelCheckpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.n_classes == 3);
    REQUIRE(loaded.params.size() == ckpt.params.size());
    for (const auto& [name, m] : ckpt.params) {
        const Mat& l = loaded.params.at(name);
        REQUIRE(l.same_shape(m));
        for (std::size_t i = 0; i < m.size(); ++i)
            REQUIRE(l.a[i] == static_cast<double>(static_cast<float>(m.a[i])));
    }
    CHECK_THROWS(load_checkpoint((dir.path / "absent.bin").string()));
}
