#pragma once

// Masked-token pre-training and the three fine-tuning regimes (all groups,
// last layer + head, last layer + head under DP) with bias-corrected Adam,
// deterministic shuffling and accuracy evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "entaudit/accountant.hpp"
#include "entaudit/checkpoint.hpp"
#include "entaudit/corpus.hpp"
#include "entaudit/dp.hpp"
#include "entaudit/model.hpp"
#include "entaudit/parallel.hpp"
#include "entaudit/rng.hpp"
#include "entaudit/tokenizer.hpp"

namespace entaudit {

struct TrainConfig {
    Setup setup = Setup::full;
    Objective objective = Objective::classify;
    int batch_size = 32;
    double learning_rate = 1e-3;
    int epochs = 3;
    std::uint64_t seed = 1;
    int workers = 1;

    void validate() const {
        if (batch_size < 1) throw std::runtime_error("TrainConfig: batch_size must be positive");
        if (!(learning_rate > 0.0))
            throw std::runtime_error("TrainConfig: learning_rate must be positive");
        if (epochs < 1) throw std::runtime_error("TrainConfig: epochs must be positive");
        if (workers < 1) throw std::runtime_error("TrainConfig: workers must be positive");
    }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::map<std::string, Mat> m, v;
    long t = 0;
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;
};

inline void adam_step(AdamState& state, Parameters& params, const GradientBundle& grads,
                      double lr) {
    if (state.t == 0) {
        for (const auto& [name, g] : grads) {
            state.m.emplace(name, Mat(g.rows, g.cols));
            state.v.emplace(name, Mat(g.rows, g.cols));
        }
    }
    if (grads.size() != state.m.size())
        throw std::runtime_error("adam_step: gradient keys changed between steps");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(state.t));
    for (const auto& [name, g] : grads) {
        auto mi = state.m.find(name);
        auto pi = params.find(name);
        if (mi == state.m.end()) throw std::runtime_error("adam_step: unexpected group " + name);
        if (pi == params.end()) throw std::runtime_error("adam_step: no parameter group " + name);
        Mat& m = mi->second;
        Mat& v = state.v.at(name);
        Mat& p = pi->second;
        if (!g.same_shape(p)) throw std::runtime_error("adam_step: shape mismatch for " + name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m.a[i] = AdamState::beta1 * m.a[i] + (1.0 - AdamState::beta1) * g.a[i];
            v.a[i] = AdamState::beta2 * v.a[i] + (1.0 - AdamState::beta2) * g.a[i] * g.a[i];
            double mhat = m.a[i] / bc1;
            double vhat = v.a[i] / bc2;
            p.a[i] -= lr * mhat / (std::sqrt(vhat) + AdamState::eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Masked-token supervision

struct MaskPlan {
    std::vector<int> masked_ids;  // input sequence with substitutions applied
    std::vector<int> positions;   // predicted positions
    std::vector<int> targets;     // original ids at those positions
    int n_masked = 0, n_random = 0, n_kept = 0;  // action tallies, for auditing
};

// Select 15% of non-special positions (at least one); of the selected, 80%
// become MASK, 10% a random ordinary token, 10% stay unchanged.
inline MaskPlan plan_masking(const std::vector<int>& ids, int vocab_size, std::uint64_t key) {
    MaskPlan plan;
    plan.masked_ids = ids;
    StreamRng rng(key);
    std::vector<std::size_t> selected;
    double min_u = 2.0;
    std::size_t min_pos = ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (TokenizerModel::is_special(ids[i])) continue;
        double u = rng.next_uniform();
        if (u < 0.15) {
            selected.push_back(i);
        } else if (u < min_u) {
            min_u = u;
            min_pos = i;
        }
    }
    if (selected.empty()) {
        if (min_pos == ids.size()) throw std::runtime_error("plan_masking: no maskable positions");
        selected.push_back(min_pos);
    }
    const int n_ordinary = vocab_size - tok::kNumSpecials;
    for (std::size_t i : selected) {
        plan.positions.push_back(static_cast<int>(i));
        plan.targets.push_back(ids[i]);
        double a = rng.next_uniform();
        if (a < 0.8) {
            plan.masked_ids[i] = tok::kMask;
            ++plan.n_masked;
        } else if (a < 0.9 && n_ordinary > 0) {
            plan.masked_ids[i] =
                tok::kNumSpecials + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_ordinary)));
            ++plan.n_random;
        } else {
            ++plan.n_kept;
        }
    }
    return plan;
}

// Chop each train document into CLS-prefixed windows of at most max_seq
// tokens; windows shorter than 4 body tokens carry too little signal to keep.
inline std::vector<std::vector<int>> build_mlm_sequences(const Corpus& corpus,
                                                         const TokenizerModel& tok_model,
                                                         int max_seq) {
    std::vector<std::vector<int>> sequences;
    const std::size_t body = static_cast<std::size_t>(max_seq) - 1;
    for (const auto& doc : corpus.documents) {
        if (corpus.split.at(doc.id) != Split::train) continue;
        std::vector<int> ids = encode(tok_model, doc.text);
        for (std::size_t start = 0; start < ids.size(); start += body) {
            std::size_t end = std::min(ids.size(), start + body);
            if (end - start < 4) break;
            std::vector<int> seq;
            seq.reserve(end - start + 1);
            seq.push_back(tok::kCls);
            seq.insert(seq.end(), ids.begin() + static_cast<std::ptrdiff_t>(start),
                       ids.begin() + static_cast<std::ptrdiff_t>(end));
            sequences.push_back(std::move(seq));
        }
    }
    return sequences;
}

// [CLS] + text tokens, truncated to max_seq
inline std::vector<int> classify_sequence(const TokenizerModel& tok_model, const std::string& text,
                                          int max_seq) {
    std::vector<int> ids = encode(tok_model, text);
    std::vector<int> seq;
    seq.reserve(std::min<std::size_t>(ids.size() + 1, static_cast<std::size_t>(max_seq)));
    seq.push_back(tok::kCls);
    for (int id : ids) {
        if (seq.size() >= static_cast<std::size_t>(max_seq)) break;
        seq.push_back(id);
    }
    return seq;
}

struct TrainRunResult {
    ModelCheckpoint checkpoint;
    std::vector<double> loss_curve;           // one entry per optimizer step
    nlohmann::json manifest;
    std::vector<std::string> accountant_log;  // CSV lines, DP runs only
};

namespace detail {

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t key) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    StreamRng rng(key);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);
    return order;
}

}  // namespace detail

inline TrainRunResult pretrain_mlm(const Corpus& corpus, const TokenizerModel& tok_model,
                                   ModelConfig cfg, const TrainConfig& train) {
    train.validate();
    if (train.objective != Objective::mlm)
        throw std::runtime_error("pretrain_mlm: objective must be mlm");
    cfg.vocab_size = tok_model.vocab_size();
    cfg.validate();

    auto sequences = build_mlm_sequences(corpus, tok_model, cfg.max_seq);
    if (sequences.size() < static_cast<std::size_t>(train.batch_size))
        throw std::runtime_error("pretrain_mlm: corpus smaller than one batch");

    Parameters params = init_params(cfg, 0, train.seed);
    const auto trainable = trainable_groups(cfg, 0, Setup::full, Objective::mlm);
    AdamState adam;
    TrainRunResult result;

    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        auto order = detail::shuffled_order(sequences.size(), derive_key(train.seed, "order",
                                                                         static_cast<std::uint64_t>(epoch)));
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(train.batch_size)) {
            std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(train.batch_size));
            std::vector<Example> batch;
            batch.reserve(end - b);
            for (std::size_t k = b; k < end; ++k) {
                std::size_t si = order[k];
                MaskPlan plan = plan_masking(sequences[si], cfg.vocab_size,
                                             derive_key(train.seed, "mask",
                                                        static_cast<std::uint64_t>(epoch), si));
                Example ex;
                ex.ids = std::move(plan.masked_ids);
                ex.mask_positions = std::move(plan.positions);
                ex.mlm_targets = std::move(plan.targets);
                ex.noise_tag = derive_key(train.seed, "noise", static_cast<std::uint64_t>(epoch), si);
                batch.push_back(std::move(ex));
            }
            LossGrad lg = loss_and_grad(params, cfg, batch, Objective::mlm, trainable,
                                        train.seed, true, train.workers);
            adam_step(adam, params, lg.grads, train.learning_rate);
            result.loss_curve.push_back(lg.loss);
        }
    }

    result.checkpoint.config = cfg;
    result.checkpoint.n_classes = 0;
    result.checkpoint.params = std::move(params);
    result.manifest = {{"setup", "full"},
                       {"objective", "mlm"},
                       {"seed", train.seed},
                       {"epochs", train.epochs},
                       {"batch_size", train.batch_size},
                       {"learning_rate", train.learning_rate},
                       {"steps", result.loss_curve.size()},
                       {"sequences", sequences.size()},
                       {"final_loss", result.loss_curve.back()}};
    return result;
}

inline TrainRunResult finetune(const ModelCheckpoint& base, const Corpus& corpus,
                               const TokenizerModel& tok_model, const TrainConfig& train,
                               const std::optional<DpConfig>& dp) {
    train.validate();
    if (train.objective != Objective::classify)
        throw std::runtime_error("finetune: objective must be classify");
    if (dp.has_value() && train.setup != Setup::dp)
        throw std::runtime_error("finetune: dp config given but setup is not dp");
    if (!dp.has_value() && train.setup == Setup::dp)
        throw std::runtime_error("finetune: setup dp requires a dp config");

    const ModelConfig& cfg = base.config;
    const int n_classes = static_cast<int>(corpus.labels.size());
    if (n_classes < 2) throw std::runtime_error("finetune: corpus provides fewer than 2 classes");

    Parameters params = base.params;
    if (!params.count("cls.w")) {
        Mat w(static_cast<std::size_t>(cfg.d_model), static_cast<std::size_t>(n_classes));
        StreamRng rng(derive_key(train.seed, "init", fnv1a64("cls.w")));
        for (double& v : w.a) v = 0.02 * rng.next_gaussian();
        params.emplace("cls.w", std::move(w));
        params.emplace("cls.b", Mat(1, static_cast<std::size_t>(n_classes)));
    } else if (params.at("cls.w").cols != static_cast<std::size_t>(n_classes)) {
        throw std::runtime_error("finetune: checkpoint classifier width differs from corpus classes");
    }

    struct Item {
        std::vector<int> ids;
        int label;
    };
    std::vector<Item> items;
    for (const auto& doc : corpus.documents) {
        if (corpus.split.at(doc.id) != Split::train) continue;
        if (!doc.label) throw std::runtime_error("finetune: unlabeled train document " + doc.id);
        items.push_back({classify_sequence(tok_model, doc.text, cfg.max_seq),
                         corpus.label_index(*doc.label)});
    }
    if (items.size() < static_cast<std::size_t>(train.batch_size))
        throw std::runtime_error("finetune: train split smaller than one batch");

    const auto trainable = trainable_groups(cfg, n_classes, train.setup, Objective::classify);
    AdamState adam;
    TrainRunResult result;

    double delta = 0.0;
    std::optional<AccountantState> accountant;
    if (dp) {
        dp->validate();
        delta = dp->delta > 0.0 ? dp->delta : 1.0 / static_cast<double>(items.size());
        double q = static_cast<double>(train.batch_size) / static_cast<double>(items.size());
        if (dp->noise_multiplier > 0.0) {
            accountant = make_accountant(q, dp->noise_multiplier);
            result.accountant_log.push_back(accountant_csv_header(*accountant));
        }
    }

    std::uint64_t global_step = 0;
    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        auto order = detail::shuffled_order(items.size(), derive_key(train.seed, "order",
                                                                     static_cast<std::uint64_t>(epoch)));
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(train.batch_size)) {
            std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(train.batch_size));
            std::vector<Example> batch;
            batch.reserve(end - b);
            for (std::size_t k = b; k < end; ++k) {
                std::size_t ii = order[k];
                Example ex;
                ex.ids = items[ii].ids;
                ex.label = items[ii].label;
                ex.noise_tag = derive_key(train.seed, "noise", static_cast<std::uint64_t>(epoch), ii);
                batch.push_back(std::move(ex));
            }
            if (dp) {
                auto per = per_example_grads(params, cfg, batch, Objective::classify, trainable,
                                             train.seed, true, train.workers);
                std::vector<GradientBundle> bundles;
                bundles.reserve(per.size());
                double loss = 0.0;
                for (auto& lg : per) {
                    loss += lg.loss;
                    bundles.push_back(std::move(lg.grads));
                }
                result.loss_curve.push_back(loss / static_cast<double>(per.size()));
                GradientBundle noisy =
                    privatize(bundles, *dp, derive_key(train.seed, "dpstep", global_step));
                adam_step(adam, params, noisy, train.learning_rate);
                if (accountant) {
                    account_step(*accountant);
                    result.accountant_log.push_back(accountant_csv_row(*accountant, delta));
                }
            } else {
                LossGrad lg = loss_and_grad(params, cfg, batch, Objective::classify, trainable,
                                            train.seed, true, train.workers);
                adam_step(adam, params, lg.grads, train.learning_rate);
                result.loss_curve.push_back(lg.loss);
            }
            ++global_step;
        }
    }

    result.checkpoint.config = cfg;
    result.checkpoint.n_classes = n_classes;
    result.checkpoint.params = std::move(params);
    result.manifest = {{"setup", setup_name(train.setup)},
                       {"objective", "classify"},
                       {"seed", train.seed},
                       {"epochs", train.epochs},
                       {"batch_size", train.batch_size},
                       {"learning_rate", train.learning_rate},
                       {"n_classes", n_classes},
                       {"steps", result.loss_curve.size()},
                       {"final_loss", result.loss_curve.back()}};
    if (dp) {
        result.manifest["clip_norm"] = dp->clip_norm;
        result.manifest["noise_multiplier"] = dp->noise_multiplier;
        result.manifest["delta"] = delta;
        result.manifest["epsilon"] =
            accountant ? epsilon(*accountant, delta) : std::numeric_limits<double>::infinity();
    }
    return result;
}

inline double evaluate_accuracy(const ModelCheckpoint& ckpt, const Corpus& corpus,
                                const TokenizerModel& tok_model, int workers = 1) {
    struct Item {
        std::vector<int> ids;
        int label;
    };
    std::vector<Item> items;
    for (const auto& doc : corpus.documents) {
        if (corpus.split.at(doc.id) != Split::test) continue;
        if (!doc.label) continue;
        items.push_back({classify_sequence(tok_model, doc.text, ckpt.config.max_seq),
                         corpus.label_index(*doc.label)});
    }
    if (items.empty()) throw std::runtime_error("evaluate_accuracy: empty test split");

    std::vector<int> correct(items.size(), 0);
    parallel_for_indexed(items.size(), workers, [&](std::size_t i) {
        auto probs = forward_classify(ckpt.params, ckpt.config, items[i].ids);
        std::size_t best = 0;
        for (std::size_t j = 1; j < probs.size(); ++j)
            if (probs[j] > probs[best]) best = j;
        correct[i] = (static_cast<int>(best) == items[i].label) ? 1 : 0;
    });
    long n_correct = 0;
    for (int c : correct) n_correct += c;
    return static_cast<double>(n_correct) / static_cast<double>(items.size());
}

}  // namespace entaudit
