#pragma once

// Small bidirectional transformer encoder (post-layer-norm residual blocks,
// GELU feed-forward, learned positions) with a masked-token prediction head
// tied to the token embeddings and a linear classifier on the first position.
// Forward and exact analytic backward are written out by hand; gradients are
// always computed per example so microbatch-level clipping gets the same
// numbers as ordinary batching.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "entaudit/parallel.hpp"
#include "entaudit/rng.hpp"
#include "entaudit/tensor.hpp"
#include "entaudit/tokenizer.hpp"

namespace entaudit {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 16;
    int d_ff = 64;
    int max_seq = 256;
    int vocab_size = tok::kMinVocab;
    double dropout_attn = 0.1;
    double dropout_classifier = 0.3;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1)
            throw std::runtime_error("ModelConfig: dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::runtime_error("ModelConfig: d_model must be divisible by n_heads");
        if (max_seq < 2) throw std::runtime_error("ModelConfig: max_seq must be >= 2");
        if (dropout_attn < 0.0 || dropout_attn >= 1.0 || dropout_classifier < 0.0 ||
            dropout_classifier >= 1.0)
            throw std::runtime_error("ModelConfig: dropout rates must be in [0,1)");
    }
};

using Parameters = std::map<std::string, Mat>;  // sorted keys define checkpoint order
using GradientBundle = std::map<std::string, Mat>;

constexpr double kLnEps = 1e-5;

inline std::vector<std::string> parameter_group_names(const ModelConfig& cfg, int n_classes) {
    std::vector<std::string> names = {"emb.tok", "emb.pos"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "enc." + std::to_string(l) + ".";
        for (const char* s : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.b1",
                              "ffn.w2", "ffn.b2", "ln1.g", "ln1.b", "ln2.g", "ln2.b"})
            names.push_back(p + s);
    }
    for (const char* s : {"mlm.dense.w", "mlm.dense.b", "mlm.ln.g", "mlm.ln.b"})
        names.emplace_back(s);
    if (n_classes > 0) {
        names.emplace_back("cls.w");
        names.emplace_back("cls.b");
    }
    return names;
}

inline std::pair<std::size_t, std::size_t> group_shape(const ModelConfig& cfg, int n_classes,
                                                       const std::string& name) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    if (name == "emb.tok") return {static_cast<std::size_t>(cfg.vocab_size), d};
    if (name == "emb.pos") return {static_cast<std::size_t>(cfg.max_seq), d};
    if (name == "cls.w") return {d, static_cast<std::size_t>(n_classes)};
    if (name == "cls.b") return {1, static_cast<std::size_t>(n_classes)};
    if (name == "mlm.dense.w") return {d, d};
    if (name == "mlm.dense.b" || name == "mlm.ln.g" || name == "mlm.ln.b") return {1, d};
    auto ends_with = [&](const char* suf) {
        std::string s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("attn.wq") || ends_with("attn.wk") || ends_with("attn.wv") || ends_with("attn.wo"))
        return {d, d};
    if (ends_with("ffn.w1")) return {d, ff};
    if (ends_with("ffn.b1")) return {1, ff};
    if (ends_with("ffn.w2")) return {ff, d};
    if (ends_with("ffn.b2") || ends_with("ln1.g") || ends_with("ln1.b") || ends_with("ln2.g") ||
        ends_with("ln2.b"))
        return {1, d};
    throw std::runtime_error("unknown parameter group: " + name);
}

inline Parameters init_params(const ModelConfig& cfg, int n_classes, std::uint64_t seed) {
    cfg.validate();
    Parameters params;
    for (const auto& name : parameter_group_names(cfg, n_classes)) {
        auto [r, c] = group_shape(cfg, n_classes, name);
        Mat m(r, c);
        bool is_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
        bool is_bias = name.find(".b") != std::string::npos && !is_gain;
        if (is_gain) {
            for (double& v : m.a) v = 1.0;
        } else if (!is_bias) {
            StreamRng rng(derive_key(seed, "init", fnv1a64(name)));
            for (double& v : m.a) v = 0.02 * rng.next_gaussian();
        }
        params.emplace(name, std::move(m));
    }
    return params;
}

enum class Setup { full, partial, dp };
enum class Objective { mlm, classify };

inline const char* setup_name(Setup s) {
    switch (s) {
        case Setup::full: return "full";
        case Setup::partial: return "partial";
        case Setup::dp: return "dp";
    }
    return "?";
}

inline Setup parse_setup(const std::string& s) {
    if (s == "full") return Setup::full;
    if (s == "partial") return Setup::partial;
    if (s == "dp") return Setup::dp;
    throw std::runtime_error("unknown setup: " + s);
}

// The head groups participating in an objective's graph. The tied output
// projection of the masked-token head is emb.tok, which is an embedding
// group, not a head group; partial setups therefore keep it frozen.
inline std::set<std::string> head_groups(Objective obj) {
    if (obj == Objective::classify) return {"cls.w", "cls.b"};
    return {"mlm.dense.w", "mlm.dense.b", "mlm.ln.g", "mlm.ln.b"};
}

inline std::set<std::string> trainable_groups(const ModelConfig& cfg, int n_classes, Setup setup,
                                              Objective obj) {
    std::set<std::string> out;
    if (setup == Setup::full) {
        for (const auto& n : parameter_group_names(cfg, n_classes)) out.insert(n);
        // the idle head is not part of this objective's graph
        for (const auto& n : head_groups(obj == Objective::mlm ? Objective::classify
                                                               : Objective::mlm))
            out.erase(n);
        if (obj == Objective::mlm) {
            out.erase("cls.w");
            out.erase("cls.b");
        }
        return out;
    }
    std::string last = "enc." + std::to_string(cfg.n_layers - 1) + ".";
    for (const auto& n : parameter_group_names(cfg, n_classes))
        if (n.compare(0, last.size(), last) == 0) out.insert(n);
    for (const auto& n : head_groups(obj)) out.insert(n);
    return out;
}

struct Example {
    std::vector<int> ids;                // starts with CLS for classification
    std::vector<int> mask_positions;     // masked-token objective supervision
    std::vector<int> mlm_targets;        // original ids at mask_positions
    int label = -1;                      // classification target
    std::uint64_t noise_tag = 0;         // keys this example's dropout masks
};

// ---------------------------------------------------------------------------
// forward pass

namespace detail {

struct LnTrace {
    Mat xhat;                 // normalized pre-gain activations
    std::vector<double> rstd; // per-row 1/sqrt(var+eps)
};

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnTrace* trace) {
    Mat y(x.rows, x.cols);
    if (trace) {
        trace->xhat = Mat(x.rows, x.cols);
        trace->rstd.assign(x.rows, 0.0);
    }
    const std::size_t n = x.cols;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double d = xi[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        double* yi = y.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            double xhat = (xi[j] - mean) * rstd;
            if (trace) trace->xhat(i, j) = xhat;
            yi[j] = g.a[j] * xhat + b.a[j];
        }
        if (trace) trace->rstd[i] = rstd;
    }
    return y;
}

// dx for y = g*xhat + b given upstream dy
inline Mat layer_norm_backward(const Mat& dy, const LnTrace& t, const Mat& g, Mat& dg, Mat& db) {
    const std::size_t n = dy.cols;
    Mat dx(dy.rows, dy.cols);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const double* dyi = dy.row(i);
        const double* xh = t.xhat.row(i);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double dxhat = dyi[j] * g.a[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
            dg.a[j] += dyi[j] * xh[j];
            db.a[j] += dyi[j];
        }
        double inv_n = 1.0 / static_cast<double>(n);
        double* dxi = dx.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            double dxhat = dyi[j] * g.a[j];
            dxi[j] = t.rstd[i] * (dxhat - inv_n * sum_dxhat - xh[j] * inv_n * sum_dxhat_xhat);
        }
    }
    return dx;
}

struct DropoutCtx {
    bool enabled = false;
    double rate = 0.0;
    std::uint64_t base_key = 0;

    double keep_scale(std::uint64_t i, std::uint64_t j) const {
        if (!enabled || rate <= 0.0) return 1.0;
        std::uint64_t h = fnv1a64_u64(i, base_key);
        h = fnv1a64_u64(j, h);
        return keyed_uniform(h) >= rate ? 1.0 / (1.0 - rate) : 0.0;
    }
};

struct LayerTrace {
    Mat x_in;
    Mat q, k, v;
    std::vector<Mat> probs;        // per head, after softmax
    std::vector<Mat> drop_scale;   // per head, dropout keep/scale factors
    Mat ctx;                       // concatenated head outputs
    Mat res1;                      // x_in + attn projection
    LnTrace ln1;
    Mat x_mid;                     // ln1 output
    Mat ffn_pre;                   // pre-activation
    Mat ffn_act;                   // post-GELU
    Mat res2;
    LnTrace ln2;
};

struct EncoderTrace {
    std::vector<LayerTrace> layers;
    Mat x_out;
};

inline const Mat& P(const Parameters& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("missing parameter group: " + name);
    return it->second;
}

// full encoder stack over one sequence; trace may be null for inference
inline Mat run_encoder(const Parameters& params, const ModelConfig& cfg,
                       const std::vector<int>& ids, const DropoutCtx& attn_drop,
                       EncoderTrace* trace) {
    const std::size_t S = ids.size();
    if (S == 0) throw std::runtime_error("run_encoder: empty sequence");
    if (S > static_cast<std::size_t>(cfg.max_seq))
        throw std::runtime_error("run_encoder: sequence longer than max_seq");
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const int nh = cfg.n_heads;
    const std::size_t dh = d / static_cast<std::size_t>(nh);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    const Mat& tok_emb = P(params, "emb.tok");
    const Mat& pos_emb = P(params, "emb.pos");

    Mat x(S, d);
    for (std::size_t i = 0; i < S; ++i) {
        int id = ids[i];
        if (id < 0 || id >= cfg.vocab_size)
            throw std::runtime_error("run_encoder: token id out of range");
        const double* te = tok_emb.row(static_cast<std::size_t>(id));
        const double* pe = pos_emb.row(i);
        double* xi = x.row(i);
        for (std::size_t j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
    }

    std::vector<bool> is_pad(S);
    for (std::size_t i = 0; i < S; ++i) is_pad[i] = (ids[i] == tok::kPad);

    if (trace) trace->layers.resize(static_cast<std::size_t>(cfg.n_layers));

    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "enc." + std::to_string(l) + ".";
        LayerTrace local;
        LayerTrace& t = trace ? trace->layers[static_cast<std::size_t>(l)] : local;
        t.x_in = x;

        t.q = matmul(x, P(params, pre + "attn.wq"));
        t.k = matmul(x, P(params, pre + "attn.wk"));
        t.v = matmul(x, P(params, pre + "attn.wv"));

        t.probs.assign(static_cast<std::size_t>(nh), Mat());
        t.drop_scale.assign(static_cast<std::size_t>(nh), Mat());
        t.ctx = Mat(S, d);
        for (int h = 0; h < nh; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * dh;
            Mat scores(S, S);
            for (std::size_t i = 0; i < S; ++i) {
                const double* qi = t.q.row(i) + off;
                for (std::size_t j = 0; j < S; ++j) {
                    if (is_pad[j]) {
                        scores(i, j) = -1e30;  // padding keys never attend
                        continue;
                    }
                    const double* kj = t.k.row(j) + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    scores(i, j) = s * inv_sqrt_dh;
                }
            }
            for (std::size_t i = 0; i < S; ++i) softmax_row(scores.row(i), S);
            t.probs[static_cast<std::size_t>(h)] = scores;

            DropoutCtx hd = attn_drop;
            Mat scale;
            bool dropping = hd.enabled && hd.rate > 0.0;
            if (dropping) {
                hd.base_key = fnv1a64_u64(static_cast<std::uint64_t>(l) * 64 +
                                              static_cast<std::uint64_t>(h),
                                          attn_drop.base_key);
                scale = Mat(S, S);
                for (std::size_t i = 0; i < S; ++i)
                    for (std::size_t j = 0; j < S; ++j) scale(i, j) = hd.keep_scale(i, j);
                t.drop_scale[static_cast<std::size_t>(h)] = scale;
            }

            for (std::size_t i = 0; i < S; ++i) {
                double* ci = t.ctx.row(i) + off;
                for (std::size_t j = 0; j < S; ++j) {
                    double p = scores(i, j);
                    if (dropping) p *= scale(i, j);
                    if (p == 0.0) continue;
                    const double* vj = t.v.row(j) + off;
                    for (std::size_t c = 0; c < dh; ++c) ci[c] += p * vj[c];
                }
            }
        }

        Mat attn_out = matmul(t.ctx, P(params, pre + "attn.wo"));
        t.res1 = t.x_in;
        add_inplace(t.res1, attn_out);
        t.x_mid = layer_norm(t.res1, P(params, pre + "ln1.g"), P(params, pre + "ln1.b"),
                             trace ? &t.ln1 : nullptr);

        t.ffn_pre = matmul(t.x_mid, P(params, pre + "ffn.w1"));
        add_row_inplace(t.ffn_pre, P(params, pre + "ffn.b1"));
        t.ffn_act = Mat(t.ffn_pre.rows, t.ffn_pre.cols);
        for (std::size_t i = 0; i < t.ffn_pre.size(); ++i) t.ffn_act.a[i] = gelu(t.ffn_pre.a[i]);
        Mat ffn_out = matmul(t.ffn_act, P(params, pre + "ffn.w2"));
        add_row_inplace(ffn_out, P(params, pre + "ffn.b2"));

        t.res2 = t.x_mid;
        add_inplace(t.res2, ffn_out);
        x = layer_norm(t.res2, P(params, pre + "ln2.g"), P(params, pre + "ln2.b"),
                       trace ? &t.ln2 : nullptr);
    }

    if (trace) trace->x_out = x;
    return x;
}

struct MlmHeadTrace {
    Mat input;     // hidden rows at predicted positions
    Mat dense_pre; // before activation
    Mat dense_act;
    LnTrace ln;
    Mat normed;
};

// logits over vocab for the given rows of hidden state
inline Mat mlm_head_logits(const Parameters& params, const Mat& hidden_rows, MlmHeadTrace* trace) {
    Mat pre = matmul(hidden_rows, P(params, "mlm.dense.w"));
    add_row_inplace(pre, P(params, "mlm.dense.b"));
    Mat act(pre.rows, pre.cols);
    for (std::size_t i = 0; i < pre.size(); ++i) act.a[i] = gelu(pre.a[i]);
    Mat normed = layer_norm(act, P(params, "mlm.ln.g"), P(params, "mlm.ln.b"),
                            trace ? &trace->ln : nullptr);
    if (trace) {
        trace->input = hidden_rows;
        trace->dense_pre = pre;
        trace->dense_act = act;
        trace->normed = normed;
    }
    return matmul_nt(normed, P(params, "emb.tok"));  // tied output projection
}

}  // namespace detail

// Inference: raw vocabulary logits at each queried position.
inline Mat forward_mlm_logits(const Parameters& params, const ModelConfig& cfg,
                              const std::vector<int>& ids,
                              const std::vector<int>& mask_positions) {
    detail::DropoutCtx off;
    Mat hidden = detail::run_encoder(params, cfg, ids, off, nullptr);
    Mat rows(mask_positions.size(), static_cast<std::size_t>(cfg.d_model));
    for (std::size_t r = 0; r < mask_positions.size(); ++r) {
        int p = mask_positions[r];
        if (p < 0 || static_cast<std::size_t>(p) >= ids.size())
            throw std::runtime_error("forward_mlm: mask position out of range");
        for (std::size_t j = 0; j < rows.cols; ++j) rows(r, j) = hidden(static_cast<std::size_t>(p), j);
    }
    return detail::mlm_head_logits(params, rows, nullptr);
}

// Inference: distributions over the vocabulary at each queried position.
inline Mat forward_mlm(const Parameters& params, const ModelConfig& cfg,
                       const std::vector<int>& ids, const std::vector<int>& mask_positions) {
    Mat logits = forward_mlm_logits(params, cfg, ids, mask_positions);
    for (std::size_t i = 0; i < logits.rows; ++i) softmax_row(logits.row(i), logits.cols);
    return logits;
}

// Inference: class distribution from the first-position representation.
inline std::vector<double> forward_classify(const Parameters& params, const ModelConfig& cfg,
                                            const std::vector<int>& ids) {
    if (ids.empty() || ids[0] != tok::kCls)
        throw std::runtime_error("forward_classify: sequence must start with CLS");
    detail::DropoutCtx off;
    Mat hidden = detail::run_encoder(params, cfg, ids, off, nullptr);
    const Mat& w = detail::P(params, "cls.w");
    const Mat& b = detail::P(params, "cls.b");
    std::vector<double> logits(w.cols, 0.0);
    for (std::size_t j = 0; j < w.cols; ++j) {
        double s = b.a[j];
        for (std::size_t c = 0; c < w.rows; ++c) s += hidden(0, c) * w(c, j);
        logits[j] = s;
    }
    softmax_row(logits.data(), logits.size());
    return logits;
}

struct LossGrad {
    double loss = 0.0;
    GradientBundle grads;
};

namespace detail {

inline void accumulate(GradientBundle& bundle, const std::set<std::string>& trainable,
                       const std::string& name, Mat&& grad) {
    if (!trainable.count(name)) return;
    auto it = bundle.find(name);
    if (it == bundle.end())
        bundle.emplace(name, std::move(grad));
    else
        add_inplace(it->second, grad);
}

// backward through the encoder from d(hidden); writes parameter grads and
// stops descending once no trainable group lies deeper
inline void encoder_backward(const Parameters& params, const ModelConfig& cfg,
                             const std::vector<int>& ids, const EncoderTrace& trace,
                             Mat dx,  // gradient w.r.t. final hidden states
                             const std::set<std::string>& trainable, GradientBundle& grads) {
    const std::size_t S = ids.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const int nh = cfg.n_heads;
    const std::size_t dh = d / static_cast<std::size_t>(nh);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    bool need_embeddings = trainable.count("emb.tok") || trainable.count("emb.pos");
    int deepest_needed = need_embeddings ? 0 : cfg.n_layers;  // layer index to descend to
    if (!need_embeddings) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            std::string pre = "enc." + std::to_string(l) + ".";
            for (const auto& n : trainable)
                if (n.compare(0, pre.size(), pre) == 0) {
                    deepest_needed = std::min(deepest_needed, l);
                    break;
                }
        }
        if (deepest_needed == cfg.n_layers) return;  // nothing trainable in the stack
    }

    for (int l = cfg.n_layers - 1; l >= deepest_needed; --l) {
        const LayerTrace& t = trace.layers[static_cast<std::size_t>(l)];
        std::string pre = "enc." + std::to_string(l) + ".";
        bool last_needed = (l == deepest_needed) && !need_embeddings;

        Mat dg2(1, d), db2(1, d);
        Mat dres2 = layer_norm_backward(dx, t.ln2, P(params, pre + "ln2.g"), dg2, db2);
        accumulate(grads, trainable, pre + "ln2.g", std::move(dg2));
        accumulate(grads, trainable, pre + "ln2.b", std::move(db2));

        // res2 = x_mid + ffn_out
        Mat dffn_out = dres2;
        accumulate(grads, trainable, pre + "ffn.b2", col_sums(dffn_out));
        accumulate(grads, trainable, pre + "ffn.w2", matmul_tn(t.ffn_act, dffn_out));
        Mat dact = matmul_nt(dffn_out, P(params, pre + "ffn.w2"));
        for (std::size_t i = 0; i < dact.size(); ++i) dact.a[i] *= gelu_grad(t.ffn_pre.a[i]);
        accumulate(grads, trainable, pre + "ffn.b1", col_sums(dact));
        accumulate(grads, trainable, pre + "ffn.w1", matmul_tn(t.x_mid, dact));
        Mat dx_mid = matmul_nt(dact, P(params, pre + "ffn.w1"));
        add_inplace(dx_mid, dres2);  // residual branch

        Mat dg1(1, d), db1(1, d);
        Mat dres1 = layer_norm_backward(dx_mid, t.ln1, P(params, pre + "ln1.g"), dg1, db1);
        accumulate(grads, trainable, pre + "ln1.g", std::move(dg1));
        accumulate(grads, trainable, pre + "ln1.b", std::move(db1));

        // res1 = x_in + ctx*Wo
        Mat dattn_out = dres1;
        accumulate(grads, trainable, pre + "attn.wo", matmul_tn(t.ctx, dattn_out));
        Mat dctx = matmul_nt(dattn_out, P(params, pre + "attn.wo"));

        Mat dq(S, d), dk(S, d), dv(S, d);
        for (int h = 0; h < nh; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * dh;
            const Mat& probs = t.probs[static_cast<std::size_t>(h)];
            const Mat& scale = t.drop_scale[static_cast<std::size_t>(h)];
            bool dropped = scale.size() > 0;

            // dP' and dV from ctx_h = P' V_h
            Mat dP(S, S);
            for (std::size_t i = 0; i < S; ++i) {
                const double* dci = dctx.row(i) + off;
                for (std::size_t j = 0; j < S; ++j) {
                    double p_eff = probs(i, j) * (dropped ? scale(i, j) : 1.0);
                    const double* vj = t.v.row(j) + off;
                    double* dvj = dv.row(j) + off;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        s += dci[c] * vj[c];
                        dvj[c] += p_eff * dci[c];
                    }
                    dP(i, j) = s * (dropped ? scale(i, j) : 1.0);
                }
            }
            // softmax backward row-wise
            Mat dS(S, S);
            for (std::size_t i = 0; i < S; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < S; ++j) dot += dP(i, j) * probs(i, j);
                for (std::size_t j = 0; j < S; ++j)
                    dS(i, j) = (dP(i, j) - dot) * probs(i, j);
            }
            // scores = Q K^T / sqrt(dh)
            for (std::size_t i = 0; i < S; ++i) {
                double* dqi = dq.row(i) + off;
                for (std::size_t j = 0; j < S; ++j) {
                    double g = dS(i, j) * inv_sqrt_dh;
                    if (g == 0.0) continue;
                    const double* kj = t.k.row(j) + off;
                    const double* qi = t.q.row(i) + off;
                    double* dkj = dk.row(j) + off;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dqi[c] += g * kj[c];
                        dkj[c] += g * qi[c];
                    }
                }
            }
        }

        accumulate(grads, trainable, pre + "attn.wq", matmul_tn(t.x_in, dq));
        accumulate(grads, trainable, pre + "attn.wk", matmul_tn(t.x_in, dk));
        accumulate(grads, trainable, pre + "attn.wv", matmul_tn(t.x_in, dv));

        if (last_needed) break;  // dx below this layer is unused

        Mat dx_in = dres1;  // residual path
        Mat tmp = matmul_nt(dq, P(params, pre + "attn.wq"));
        add_inplace(dx_in, tmp);
        tmp = matmul_nt(dk, P(params, pre + "attn.wk"));
        add_inplace(dx_in, tmp);
        tmp = matmul_nt(dv, P(params, pre + "attn.wv"));
        add_inplace(dx_in, tmp);
        dx = std::move(dx_in);
    }

    if (need_embeddings) {
        if (trainable.count("emb.tok")) {
            Mat dtok(static_cast<std::size_t>(cfg.vocab_size), d);
            for (std::size_t i = 0; i < S; ++i) {
                double* row = dtok.row(static_cast<std::size_t>(ids[i]));
                const double* dxi = dx.row(i);
                for (std::size_t j = 0; j < d; ++j) row[j] += dxi[j];
            }
            accumulate(grads, trainable, "emb.tok", std::move(dtok));
        }
        if (trainable.count("emb.pos")) {
            Mat dpos(static_cast<std::size_t>(cfg.max_seq), d);
            for (std::size_t i = 0; i < S; ++i) {
                double* row = dpos.row(i);
                const double* dxi = dx.row(i);
                for (std::size_t j = 0; j < d; ++j) row[j] += dxi[j];
            }
            accumulate(grads, trainable, "emb.pos", std::move(dpos));
        }
    }
}

}  // namespace detail

// Loss and exact gradients for a single example. train_mode enables the
// configured dropout, keyed by (dropout_seed, example.noise_tag) so the same
// example sees the same noise regardless of batch composition.
inline LossGrad example_loss_and_grad(const Parameters& params, const ModelConfig& cfg,
                                      const Example& ex, Objective obj,
                                      const std::set<std::string>& trainable,
                                      std::uint64_t dropout_seed, bool train_mode) {
    detail::DropoutCtx attn_drop;
    attn_drop.enabled = train_mode;
    attn_drop.rate = cfg.dropout_attn;
    attn_drop.base_key = derive_key(dropout_seed, "attn", ex.noise_tag);

    detail::EncoderTrace trace;
    Mat hidden = detail::run_encoder(params, cfg, ex.ids, attn_drop, &trace);
    const std::size_t S = ex.ids.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);

    LossGrad out;
    Mat dhidden(S, d);

    if (obj == Objective::mlm) {
        if (ex.mask_positions.empty())
            throw std::runtime_error("loss_and_grad: example has no mask positions");
        if (ex.mask_positions.size() != ex.mlm_targets.size())
            throw std::runtime_error("loss_and_grad: mask/target length mismatch");
        const std::size_t P = ex.mask_positions.size();
        Mat rows(P, d);
        for (std::size_t r = 0; r < P; ++r) {
            int p = ex.mask_positions[r];
            if (p < 0 || static_cast<std::size_t>(p) >= S)
                throw std::runtime_error("loss_and_grad: mask position out of range");
            for (std::size_t j = 0; j < d; ++j) rows(r, j) = hidden(static_cast<std::size_t>(p), j);
        }
        detail::MlmHeadTrace head;
        Mat logits = detail::mlm_head_logits(params, rows, &head);
        Mat dlogits(P, logits.cols);
        double loss = 0.0;
        const double inv_p = 1.0 / static_cast<double>(P);
        for (std::size_t r = 0; r < P; ++r) {
            softmax_row(logits.row(r), logits.cols);
            int target = ex.mlm_targets[r];
            if (target < 0 || target >= cfg.vocab_size)
                throw std::runtime_error("loss_and_grad: target id out of range");
            loss -= std::log(std::max(logits(r, static_cast<std::size_t>(target)), 1e-300));
            for (std::size_t j = 0; j < logits.cols; ++j) dlogits(r, j) = logits(r, j) * inv_p;
            dlogits(r, static_cast<std::size_t>(target)) -= inv_p;
        }
        out.loss = loss * inv_p;

        // tied projection: logits = normed * emb.tok^T
        const Mat& emb = detail::P(params, "emb.tok");
        Mat dnormed = matmul(dlogits, emb);
        detail::accumulate(out.grads, trainable, "emb.tok", matmul_tn(dlogits, head.normed));

        Mat dg(1, d), db(1, d);
        Mat dact = detail::layer_norm_backward(dnormed, head.ln, detail::P(params, "mlm.ln.g"), dg, db);
        detail::accumulate(out.grads, trainable, "mlm.ln.g", std::move(dg));
        detail::accumulate(out.grads, trainable, "mlm.ln.b", std::move(db));
        for (std::size_t i = 0; i < dact.size(); ++i) dact.a[i] *= gelu_grad(head.dense_pre.a[i]);
        detail::accumulate(out.grads, trainable, "mlm.dense.b", col_sums(dact));
        detail::accumulate(out.grads, trainable, "mlm.dense.w", matmul_tn(head.input, dact));
        Mat drows = matmul_nt(dact, detail::P(params, "mlm.dense.w"));
        for (std::size_t r = 0; r < P; ++r) {
            int p = ex.mask_positions[r];
            double* dst = dhidden.row(static_cast<std::size_t>(p));
            const double* src = drows.row(r);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    } else {
        if (ex.ids.empty() || ex.ids[0] != tok::kCls)
            throw std::runtime_error("loss_and_grad: classification sequence must start with CLS");
        const Mat& w = detail::P(params, "cls.w");
        const Mat& b = detail::P(params, "cls.b");
        const std::size_t C = w.cols;
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= C)
            throw std::runtime_error("loss_and_grad: label out of range");

        // classifier-input dropout on the first-position representation
        std::vector<double> scale(d, 1.0);
        if (train_mode && cfg.dropout_classifier > 0.0) {
            std::uint64_t base = derive_key(dropout_seed, "clsdrop", ex.noise_tag);
            for (std::size_t j = 0; j < d; ++j) {
                scale[j] = keyed_uniform(fnv1a64_u64(j, base)) >= cfg.dropout_classifier
                               ? 1.0 / (1.0 - cfg.dropout_classifier)
                               : 0.0;
            }
        }
        std::vector<double> x0(d);
        for (std::size_t j = 0; j < d; ++j) x0[j] = hidden(0, j) * scale[j];

        std::vector<double> logits(C);
        for (std::size_t j = 0; j < C; ++j) {
            double s = b.a[j];
            for (std::size_t c = 0; c < d; ++c) s += x0[c] * w(c, j);
            logits[j] = s;
        }
        softmax_row(logits.data(), C);
        out.loss = -std::log(std::max(logits[static_cast<std::size_t>(ex.label)], 1e-300));

        std::vector<double> dlogits(C);
        for (std::size_t j = 0; j < C; ++j) dlogits[j] = logits[j];
        dlogits[static_cast<std::size_t>(ex.label)] -= 1.0;

        if (trainable.count("cls.b")) {
            Mat db_(1, C);
            for (std::size_t j = 0; j < C; ++j) db_.a[j] = dlogits[j];
            detail::accumulate(out.grads, trainable, "cls.b", std::move(db_));
        }
        if (trainable.count("cls.w")) {
            Mat dw(d, C);
            for (std::size_t c = 0; c < d; ++c)
                for (std::size_t j = 0; j < C; ++j) dw(c, j) = x0[c] * dlogits[j];
            detail::accumulate(out.grads, trainable, "cls.w", std::move(dw));
        }
        double* dh0 = dhidden.row(0);
        for (std::size_t c = 0; c < d; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < C; ++j) s += w(c, j) * dlogits[j];
            dh0[c] = s * scale[c];
        }
    }

    detail::encoder_backward(params, cfg, ex.ids, trace, std::move(dhidden), trainable, out.grads);
    return out;
}

inline std::vector<LossGrad> per_example_grads(const Parameters& params, const ModelConfig& cfg,
                                               const std::vector<Example>& batch, Objective obj,
                                               const std::set<std::string>& trainable,
                                               std::uint64_t dropout_seed, bool train_mode = true,
                                               int workers = 1) {
    if (batch.empty()) throw std::runtime_error("per_example_grads: empty batch");
    std::vector<LossGrad> out(batch.size());
    parallel_for_indexed(batch.size(), workers, [&](std::size_t i) {
        out[i] = example_loss_and_grad(params, cfg, batch[i], obj, trainable, dropout_seed,
                                       train_mode);
    });
    return out;
}

// Batch loss/gradient: index-ordered mean of the per-example results, the
// same code path microbatching uses, so the two agree bit for bit.
inline LossGrad loss_and_grad(const Parameters& params, const ModelConfig& cfg,
                              const std::vector<Example>& batch, Objective obj,
                              const std::set<std::string>& trainable, std::uint64_t dropout_seed,
                              bool train_mode = true, int workers = 1) {
    auto per = per_example_grads(params, cfg, batch, obj, trainable, dropout_seed, train_mode,
                                 workers);
    LossGrad out;
    const double inv_n = 1.0 / static_cast<double>(per.size());
    for (const auto& lg : per) out.loss += lg.loss;
    out.loss *= inv_n;
    for (auto& lg : per) {
        for (auto& [name, g] : lg.grads) {
            auto it = out.grads.find(name);
            if (it == out.grads.end()) {
                Mat zero(g.rows, g.cols);
                it = out.grads.emplace(name, std::move(zero)).first;
            }
            add_inplace(it->second, g);
        }
    }
    for (auto& [name, g] : out.grads) scale_inplace(g, inv_n);
    return out;
}

}  // namespace entaudit
