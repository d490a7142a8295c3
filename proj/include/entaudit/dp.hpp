#pragma once

// Differentially private gradient processing: per-example L2 clipping
// (whole-bundle or per-group) and seeded Gaussian noise, aggregated at
// microbatch granularity.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "entaudit/model.hpp"
#include "entaudit/rng.hpp"

namespace entaudit {

enum class ClipMode { global, per_layer };

struct DpConfig {
    double clip_norm = 10.0;          // may be +inf for the degenerate no-clip mode
    double noise_multiplier = 0.5;
    double delta = 0.0;               // 0 means "derive as 1/#train at run time"
    ClipMode clip_mode = ClipMode::global;

    void validate() const {
        if (!(clip_norm > 0.0)) throw std::runtime_error("DpConfig: clip_norm must be positive");
        if (noise_multiplier < 0.0)
            throw std::runtime_error("DpConfig: noise_multiplier must be non-negative");
        if (delta < 0.0 || delta >= 1.0) throw std::runtime_error("DpConfig: delta must be in [0,1)");
    }
};

inline ClipMode parse_clip_mode(const std::string& s) {
    if (s == "global") return ClipMode::global;
    if (s == "per_layer") return ClipMode::per_layer;
    throw std::runtime_error("unknown clip_mode: " + s);
}

inline const char* clip_mode_name(ClipMode m) {
    return m == ClipMode::global ? "global" : "per_layer";
}

// Scales gradients so the L2 norm (of the whole bundle, or of each group)
// never exceeds C. Scaling by min(1, C/norm) keeps the bound exact.
inline GradientBundle clip(const GradientBundle& bundle, double C, ClipMode mode) {
    if (!(C > 0.0)) throw std::runtime_error("clip: C must be positive");
    GradientBundle out = bundle;
    for (const auto& [name, g] : out)
        if (!all_finite(g)) throw std::runtime_error("clip: non-finite gradient in group " + name);

    if (mode == ClipMode::global) {
        double norm_sq = 0.0;
        for (const auto& [name, g] : out) norm_sq += frob_norm_sq(g);
        double norm = std::sqrt(norm_sq);
        if (std::isfinite(C) && norm > C) {
            double s = C / norm;
            for (auto& [name, g] : out) scale_inplace(g, s);
        }
    } else {
        for (auto& [name, g] : out) {
            double norm = std::sqrt(frob_norm_sq(g));
            if (std::isfinite(C) && norm > C) scale_inplace(g, C / norm);
        }
    }
    return out;
}

// (sum of clipped per-example gradients + Gaussian noise) / batch size.
// Noise is drawn per group from a counter stream keyed by (noise_seed,
// group name) so results do not depend on worker layout.
inline GradientBundle privatize(const std::vector<GradientBundle>& per_example,
                                const DpConfig& dp, std::uint64_t noise_seed) {
    if (per_example.empty()) throw std::runtime_error("privatize: empty microbatch list");
    dp.validate();

    GradientBundle acc;
    for (const auto& bundle : per_example) {
        GradientBundle clipped = clip(bundle, dp.clip_norm, dp.clip_mode);
        for (auto& [name, g] : clipped) {
            auto it = acc.find(name);
            if (it == acc.end()) {
                Mat zero(g.rows, g.cols);
                it = acc.emplace(name, std::move(zero)).first;
            }
            add_inplace(it->second, g);
        }
    }

    if (dp.noise_multiplier > 0.0) {
        if (!std::isfinite(dp.clip_norm))
            throw std::runtime_error("privatize: noise requires a finite clip_norm");
        const double stddev = dp.noise_multiplier * dp.clip_norm;
        for (auto& [name, g] : acc) {
            StreamRng rng(derive_key(noise_seed, "dpnoise", fnv1a64(name)));
            for (double& v : g.a) v += stddev * rng.next_gaussian();
        }
    }

    const double inv_b = 1.0 / static_cast<double>(per_example.size());
    for (auto& [name, g] : acc) scale_inplace(g, inv_b);
    return acc;
}

}  // namespace entaudit
