#pragma once

#include <optional>
#include <string>

#include "core/nn.hpp"
#include "io/config.hpp"

namespace l3d::dit {

using ad::Mat;
using ad::Var;

struct DiTConfig {
    int depth = 4;
    int width = 192;
    int n_heads = 4;
    int mlp_ratio = 4;
    int head_depth = 2;
    int head_width = 256;
    int head_heads = 4;
    int latent_tokens = 64;  // m, must match the autoencoder
    int latent_dim = 128;    // d, must match the autoencoder
    int time_features = 64;  // Gaussian Fourier feature pairs
    int base_dim = 4096;     // D in the schedule shift
    int n_classes = 0;       // stage-1 label table size; 0 disables labels
    double cfg_scale = 2.0;
    int sample_steps = 50;
    double ema_decay = 0.9995;

    double shift_alpha() const;
    void validate() const;
    static DiTConfig from_config(const io::Config& cfg);
    void echo(io::Config& cfg) const;
};

// Named presets from the reference scaling table ("S", "B", "XL"); anything
// else leaves the explicitly configured sizes untouched.
void apply_size_preset(DiTConfig& cfg, const std::string& size);

// Dimension-dependent noise schedule shift:
// t_m = alpha * t_n / (1 + (alpha - 1) * t_n), alpha = sqrt(N * M / D).
double timestep_shift(double t_n, std::int64_t n_tokens, std::int64_t dim, std::int64_t base);
double timestep_shift_inverse(double t_m, std::int64_t n_tokens, std::int64_t dim,
                              std::int64_t base);

enum class ConditionTag { Uncond, SingleView, SparseView };

ConditionTag tag_for_visible_count(int n_visible);
std::string to_string(ConditionTag tag);

struct ConditionTokens {
    Mat<float> tokens;  // m x d, from the frozen autoencoder
    ConditionTag tag = ConditionTag::Uncond;
    std::optional<int> label;
};

// Z_t = (1 - t) * Z0 + t * eps; the target velocity eps - Z0 is t-free.
template <class T>
Mat<T> fm_interpolate(const Mat<T>& z0, const Mat<T>& eps, double t) {
    if (z0.rows() != eps.rows() || z0.cols() != eps.cols())
        throw ad::ShapeError("fm_interpolate: shape mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("fm_interpolate: t outside [0, 1]");
    return static_cast<T>(1.0 - t) * z0 + static_cast<T>(t) * eps;
}

template <class T>
class DiTModel {
public:
    DiTConfig cfg;
    nn::ParamStore<T> params;

    static DiTModel init(const DiTConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        DiTModel model;
        model.cfg = cfg;
        Rng rng(seed);
        const int w = cfg.width, hw = cfg.head_width;

        nn::init_linear(model.params, "in", cfg.latent_dim, w, rng);
        auto& pos = model.params.create("pos", 2 * cfg.latent_tokens, w);
        nn::init_gaussian(pos, rng, 0.02);

        // Frozen Gaussian Fourier frequencies for the time embedding.
        auto& freq = model.params.create("time.freq", 1, cfg.time_features);
        nn::init_gaussian(freq, rng, 10.0);
        nn::init_linear(model.params, "time.mlp1", 2 * cfg.time_features, w, rng);
        nn::init_linear(model.params, "time.mlp2", w, w, rng);
        if (cfg.n_classes > 0) {
            auto& table = model.params.create("label.table", cfg.n_classes, w);
            nn::init_gaussian(table, rng, 0.02);
        }

        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.depth; ++i)
            nn::init_modulated_block(model.params, "block" + std::to_string(i), w, w, bc, rng);
        nn::init_linear(model.params, "head.in", w, hw, rng);
        const nn::BlockConfig hc{cfg.head_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.head_depth; ++i)
            nn::init_modulated_block(model.params, "head.block" + std::to_string(i), hw, w, hc,
                                     rng);
        // Zero-initialized output: the model starts predicting zero velocity.
        nn::init_linear(model.params, "head.out", hw, cfg.latent_dim, rng, 0.0);
        return model;
    }

    bool has_label_table() const { return params.has("label.table"); }

    // Modulation vector: MLP over frozen Fourier features of t, plus the
    // label row during stage 1.
    Var<T> condition_vector(nn::Ctx<T>& ctx, double t, std::optional<int> label) const {
        const Mat<T>& freq = ctx.store.at("time.freq");
        Mat<T> feats(1, 2 * cfg.time_features);
        for (int j = 0; j < cfg.time_features; ++j) {
            const double phase = 2.0 * M_PI * static_cast<double>(freq(0, j)) * t;
            feats(0, j) = static_cast<T>(std::cos(phase));
            feats(0, cfg.time_features + j) = static_cast<T>(std::sin(phase));
        }
        Var<T> emb = ctx.linear(ad::gelu(ctx.linear(ad::constant(ctx.tape, std::move(feats)),
                                                    "time.mlp1")),
                                "time.mlp2");
        if (label) {
            if (!ctx.store.has("label.table"))
                throw nn::StateError("label conditioning requested but no label table exists");
            if (*label < 0 || *label >= static_cast<int>(ctx.store.at("label.table").rows()))
                throw std::invalid_argument("label out of range");
            emb = ad::add(emb, ad::slice_rows(ctx.p("label.table"), *label, 1));
        }
        return emb;
    }

    // Condition tokens occupy positions [0, m), noisy latents [m, 2m); the
    // velocity is read back from the latent positions.
    Var<T> velocity(nn::Ctx<T>& ctx, Var<T> z_t, Var<T> cond_tokens, double t,
                    std::optional<int> label) const {
        if (z_t.rows() != cfg.latent_tokens || z_t.cols() != cfg.latent_dim)
            throw ad::ShapeError("velocity: latent shape mismatch");
        if (cond_tokens.rows() != cfg.latent_tokens || cond_tokens.cols() != cfg.latent_dim)
            throw ad::ShapeError("velocity: condition shape mismatch");
        if (t < 0.0 || t > 1.0) throw std::invalid_argument("velocity: t outside [0, 1]");

        Var<T> cond = condition_vector(ctx, t, label);
        Var<T> x = ctx.linear(ad::concat_rows<T>({cond_tokens, z_t}), "in");
        x = ad::add(x, ctx.p("pos"));
        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.depth; ++i)
            x = nn::modulated_block(ctx, x, cond, "block" + std::to_string(i), bc);
        x = ctx.linear(ad::layernorm_rows(x), "head.in");
        const nn::BlockConfig hc{cfg.head_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.head_depth; ++i)
            x = nn::modulated_block(ctx, x, cond, "head.block" + std::to_string(i), hc);
        Var<T> out = ctx.linear(ad::layernorm_rows(x), "head.out");
        return ad::slice_rows(out, cfg.latent_tokens, cfg.latent_tokens);
    }

    // E || v(Z_t, t, c) - (eps - Z0) ||^2 with t drawn uniform then pushed
    // through the schedule shift; deterministic in the rng state.
    Var<T> fm_loss(nn::Ctx<T>& ctx, const Mat<T>& z0, const ConditionTokens& cond,
                   Rng& rng) const {
        const double t_n = rng.uniform();
        const double t = timestep_shift(t_n, cfg.latent_tokens, cfg.latent_dim, cfg.base_dim);
        Mat<T> eps(z0.rows(), z0.cols());
        for (Eigen::Index r = 0; r < eps.rows(); ++r)
            for (Eigen::Index c = 0; c < eps.cols(); ++c)
                eps(r, c) = static_cast<T>(rng.normal());
        Mat<T> z_t = fm_interpolate(z0, eps, t);
        Var<T> v = velocity(ctx, ad::constant(ctx.tape, std::move(z_t)),
                            ad::constant(ctx.tape, Mat<T>(cond.tokens.template cast<T>())), t,
                            cond.label);
        Var<T> target = ad::constant(ctx.tape, Mat<T>(eps - z0));
        return ad::mse(v, target);
    }

    // Euler integration from t=1 down to t=0 on the shifted grid, with
    // classifier-free guidance against a pose-only unconditional branch.
    Mat<T> sample(const ConditionTokens& cond, const ConditionTokens& uncond, int steps,
                  double cfg_scale, std::uint64_t seed) const {
        if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
        if (uncond.tag != ConditionTag::Uncond)
            throw std::invalid_argument("sample: guidance branch must carry the uncond tag");
        Rng rng(seed);
        Mat<T> z(cfg.latent_tokens, cfg.latent_dim);
        for (Eigen::Index r = 0; r < z.rows(); ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) = static_cast<T>(rng.normal());

        auto shifted = [&](int i) {
            return timestep_shift(static_cast<double>(i) / steps, cfg.latent_tokens,
                                  cfg.latent_dim, cfg.base_dim);
        };
        for (int i = steps; i >= 1; --i) {
            const double t = shifted(i);
            const double dt = t - shifted(i - 1);
            Mat<T> v = eval_velocity(z, cond, t);
            if (cfg_scale != 1.0 && cond.tag != ConditionTag::Uncond) {
                Mat<T> vu = eval_velocity(z, uncond, t);
                v = vu + static_cast<T>(cfg_scale) * (v - vu);
            }
            z -= static_cast<T>(dt) * v;
        }
        return z;
    }

private:
    Mat<T> eval_velocity(const Mat<T>& z, const ConditionTokens& cond, double t) const {
        ad::Tape<T> tape;
        nn::Ctx<T> ctx{tape, params, false};
        Var<T> v = velocity(ctx, ad::constant(tape, z),
                            ad::constant(tape, Mat<T>(cond.tokens.template cast<T>())), t,
                            cond.label);
        return v.val();
    }
};

}  // namespace l3d::dit
