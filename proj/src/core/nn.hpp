#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace l3d::nn {

using ad::Mat;
using ad::Var;

struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
struct ParamStore {
    std::map<std::string, Mat<T>> params;

    bool has(const std::string& name) const { return params.count(name) > 0; }

    Mat<T>& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw StateError("unknown parameter: " + name);
        return it->second;
    }
    const Mat<T>& at(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw StateError("unknown parameter: " + name);
        return it->second;
    }

    Mat<T>& create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        if (has(name)) throw StateError("duplicate parameter: " + name);
        return params[name] = Mat<T>::Zero(rows, cols);
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, value] : params) out.params[name] = value.template cast<U>();
        return out;
    }

    double global_norm() const {
        double sq = 0.0;
        for (const auto& [name, value] : params) sq += value.template cast<double>().squaredNorm();
        return std::sqrt(sq);
    }
};

// Gaussian init with the given std; biases stay zero (create separately).
template <class T>
void init_gaussian(Mat<T>& m, Rng& rng, double std_dev) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = static_cast<T>(rng.normal() * std_dev);
}

template <class T>
void init_linear(ParamStore<T>& store, const std::string& prefix, Eigen::Index in,
                 Eigen::Index out, Rng& rng, double std_scale = 1.0) {
    auto& w = store.create(prefix + ".w", in, out);
    init_gaussian(w, rng, std_scale / std::sqrt(static_cast<double>(in)));
    store.create(prefix + ".b", 1, out);
}

// Per-forward context: binds parameters into the tape once each and records
// node ids so gradients can be read back after the reverse sweep.
template <class T>
struct Ctx {
    ad::Tape<T>& tape;
    const ParamStore<T>& store;
    bool train = true;
    std::map<std::string, int> bindings;

    Var<T> p(const std::string& name) {
        auto it = bindings.find(name);
        if (it != bindings.end()) return {&tape, it->second};
        Var<T> v = ad::leaf(tape, store.at(name), train);
        bindings.emplace(name, v.id);
        return v;
    }

    Var<T> linear(Var<T> x, const std::string& prefix) {
        return ad::linear(x, p(prefix + ".w"), p(prefix + ".b"));
    }

    void collect_grads(std::map<std::string, Mat<T>>& grads) const {
        for (const auto& [name, id] : bindings) {
            auto it = grads.find(name);
            if (it == grads.end())
                grads[name] = tape.grad(id);
            else
                it->second += tape.grad(id);
        }
    }
};

// Pre-norm transformer block; layer norms carry no affine parameters (the
// adjacent linears absorb them).
struct BlockConfig {
    int n_heads = 4;
    int mlp_ratio = 4;
};

template <class T>
void init_transformer_block(ParamStore<T>& store, const std::string& prefix, Eigen::Index d,
                            const BlockConfig& cfg, Rng& rng) {
    init_linear(store, prefix + ".q", d, d, rng);
    init_linear(store, prefix + ".k", d, d, rng);
    init_linear(store, prefix + ".v", d, d, rng);
    init_linear(store, prefix + ".o", d, d, rng);
    init_linear(store, prefix + ".mlp1", d, d * cfg.mlp_ratio, rng);
    init_linear(store, prefix + ".mlp2", d * cfg.mlp_ratio, d, rng);
}

template <class T>
Var<T> transformer_block(Ctx<T>& ctx, Var<T> x, const std::string& prefix,
                         const BlockConfig& cfg,
                         const std::vector<ad::RopePos>* rope_pos = nullptr) {
    Var<T> h = ad::layernorm_rows(x);
    Var<T> q = ctx.linear(h, prefix + ".q");
    Var<T> k = ctx.linear(h, prefix + ".k");
    Var<T> v = ctx.linear(h, prefix + ".v");
    if (rope_pos) {
        q = ad::rope2d(q, *rope_pos, cfg.n_heads);
        k = ad::rope2d(k, *rope_pos, cfg.n_heads);
    }
    Var<T> a = ad::attention(q, k, v, cfg.n_heads);
    x = ad::add(x, ctx.linear(a, prefix + ".o"));

    Var<T> h2 = ad::layernorm_rows(x);
    Var<T> m = ctx.linear(ad::gelu(ctx.linear(h2, prefix + ".mlp1")), prefix + ".mlp2");
    return ad::add(x, m);
}

// adaLN-style modulated block: a conditioning vector produces per-channel
// shift/scale/gate pairs for the attention and MLP branches.
template <class T>
void init_modulated_block(ParamStore<T>& store, const std::string& prefix, Eigen::Index d,
                          Eigen::Index cond_dim, const BlockConfig& cfg, Rng& rng) {
    init_transformer_block(store, prefix, d, cfg, rng);
    init_linear(store, prefix + ".mod1", cond_dim, d, rng);
    // Zero-initialized final projection: blocks start as identity.
    init_linear(store, prefix + ".mod2", d, 6 * d, rng, 0.0);
}

template <class T>
Var<T> modulated_block(Ctx<T>& ctx, Var<T> x, Var<T> cond, const std::string& prefix,
                       const BlockConfig& cfg) {
    const Eigen::Index d = x.cols();
    Var<T> mod = ctx.linear(ad::gelu(ctx.linear(cond, prefix + ".mod1")), prefix + ".mod2");
    Var<T> shift1 = ad::slice_cols(mod, 0, d);
    Var<T> scale1 = ad::slice_cols(mod, d, d);
    Var<T> gate1 = ad::slice_cols(mod, 2 * d, d);
    Var<T> shift2 = ad::slice_cols(mod, 3 * d, d);
    Var<T> scale2 = ad::slice_cols(mod, 4 * d, d);
    Var<T> gate2 = ad::slice_cols(mod, 5 * d, d);

    Var<T> h = ad::layernorm_rows(x);
    h = ad::row_broadcast_add(ad::row_broadcast_mul(h, ad::add_scalar(scale1, T(1))), shift1);
    Var<T> q = ctx.linear(h, prefix + ".q");
    Var<T> k = ctx.linear(h, prefix + ".k");
    Var<T> v = ctx.linear(h, prefix + ".v");
    Var<T> a = ctx.linear(ad::attention(q, k, v, cfg.n_heads), prefix + ".o");
    x = ad::add(x, ad::row_broadcast_mul(a, gate1));

    Var<T> h2 = ad::layernorm_rows(x);
    h2 = ad::row_broadcast_add(ad::row_broadcast_mul(h2, ad::add_scalar(scale2, T(1))), shift2);
    Var<T> m = ctx.linear(ad::gelu(ctx.linear(h2, prefix + ".mlp1")), prefix + ".mlp2");
    return ad::add(x, ad::row_broadcast_mul(m, gate2));
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

using GradMap = std::map<std::string, Mat<float>>;

// Returns the pre-clip global norm; grads are rescaled in place when needed.
inline double clip_grad_norm(GradMap& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float factor = static_cast<float>(max_norm / norm);
        for (auto& [name, g] : grads) g *= factor;
    }
    return norm;
}

// Adam with decoupled weight decay.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t step_count = 0;
    std::map<std::string, Mat<float>> m, v;

    void step(ParamStore<float>& store, const GradMap& grads, double lr) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (const auto& [name, g] : grads) {
            Mat<float>& p = store.at(name);
            auto& mm = m.try_emplace(name, Mat<float>::Zero(p.rows(), p.cols())).first->second;
            auto& vv = v.try_emplace(name, Mat<float>::Zero(p.rows(), p.cols())).first->second;
            mm = static_cast<float>(beta1) * mm + static_cast<float>(1.0 - beta1) * g;
            vv = static_cast<float>(beta2) * vv +
                 static_cast<float>(1.0 - beta2) * g.cwiseProduct(g);
            const Mat<float> mhat = mm / static_cast<float>(bc1);
            const Mat<float> vhat = vv / static_cast<float>(bc2);
            if (weight_decay > 0.0) p -= static_cast<float>(lr * weight_decay) * p;
            p -= static_cast<float>(lr) *
                 Mat<float>(mhat.array() / (vhat.array().sqrt() + static_cast<float>(eps)));
        }
    }
};

// shadow <- decay * shadow + (1 - decay) * params, elementwise.
inline void ema_update(ParamStore<float>& shadow, const ParamStore<float>& params, double decay) {
    for (const auto& [name, p] : params.params) {
        auto it = shadow.params.find(name);
        if (it == shadow.params.end()) {
            shadow.params[name] = p;
            continue;
        }
        if (it->second.rows() != p.rows() || it->second.cols() != p.cols())
            throw ad::ShapeError("ema_update: shape mismatch for " + name);
        it->second = static_cast<float>(decay) * it->second +
                     static_cast<float>(1.0 - decay) * p;
    }
}

}  // namespace l3d::nn
