#include "dit/dit.hpp"

#include <cmath>

namespace l3d::dit {

double DiTConfig::shift_alpha() const {
    return std::sqrt(static_cast<double>(latent_tokens) * latent_dim / base_dim);
}

void DiTConfig::validate() const {
    if (depth < 1 || head_depth < 0) throw io::ConfigError("dit: bad depth");
    if (width < 1 || width % n_heads != 0)
        throw io::ConfigError("dit: width must be a positive multiple of heads");
    if (head_width < 1 || head_width % head_heads != 0)
        throw io::ConfigError("dit: head width must be a positive multiple of head heads");
    if (latent_tokens < 1 || latent_dim < 1) throw io::ConfigError("dit: bad latent shape");
    if (time_features < 1) throw io::ConfigError("dit: time_features must be >= 1");
    if (base_dim < 1) throw io::ConfigError("dit: base_dim must be >= 1");
    if (n_classes < 0) throw io::ConfigError("dit: n_classes must be >= 0");
    if (cfg_scale < 0.0) throw io::ConfigError("dit: cfg_scale must be >= 0");
    if (sample_steps < 1) throw io::ConfigError("dit: sample_steps must be >= 1");
    if (ema_decay < 0.0 || ema_decay >= 1.0)
        throw io::ConfigError("dit: ema_decay must be in [0, 1)");
}

void apply_size_preset(DiTConfig& cfg, const std::string& size) {
    if (size == "S") {
        cfg.depth = 12;
        cfg.width = 384;
        cfg.n_heads = 6;
    } else if (size == "B") {
        cfg.depth = 12;
        cfg.width = 768;
        cfg.n_heads = 12;
    } else if (size == "XL") {
        cfg.depth = 28;
        cfg.width = 1152;
        cfg.n_heads = 16;
    } else if (size != "custom") {
        throw io::ConfigError("dit: unknown size preset '" + size + "'");
    }
    if (size != "custom") {
        cfg.head_depth = 2;
        cfg.head_width = 2048;
        cfg.head_heads = 16;
    }
}

DiTConfig DiTConfig::from_config(const io::Config& cfg) {
    DiTConfig c;
    apply_size_preset(c, cfg.get_string("dit.size", "custom"));
    c.depth = static_cast<int>(cfg.get_int("dit.depth", c.depth));
    c.width = static_cast<int>(cfg.get_int("dit.width", c.width));
    c.n_heads = static_cast<int>(cfg.get_int("dit.heads", c.n_heads));
    c.mlp_ratio = static_cast<int>(cfg.get_int("dit.mlp_ratio", c.mlp_ratio));
    c.head_depth = static_cast<int>(cfg.get_int("dit.head_depth", c.head_depth));
    c.head_width = static_cast<int>(cfg.get_int("dit.head_width", c.head_width));
    c.head_heads = static_cast<int>(cfg.get_int("dit.head_heads", c.head_heads));
    c.latent_tokens = static_cast<int>(cfg.get_int("dit.latent_tokens", c.latent_tokens));
    c.latent_dim = static_cast<int>(cfg.get_int("dit.latent_dim", c.latent_dim));
    c.time_features = static_cast<int>(cfg.get_int("dit.time_features", c.time_features));
    c.base_dim = static_cast<int>(cfg.get_int("dit.base_dim", c.base_dim));
    c.n_classes = static_cast<int>(cfg.get_int("dit.n_classes", c.n_classes));
    c.cfg_scale = cfg.get_double("dit.cfg_scale", c.cfg_scale);
    c.sample_steps = static_cast<int>(cfg.get_int("dit.sample_steps", c.sample_steps));
    c.ema_decay = cfg.get_double("dit.ema_decay", c.ema_decay);
    c.validate();
    return c;
}

void DiTConfig::echo(io::Config& cfg) const {
    cfg.set("dit.depth", std::to_string(depth));
    cfg.set("dit.width", std::to_string(width));
    cfg.set("dit.heads", std::to_string(n_heads));
    cfg.set("dit.mlp_ratio", std::to_string(mlp_ratio));
    cfg.set("dit.head_depth", std::to_string(head_depth));
    cfg.set("dit.head_width", std::to_string(head_width));
    cfg.set("dit.head_heads", std::to_string(head_heads));
    cfg.set("dit.latent_tokens", std::to_string(latent_tokens));
    cfg.set("dit.latent_dim", std::to_string(latent_dim));
    cfg.set("dit.time_features", std::to_string(time_features));
    cfg.set("dit.base_dim", std::to_string(base_dim));
    cfg.set("dit.n_classes", std::to_string(n_classes));
    cfg.set("dit.cfg_scale", std::to_string(cfg_scale));
    cfg.set("dit.sample_steps", std::to_string(sample_steps));
    cfg.set("dit.ema_decay", std::to_string(ema_decay));
}

namespace {
double shift_with_alpha(double t, double alpha) {
    if (t < 0.0 || t > 1.0)
        throw std::invalid_argument("timestep_shift: t outside [0, 1]");
    return alpha * t / (1.0 + (alpha - 1.0) * t);
}
double check_alpha(std::int64_t n_tokens, std::int64_t dim, std::int64_t base) {
    if (n_tokens < 1 || dim < 1 || base < 1)
        throw std::invalid_argument("timestep_shift: dimensions must be positive");
    return std::sqrt(static_cast<double>(n_tokens) * static_cast<double>(dim) /
                     static_cast<double>(base));
}
}  // namespace

double timestep_shift(double t_n, std::int64_t n_tokens, std::int64_t dim, std::int64_t base) {
    return shift_with_alpha(t_n, check_alpha(n_tokens, dim, base));
}

double timestep_shift_inverse(double t_m, std::int64_t n_tokens, std::int64_t dim,
                              std::int64_t base) {
    // Inverse of t_m = a t / (1 + (a-1) t): t = t_m / (a - (a-1) t_m).
    const double alpha = check_alpha(n_tokens, dim, base);
    if (t_m < 0.0 || t_m > 1.0)
        throw std::invalid_argument("timestep_shift_inverse: t outside [0, 1]");
    return t_m / (alpha - (alpha - 1.0) * t_m);
}

ConditionTag tag_for_visible_count(int n_visible) {
    if (n_visible < 0) throw std::invalid_argument("negative visible count");
    if (n_visible == 0) return ConditionTag::Uncond;
    if (n_visible == 1) return ConditionTag::SingleView;
    return ConditionTag::SparseView;
}

std::string to_string(ConditionTag tag) {
    switch (tag) {
        case ConditionTag::Uncond: return "uncond";
        case ConditionTag::SingleView: return "single_view";
        case ConditionTag::SparseView: return "sparse_view";
    }
    return "uncond";
}

}  // namespace l3d::dit
