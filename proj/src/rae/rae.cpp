#include "rae/rae.hpp"

namespace l3d::rae {

void RAEConfig::validate() const {
    if (patch < 1) throw io::ConfigError("rae: patch must be >= 1");
    if (hidden < 1 || hidden % n_heads != 0)
        throw io::ConfigError("rae: hidden must be a positive multiple of heads");
    if ((hidden / n_heads) % 4 != 0)
        throw io::ConfigError("rae: head dim must be divisible by 4 for 2D rotary embedding");
    if (latent_tokens < 1) throw io::ConfigError("rae: latent_tokens must be >= 1");
    if (fuse_depth < 1 || dec_depth < 1) throw io::ConfigError("rae: depths must be >= 1");
    if (mlp_ratio < 1) throw io::ConfigError("rae: mlp_ratio must be >= 1");
    if (pmap_fusion_layers.empty())
        throw io::ConfigError("rae: pmap_fusion_layers must not be empty");
    for (int layer : pmap_fusion_layers)
        if (layer < 0 || layer >= dec_depth)
            throw io::ConfigError("rae: pmap_fusion_layers out of range");
    if (pmap_hidden < 0) throw io::ConfigError("rae: pmap_hidden must be >= 0");
    if (conf_clamp < 0.0) throw io::ConfigError("rae: conf_clamp must be >= 0");
    if (pmap_pixel_hidden < 0) throw io::ConfigError("rae: pmap_pixel_hidden must be >= 0");
    if (pmap_pixel_freqs < 0) throw io::ConfigError("rae: pmap_pixel_freqs must be >= 0");
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0 || lambda_conf < 0.0)
        throw io::ConfigError("rae: loss weights must be nonnegative");
    if (noise_tau < 0.0) throw io::ConfigError("rae: noise_tau must be >= 0");
    if (disc_hidden < 1) throw io::ConfigError("rae: disc_hidden must be >= 1");
}

RAEConfig RAEConfig::from_config(const io::Config& cfg) {
    RAEConfig c;
    c.patch = static_cast<int>(cfg.get_int("rae.patch", c.patch));
    c.hidden = static_cast<int>(cfg.get_int("rae.hidden", c.hidden));
    c.latent_tokens = static_cast<int>(cfg.get_int("rae.latent_tokens", c.latent_tokens));
    c.fuse_depth = static_cast<int>(cfg.get_int("rae.fuse_depth", c.fuse_depth));
    c.dec_depth = static_cast<int>(cfg.get_int("rae.dec_depth", c.dec_depth));
    c.n_heads = static_cast<int>(cfg.get_int("rae.heads", c.n_heads));
    c.mlp_ratio = static_cast<int>(cfg.get_int("rae.mlp_ratio", c.mlp_ratio));
    std::vector<std::int64_t> fallback(c.pmap_fusion_layers.begin(), c.pmap_fusion_layers.end());
    c.pmap_fusion_layers.clear();
    for (std::int64_t layer : cfg.get_ints("rae.pmap_fusion_layers", fallback))
        c.pmap_fusion_layers.push_back(static_cast<int>(layer));
    c.pmap_hidden = static_cast<int>(cfg.get_int("rae.pmap_hidden", c.pmap_hidden));
    c.conf_clamp = cfg.get_double("rae.conf_clamp", c.conf_clamp);
    c.pmap_share_trunk = cfg.get_bool("rae.pmap_share_trunk", c.pmap_share_trunk);
    c.pmap_pixel_hidden =
        static_cast<int>(cfg.get_int("rae.pmap_pixel_hidden", c.pmap_pixel_hidden));
    c.pmap_pixel_freqs =
        static_cast<int>(cfg.get_int("rae.pmap_pixel_freqs", c.pmap_pixel_freqs));
    c.lambda1 = cfg.get_double("rae.lambda1", c.lambda1);
    c.lambda2 = cfg.get_double("rae.lambda2", c.lambda2);
    c.lambda3 = cfg.get_double("rae.lambda3", c.lambda3);
    c.lambda_conf = cfg.get_double("rae.lambda_conf", c.lambda_conf);
    c.noise_tau = cfg.get_double("rae.noise_tau", c.noise_tau);
    c.disc_hidden = static_cast<int>(cfg.get_int("rae.disc_hidden", c.disc_hidden));
    c.validate();
    return c;
}

void RAEConfig::echo(io::Config& cfg) const {
    cfg.set("rae.patch", std::to_string(patch));
    cfg.set("rae.hidden", std::to_string(hidden));
    cfg.set("rae.latent_tokens", std::to_string(latent_tokens));
    cfg.set("rae.fuse_depth", std::to_string(fuse_depth));
    cfg.set("rae.dec_depth", std::to_string(dec_depth));
    cfg.set("rae.heads", std::to_string(n_heads));
    cfg.set("rae.mlp_ratio", std::to_string(mlp_ratio));
    std::string layers;
    for (std::size_t i = 0; i < pmap_fusion_layers.size(); ++i)
        layers += (i ? "," : "") + std::to_string(pmap_fusion_layers[i]);
    cfg.set("rae.pmap_fusion_layers", layers);
    cfg.set("rae.pmap_hidden", std::to_string(pmap_hidden));
    cfg.set("rae.conf_clamp", std::to_string(conf_clamp));
    cfg.set("rae.pmap_share_trunk", pmap_share_trunk ? "true" : "false");
    cfg.set("rae.pmap_pixel_hidden", std::to_string(pmap_pixel_hidden));
    cfg.set("rae.pmap_pixel_freqs", std::to_string(pmap_pixel_freqs));
    cfg.set("rae.lambda1", std::to_string(lambda1));
    cfg.set("rae.lambda2", std::to_string(lambda2));
    cfg.set("rae.lambda3", std::to_string(lambda3));
    cfg.set("rae.lambda_conf", std::to_string(lambda_conf));
    cfg.set("rae.noise_tau", std::to_string(noise_tau));
    cfg.set("rae.disc_hidden", std::to_string(disc_hidden));
}

}  // namespace l3d::rae
