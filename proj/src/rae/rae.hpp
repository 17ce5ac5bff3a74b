#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "core/nn.hpp"
#include "data/datapipe.hpp"
#include "geometry/geometry.hpp"
#include "io/config.hpp"

namespace l3d::rae {

using ad::Mat;
using ad::Var;

struct RAEConfig {
    int patch = 14;
    int hidden = 128;        // token width d
    int latent_tokens = 64;  // latent count m
    int fuse_depth = 2;
    int dec_depth = 2;
    int n_heads = 4;
    int mlp_ratio = 4;
    std::vector<int> pmap_fusion_layers = {0, 1};
    // Width of the fused point-map feature before the output projection.
    // The final linear layer confines every patch's point map to a subspace
    // of this dimension, so it bounds the expressible geometry detail per
    // patch; 0 means "use hidden".
    int pmap_hidden = 0;
    // Clamp on the raw (log) confidence channel: confidence is kept within
    // exp(+-conf_clamp); 0 disables the clamp.
    double conf_clamp = 0.0;
    // Run the point-map head on the image decoder trunk instead of a
    // separate stack, so geometry reads the same features that already
    // localize objects for rendering.
    bool pmap_share_trunk = false;
    // Per-pixel residual point head: when > 0, an MLP of this hidden width
    // over (patch feature, per-pixel ray, pixel-position Fourier features)
    // is added to the patch-linear output. The patch-linear head writes a
    // whole patch as one linear map of its feature, which blurs depth
    // discontinuities across the patch; a per-pixel MLP can place a sharp
    // silhouette boundary inside a patch. 0 disables the branch.
    int pmap_pixel_hidden = 0;
    // Octaves of sin/cos pixel-position features fed to the per-pixel head.
    int pmap_pixel_freqs = 6;
    double lambda1 = 1.0;   // perceptual proxy weight
    double lambda2 = 0.75;  // adversarial weight
    double lambda3 = 1.0;   // point map weight
    double lambda_conf = 0.2;
    double noise_tau = 0.8;
    int disc_hidden = 64;

    void validate() const;
    static RAEConfig from_config(const io::Config& cfg);
    void echo(io::Config& cfg) const;
};

// Pluggable frozen view embedder: image rows (H*W x 3) -> patch tokens
// ((H/14)*(W/14) x d). Parameters never receive gradients.
template <class T>
struct FrozenEncoder {
    std::string id;
    std::function<Mat<T>(const Mat<T>& image_rows, int height, int width)> encode;
};

namespace detail {

template <class T>
Mat<T> image_rows(const std::vector<float>& data, int height, int width, int channels) {
    Mat<T> m(static_cast<Eigen::Index>(height) * width, channels);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (int c = 0; c < channels; ++c)
            m(r, c) = static_cast<T>(data[static_cast<std::size_t>(r) * channels +
                                          static_cast<std::size_t>(c)]);
    return m;
}

inline std::vector<ad::RopePos> grid_positions(int ht, int wt) {
    std::vector<ad::RopePos> pos;
    pos.reserve(static_cast<std::size_t>(ht) * wt);
    for (int y = 0; y < ht; ++y)
        for (int x = 0; x < wt; ++x) pos.push_back({true, static_cast<double>(x),
                                                    static_cast<double>(y)});
    return pos;
}

// Row-major pixel -> patch selection matrix ((H*W) x n_patch, one 1 per
// row), so patch-level features can be broadcast to pixel rows by matmul.
template <class T>
Mat<T> pixel_patch_expand(int height, int width, int patch) {
    const int wt = width / patch;
    Mat<T> s = Mat<T>::Zero(static_cast<Eigen::Index>(height) * width,
                            static_cast<Eigen::Index>(height / patch) * wt);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            s(static_cast<Eigen::Index>(r) * width + c,
              static_cast<Eigen::Index>(r / patch) * wt + c / patch) = T(1);
    return s;
}

// Per-pixel conditioning for the point head: the 7-channel ray map plus
// sin/cos of the normalized pixel position at `freqs` octaves. The Fourier
// channels let a small MLP express high-frequency (sub-patch) boundaries
// that a smooth function of the raw ray cannot reach.
template <class T>
Mat<T> pixel_ray_features(const geom::RayMap& rm, int freqs) {
    const Mat<T> rays = image_rows<T>(rm.data, rm.height, rm.width, 7);
    Mat<T> m(rays.rows(), 7 + 4 * static_cast<Eigen::Index>(freqs));
    m.leftCols(7) = rays;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double u = (static_cast<double>(r % rm.width) + 0.5) / rm.width;
        const double v = (static_cast<double>(r / rm.width) + 0.5) / rm.height;
        for (int k = 0; k < freqs; ++k) {
            const double w = std::pow(2.0, k) * 3.14159265358979323846;
            m(r, 7 + 4 * k + 0) = static_cast<T>(std::sin(w * u));
            m(r, 7 + 4 * k + 1) = static_cast<T>(std::cos(w * u));
            m(r, 7 + 4 * k + 2) = static_cast<T>(std::sin(w * v));
            m(r, 7 + 4 * k + 3) = static_cast<T>(std::cos(w * v));
        }
    }
    return m;
}

}  // namespace detail

template <class T>
struct PointMapPrediction {
    Var<T> points;      // (H*W) x 3
    Var<T> confidence;  // (H*W) x 1, strictly positive (exp of raw channel)
};

template <class T>
class RAEModel {
public:
    RAEConfig cfg;
    nn::ParamStore<T> params;  // trainable
    nn::ParamStore<T> frozen;  // default ImgOnly patch embedding
    bool has_calibration = false;
    Mat<T> calib_mu, calib_sigma;  // 1 x d, frozen global standardization

    static RAEModel init(const RAEConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        RAEModel model;
        model.cfg = cfg;
        Rng rng(seed);
        const int d = cfg.hidden;
        const int pix = cfg.patch * cfg.patch;

        nn::init_linear(model.frozen, "imgenc", pix * 3, d, rng);
        nn::init_linear(model.params, "rayemb", pix * 7, d, rng);

        auto& q = model.params.create("neck.query", cfg.latent_tokens, d);
        nn::init_gaussian(q, rng, 0.02);
        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.fuse_depth; ++i)
            nn::init_transformer_block(model.params, "neck.block" + std::to_string(i), d, bc, rng);
        for (int i = 0; i < cfg.dec_depth; ++i)
            nn::init_transformer_block(model.params, "dec.img.block" + std::to_string(i), d, bc,
                                       rng);
        nn::init_linear(model.params, "dec.img.out", d, pix * 3, rng);
        if (!cfg.pmap_share_trunk)
            for (int i = 0; i < cfg.dec_depth; ++i)
                nn::init_transformer_block(model.params, "dec.pmap.block" + std::to_string(i), d,
                                           bc, rng);
        const int ph = cfg.pmap_hidden > 0 ? cfg.pmap_hidden : d;
        for (std::size_t j = 0; j < cfg.pmap_fusion_layers.size(); ++j)
            nn::init_linear(model.params, "dec.pmap.fuse" + std::to_string(j), d, ph, rng);
        nn::init_linear(model.params, "dec.pmap.out", ph, pix * 4, rng);
        if (cfg.pmap_pixel_hidden > 0) {
            const int h = cfg.pmap_pixel_hidden;
            nn::init_linear(model.params, "dec.pmap.pix.patch", ph, h, rng);
            nn::init_linear(model.params, "dec.pmap.pix.ray", 7 + 4 * cfg.pmap_pixel_freqs, h,
                            rng);
            nn::init_linear(model.params, "dec.pmap.pix.out", h, 4, rng);
            // Zero-init the residual output so the branch starts as identity.
            model.params.at("dec.pmap.pix.out.w").setZero();
        }

        model.calib_mu = Mat<T>::Zero(1, d);
        model.calib_sigma = Mat<T>::Ones(1, d);
        return model;
    }

    FrozenEncoder<T> imgonly_encoder() const {
        FrozenEncoder<T> enc;
        enc.id = "imgonly";
        const Mat<T> w = frozen.at("imgenc.w");
        const Mat<T> b = frozen.at("imgenc.b");
        const int patch = cfg.patch;
        enc.encode = [w, b, patch](const Mat<T>& image, int height, int width) {
            // Plain patchify + frozen linear projection of raw pixels.
            const int ht = height / patch, wt = width / patch;
            Mat<T> tokens(static_cast<Eigen::Index>(ht) * wt,
                          static_cast<Eigen::Index>(patch) * patch * 3);
            for (int r = 0; r < height; ++r)
                for (int c = 0; c < width; ++c) {
                    const Eigen::Index tok =
                        static_cast<Eigen::Index>(r / patch) * wt + c / patch;
                    const Eigen::Index off =
                        (static_cast<Eigen::Index>(r % patch) * patch + c % patch) * 3;
                    for (int ch = 0; ch < 3; ++ch)
                        tokens(tok, off + ch) = image(static_cast<Eigen::Index>(r) * width + c, ch);
                }
            Mat<T> out(tokens.rows(), w.cols());
            out.noalias() = tokens * w;
            out.rowwise() += b.row(0);
            return out;
        };
        return enc;
    }

    // Eq-5 style per-view patch tokens: frozen features (visible only)
    // plus ray map embedding carrying the visibility channel.
    Var<T> embed_view(nn::Ctx<T>& ctx, const Mat<T>& image, const geom::Camera& camera,
                      bool visible, const FrozenEncoder<T>& encoder) const {
        if (camera.width % cfg.patch != 0 || camera.height % cfg.patch != 0)
            throw geom::ValidationError("embed_view: image size not divisible by patch");
        const geom::RayMap rm = geom::plucker_ray_map(camera, visible);
        Var<T> ray = ad::constant(ctx.tape,
                                  detail::image_rows<T>(rm.data, rm.height, rm.width, 7));
        Var<T> ray_tokens =
            ctx.linear(ad::patchify(ray, camera.height, camera.width, cfg.patch, 7), "rayemb");
        if (!visible) return ray_tokens;
        if (static_cast<Eigen::Index>(camera.height) * camera.width != image.rows())
            throw ad::ShapeError("embed_view: image shape mismatch");
        Mat<T> feats = encoder.encode(image, camera.height, camera.width);
        return ad::add(ray_tokens, ad::constant(ctx.tape, std::move(feats)));
    }

    // Fuse neck: [learnable queries; view tokens] -> fixed-length latents in
    // layer-norm space (pre global standardization).
    Var<T> encode(nn::Ctx<T>& ctx, const data::Sample& sample,
                  const FrozenEncoder<T>& encoder) const {
        std::vector<Var<T>> parts;
        parts.push_back(ctx.p("neck.query"));
        std::vector<ad::RopePos> positions(static_cast<std::size_t>(cfg.latent_tokens));
        for (std::size_t i = 0; i < sample.views.size(); ++i) {
            const auto& view = sample.views[i];
            const bool visible = sample.visible[i];
            Mat<T> img;
            if (visible) img = detail::image_rows<T>(view.image, view.height, view.width, 3);
            parts.push_back(embed_view(ctx, img, view.camera, visible, encoder));
            const auto grid =
                detail::grid_positions(view.height / cfg.patch, view.width / cfg.patch);
            positions.insert(positions.end(), grid.begin(), grid.end());
        }
        Var<T> x = concat_rows(parts);
        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.fuse_depth; ++i)
            x = nn::transformer_block(ctx, x, "neck.block" + std::to_string(i), bc, &positions);
        Var<T> z = ad::slice_rows(x, 0, cfg.latent_tokens);
        return ad::layernorm_rows(z);
    }

    // Frozen global standardization (plain matrices, not tape ops).
    Mat<T> standardize(const Mat<T>& z) const {
        if (!has_calibration)
            throw nn::StateError("latent calibration statistics are not initialized");
        return (z.array().rowwise() - calib_mu.row(0).array()).rowwise() /
               calib_sigma.row(0).array();
    }
    Mat<T> destandardize(const Mat<T>& z) const {
        if (!has_calibration)
            throw nn::StateError("latent calibration statistics are not initialized");
        return (z.array().rowwise() * calib_sigma.row(0).array()).rowwise() +
               calib_mu.row(0).array();
    }

    // Decode one target view to image rows ((H*W) x 3, unclamped).
    Var<T> decode_image(nn::Ctx<T>& ctx, Var<T> z, const geom::Camera& camera) const {
        auto [x, positions, n_ray] = decoder_input(ctx, z, camera);
        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        for (int i = 0; i < cfg.dec_depth; ++i)
            x = nn::transformer_block(ctx, x, "dec.img.block" + std::to_string(i), bc,
                                      &positions);
        Var<T> ray_out = ad::slice_rows(x, 0, n_ray);
        Var<T> pixels = ctx.linear(ad::layernorm_rows(ray_out), "dec.img.out");
        return ad::unpatchify(pixels, camera.height / cfg.patch, camera.width / cfg.patch,
                              cfg.patch, 3);
    }

    PointMapPrediction<T> decode_pointmap(nn::Ctx<T>& ctx, Var<T> z,
                                          const geom::Camera& camera) const {
        auto [x, positions, n_ray] = decoder_input(ctx, z, camera);
        const nn::BlockConfig bc{cfg.n_heads, cfg.mlp_ratio};
        Var<T> fused{};
        bool have_fused = false;
        const std::string trunk = cfg.pmap_share_trunk ? "dec.img.block" : "dec.pmap.block";
        for (int i = 0; i < cfg.dec_depth; ++i) {
            x = nn::transformer_block(ctx, x, trunk + std::to_string(i), bc, &positions);
            for (std::size_t j = 0; j < cfg.pmap_fusion_layers.size(); ++j) {
                if (cfg.pmap_fusion_layers[j] != i) continue;
                Var<T> proj = ctx.linear(ad::slice_rows(x, 0, n_ray),
                                         "dec.pmap.fuse" + std::to_string(j));
                fused = have_fused ? ad::add(fused, proj) : proj;
                have_fused = true;
            }
        }
        Var<T> f = ad::layernorm_rows(fused);
        Var<T> raw = ctx.linear(f, "dec.pmap.out");
        Var<T> grid = ad::unpatchify(raw, camera.height / cfg.patch, camera.width / cfg.patch,
                                     cfg.patch, 4);
        if (cfg.pmap_pixel_hidden > 0) {
            Var<T> pf = ad::matmul(
                ad::constant(ctx.tape, detail::pixel_patch_expand<T>(camera.height,
                                                                     camera.width, cfg.patch)),
                ctx.linear(f, "dec.pmap.pix.patch"));
            const geom::RayMap rm = geom::plucker_ray_map(camera, true);
            Var<T> enc = ad::constant(
                ctx.tape, detail::pixel_ray_features<T>(rm, cfg.pmap_pixel_freqs));
            Var<T> mid = ad::gelu(ad::add(pf, ctx.linear(enc, "dec.pmap.pix.ray")));
            grid = ad::add(grid, ctx.linear(mid, "dec.pmap.pix.out"));
        }
        PointMapPrediction<T> out;
        out.points = ad::slice_cols(grid, 0, 3);
        Var<T> raw_conf = ad::slice_cols(grid, 3, 1);
        if (cfg.conf_clamp > 0.0) {
            // clamp(x, -c, c) = x - relu(x - c) + relu(-x - c). Unbounded
            // exp confidence lets well-fit pixels grab an arbitrarily large
            // share of the point-loss gradient, starving hard pixels once
            // the global norm clip kicks in.
            const T c = static_cast<T>(cfg.conf_clamp);
            Var<T> over = ad::relu(ad::add_scalar(raw_conf, -c));
            Var<T> under = ad::relu(ad::add_scalar(ad::neg(raw_conf), -c));
            raw_conf = ad::add(ad::sub(raw_conf, over), under);
        }
        out.confidence = ad::exp_(raw_conf);
        return out;
    }

private:
    std::tuple<Var<T>, std::vector<ad::RopePos>, Eigen::Index> decoder_input(
        nn::Ctx<T>& ctx, Var<T> z, const geom::Camera& camera) const {
        if (z.rows() != cfg.latent_tokens || z.cols() != cfg.hidden)
            throw ad::ShapeError("decode: latent shape mismatch");
        if (camera.width % cfg.patch != 0 || camera.height % cfg.patch != 0)
            throw geom::ValidationError("decode: target size not divisible by patch");
        const geom::RayMap rm = geom::plucker_ray_map(camera, true);
        Var<T> ray = ad::constant(ctx.tape,
                                  detail::image_rows<T>(rm.data, rm.height, rm.width, 7));
        Var<T> ray_tokens =
            ctx.linear(ad::patchify(ray, camera.height, camera.width, cfg.patch, 7), "rayemb");
        const Eigen::Index n_ray = ray_tokens.rows();
        std::vector<ad::RopePos> positions =
            detail::grid_positions(camera.height / cfg.patch, camera.width / cfg.patch);
        positions.resize(positions.size() + static_cast<std::size_t>(cfg.latent_tokens));
        Var<T> x = ad::concat_rows<T>({ray_tokens, z});
        return {x, std::move(positions), n_ray};
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda1 = 1.0, lambda2 = 0.75, lambda3 = 1.0;
    double lambda_conf = 0.2;
    double adv_gate = 0.0;  // omega_G, {0, 1}
};

template <class T>
struct LossBreakdown {
    Var<T> total;
    T mse = 0, perceptual = 0, adversarial = 0, pointmap = 0;
};

// Multi-scale photometric proxy standing in for a pretrained perceptual net:
// MSE on 2x- and 4x-downsampled pyramids.
template <class T>
Var<T> perceptual_proxy(Var<T> pred, Var<T> gt, int height, int width) {
    Var<T> p2 = ad::avg_pool2(pred, height, width);
    Var<T> g2 = ad::avg_pool2(gt, height, width);
    Var<T> l2 = ad::mse(p2, g2);
    if (height % 4 == 0 && width % 4 == 0) {
        Var<T> p4 = ad::avg_pool2(p2, height / 2, width / 2);
        Var<T> g4 = ad::avg_pool2(g2, height / 2, width / 2);
        return ad::scale(ad::add(l2, ad::mse(p4, g4)), T(0.5));
    }
    return l2;
}

// Confidence-weighted point map loss: mean over valid pixels of
// conf * |dP|_1 - lambda_conf * log(conf); zero when no pixel is valid.
template <class T>
Var<T> pointmap_loss(const PointMapPrediction<T>& pred, Var<T> gt_points,
                     const std::vector<std::uint8_t>& valid, double lambda_conf) {
    ad::Tape<T>& tape = *pred.points.tape;
    Mat<T> mask = Mat<T>::Zero(static_cast<Eigen::Index>(valid.size()), 1);
    T count = 0;
    for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) {
            mask(static_cast<Eigen::Index>(i), 0) = T(1);
            count += T(1);
        }
    if (count == T(0)) return ad::scalar_const(tape, T(0));

    Var<T> err = ad::abs_(ad::sub(pred.points, gt_points));
    // |dP|_1 per pixel = row sum over the 3 coordinates.
    Var<T> l1 = ad::matmul(err, ad::constant(tape, Mat<T>(Mat<T>::Ones(3, 1))));
    Var<T> weighted = ad::mul(pred.confidence, l1);
    Var<T> reg = ad::scale(ad::log_(pred.confidence), T(lambda_conf));
    Var<T> per_pixel = ad::sub(weighted, reg);
    Var<T> masked = ad::mul(per_pixel, ad::constant(tape, std::move(mask)));
    return ad::scale(ad::sum_all(masked), T(1) / count);
}

// ---------------------------------------------------------------------------
// Patch discriminator (small, randomly initialized)
// ---------------------------------------------------------------------------

template <class T>
void init_discriminator(nn::ParamStore<T>& store, int patch, int hidden, std::uint64_t seed) {
    Rng rng(seed);
    nn::init_linear(store, "disc.in", patch * patch * 3, hidden, rng);
    nn::init_linear(store, "disc.mid", hidden, hidden, rng);
    nn::init_linear(store, "disc.out", hidden, 1, rng);
}

// Mean patch score for one image.
template <class T>
Var<T> discriminator_score(nn::Ctx<T>& ctx, Var<T> image, int height, int width, int patch) {
    Var<T> tokens = ad::patchify(image, height, width, patch, 3);
    Var<T> h = ad::gelu(ctx.linear(tokens, "disc.in"));
    h = ad::gelu(ctx.linear(h, "disc.mid"));
    return ad::mean_all(ctx.linear(h, "disc.out"));
}

// Hinge GAN losses: d_loss = E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))],
// g_adv = -E[D(fake)].
template <class T>
Var<T> hinge_d_loss(Var<T> d_real, Var<T> d_fake) {
    Var<T> one_r = ad::add_scalar(ad::neg(d_real), T(1));
    Var<T> one_f = ad::add_scalar(d_fake, T(1));
    return ad::add(ad::relu(one_r), ad::relu(one_f));
}

// Additive latent noise: z + sigma * eps, sigma ~ U[0, tau] per call.
template <class T>
Mat<T> latent_noise(Eigen::Index rows, Eigen::Index cols, double tau, Rng& rng) {
    const double sigma = rng.uniform(0.0, tau);
    Mat<T> noise(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            noise(r, c) = static_cast<T>(sigma * rng.normal());
    return noise;
}

template <class T>
Mat<T> perturb_latents(const Mat<T>& z, double tau, std::uint64_t seed) {
    if (tau < 0.0) throw std::invalid_argument("perturb_latents: tau must be >= 0");
    if (tau == 0.0) return z;
    Rng rng(seed);
    return z + latent_noise<T>(z.rows(), z.cols(), tau, rng);
}

}  // namespace l3d::rae
