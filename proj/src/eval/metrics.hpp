#pragma once

#include <functional>
#include <string>
#include <vector>

#include "data/datapipe.hpp"
#include "dit/dit.hpp"
#include "rae/rae.hpp"
#include "train/trainer.hpp"

namespace l3d::eval {

using ad::Mat;

// 10 * log10(peak^2 / MSE); identical images report the cap.
double psnr(const Mat<float>& a, const Mat<float>& b, double peak = 1.0, double cap = 99.0);

// || muA - muB ||^2 + tr(SigA + SigB - 2 (SigA SigB)^{1/2}), covariances
// regularized by eps*I. Rows are samples, columns features.
double frechet_feature_distance(const Mat<double>& feats_a, const Mat<double>& feats_b,
                                double eps = 1e-6);

// Central-difference gradient verification of a scalar loss over a double
// parameter store. Samples coords_per_param coordinates of every parameter.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
};
GradCheckResult finite_diff_check(
    const nn::ParamStore<double>& params,
    const std::function<ad::Var<double>(nn::Ctx<double>&)>& loss_fn, int coords_per_param,
    double h, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Inference-time decode helpers (clamped image, raw geometry)
// ---------------------------------------------------------------------------

Mat<float> decode_view_image(const rae::RAEModel<float>& model, const Mat<float>& z_ln,
                             const geom::Camera& camera);

struct DecodedPointMap {
    Mat<float> points;      // (H*W) x 3
    Mat<float> confidence;  // (H*W) x 1
};
DecodedPointMap decode_view_pointmap(const rae::RAEModel<float>& model, const Mat<float>& z_ln,
                                     const geom::Camera& camera);

// Frozen-embedder features of an image, used as the Fréchet feature set.
Mat<double> image_features(const rae::RAEModel<float>& model, const Mat<float>& image,
                           int height, int width);

// Camera recovered by rigidly aligning a predicted point map to the ground
// truth point map of the same view over mutually valid pixels.
geom::Camera recover_camera(const Mat<float>& pred_points, const std::vector<float>& gt_points,
                            const std::vector<std::uint8_t>& valid, const geom::Camera& gt_cam,
                            int max_correspondences = 512);

// ---------------------------------------------------------------------------
// Benchmark protocol
// ---------------------------------------------------------------------------

struct SceneScore {
    std::string id;
    double psnr_db = 0.0;
    double ate_r = 0.0, ate_t = 0.0;
};

struct EvalReport {
    std::vector<SceneScore> scenes;
    double mean_psnr = 0.0, mean_ate_r = 0.0, mean_ate_t = 0.0;
    double frechet = 0.0;
    int n_cond = 0;
    std::vector<std::string> warnings;

    std::string to_tsv() const;
    void finalize();  // recompute aggregates from per-scene rows
};

struct BenchmarkOptions {
    int n_cond = 1;
    int expected_views = 16;
    int sample_steps = 50;
    double cfg_scale = 2.0;
    std::uint64_t seed = 0;
    bool rae_only = false;  // oracle reconstruction path, skips the diffusion
};

EvalReport run_benchmark(const rae::RAEModel<float>& rae_model,
                         const dit::DiTModel<float>* dit_model, const data::Dataset& benchset,
                         const BenchmarkOptions& opts);

}  // namespace l3d::eval
