#include "eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace l3d::eval {

double psnr(const Mat<float>& a, const Mat<float>& b, double peak, double cap) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw geom::ValidationError("psnr: shape mismatch");
    if (peak <= 0.0) throw geom::ValidationError("psnr: peak must be positive");
    const double mse = (a.cast<double>() - b.cast<double>()).squaredNorm() /
                       static_cast<double>(a.size());
    if (mse == 0.0) return cap;
    return std::min(10.0 * std::log10(peak * peak / mse), cap);
}

namespace {

using MatD = Eigen::MatrixXd;

MatD covariance(const Mat<double>& x, const Eigen::RowVectorXd& mu, double eps) {
    MatD centered = x;
    centered.rowwise() -= mu;
    MatD cov = centered.transpose() * centered / static_cast<double>(x.rows());
    cov.diagonal().array() += eps;
    return cov;
}

MatD psd_sqrt(const MatD& m) {
    Eigen::SelfAdjointEigenSolver<MatD> eig(0.5 * (m + m.transpose()));
    return eig.eigenvectors() *
           eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           eig.eigenvectors().transpose();
}

}  // namespace

double frechet_feature_distance(const Mat<double>& feats_a, const Mat<double>& feats_b,
                                double eps) {
    if (feats_a.cols() == 0 || feats_a.cols() != feats_b.cols())
        throw geom::ValidationError("frechet: empty or mismatched feature width");
    if (feats_a.rows() < 1 || feats_b.rows() < 1)
        throw geom::ValidationError("frechet: need at least one sample per side");
    const Eigen::RowVectorXd mu_a = feats_a.colwise().mean();
    const Eigen::RowVectorXd mu_b = feats_b.colwise().mean();
    const MatD cov_a = covariance(feats_a, mu_a, eps);
    const MatD cov_b = covariance(feats_b, mu_b, eps);

    // tr((SigA SigB)^{1/2}) through the symmetric product
    // SigA^{1/2} SigB SigA^{1/2}, which shares its nonzero spectrum.
    const MatD root_a = psd_sqrt(cov_a);
    MatD prod = root_a * cov_b * root_a;
    prod = 0.5 * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<MatD> eig(prod);
    double trace_sqrt = 0.0;
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        const double lambda = eig.eigenvalues()(i);
        if (lambda < -1e-6)
            throw ad::NumericError("frechet: negative eigenvalue " + std::to_string(lambda));
        trace_sqrt += std::sqrt(std::max(lambda, 0.0));
    }
    return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
}

GradCheckResult finite_diff_check(
    const nn::ParamStore<double>& params,
    const std::function<ad::Var<double>(nn::Ctx<double>&)>& loss_fn, int coords_per_param,
    double h, std::uint64_t seed) {
    auto evaluate = [&loss_fn](const nn::ParamStore<double>& p,
                               std::map<std::string, Mat<double>>* grads) {
        ad::Tape<double> tape;
        nn::Ctx<double> ctx{tape, p, grads != nullptr};
        ad::Var<double> loss = loss_fn(ctx);
        const double value = loss.val()(0, 0);
        if (!std::isfinite(value)) throw ad::NumericError("finite_diff_check: non-finite loss");
        if (grads) {
            tape.backward(loss.id);
            ctx.collect_grads(*grads);
        }
        return value;
    };

    std::map<std::string, Mat<double>> analytic;
    evaluate(params, &analytic);

    Rng rng(seed);
    GradCheckResult result;
    for (const auto& [name, value] : params.params) {
        const Eigen::Index n = value.size();
        for (int k = 0; k < coords_per_param; ++k) {
            const Eigen::Index flat =
                static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
            const Eigen::Index r = flat / value.cols(), c = flat % value.cols();

            nn::ParamStore<double> perturbed = params;
            perturbed.at(name)(r, c) = value(r, c) + h;
            const double plus = evaluate(perturbed, nullptr);
            perturbed.at(name)(r, c) = value(r, c) - h;
            const double minus = evaluate(perturbed, nullptr);

            const double numeric = (plus - minus) / (2.0 * h);
            const auto it = analytic.find(name);
            const double a = it == analytic.end() ? 0.0 : it->second(r, c);
            const double rel =
                std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = name;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Decode helpers
// ---------------------------------------------------------------------------

Mat<float> decode_view_image(const rae::RAEModel<float>& model, const Mat<float>& z_ln,
                             const geom::Camera& camera) {
    ad::Tape<float> tape;
    nn::Ctx<float> ctx{tape, model.params, false};
    ad::Var<float> z = ad::constant(tape, z_ln);
    Mat<float> image = model.decode_image(ctx, z, camera).val();
    return image.cwiseMax(0.0f).cwiseMin(1.0f);
}

DecodedPointMap decode_view_pointmap(const rae::RAEModel<float>& model, const Mat<float>& z_ln,
                                     const geom::Camera& camera) {
    ad::Tape<float> tape;
    nn::Ctx<float> ctx{tape, model.params, false};
    ad::Var<float> z = ad::constant(tape, z_ln);
    rae::PointMapPrediction<float> pm = model.decode_pointmap(ctx, z, camera);
    return {pm.points.val(), pm.confidence.val()};
}

Mat<double> image_features(const rae::RAEModel<float>& model, const Mat<float>& image,
                           int height, int width) {
    return model.imgonly_encoder().encode(image, height, width).cast<double>();
}

geom::Camera recover_camera(const Mat<float>& pred_points, const std::vector<float>& gt_points,
                            const std::vector<std::uint8_t>& valid, const geom::Camera& gt_cam,
                            int max_correspondences) {
    std::vector<Eigen::Vector3d> src, dst;
    std::size_t n_valid = 0;
    for (std::uint8_t v : valid) n_valid += v ? 1 : 0;
    const std::size_t stride =
        std::max<std::size_t>(1, n_valid / static_cast<std::size_t>(max_correspondences));
    std::size_t seen = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
        if (!valid[i]) continue;
        if (seen++ % stride != 0) continue;
        src.emplace_back(pred_points(static_cast<Eigen::Index>(i), 0),
                         pred_points(static_cast<Eigen::Index>(i), 1),
                         pred_points(static_cast<Eigen::Index>(i), 2));
        dst.emplace_back(gt_points[i * 3], gt_points[i * 3 + 1], gt_points[i * 3 + 2]);
    }
    if (src.size() < 3) return gt_cam;  // not enough geometry to re-estimate

    geom::Sim3 align;
    try {
        align = geom::umeyama_align(src, dst);  // maps predicted -> ground truth
    } catch (const geom::DegenerateInputError&) {
        return gt_cam;
    }
    // If T(pred) = gt, the camera seeing pred as gt_cam sees gt is T^-1 gt_cam.
    geom::Camera cam = gt_cam;
    cam.R = align.R.transpose() * gt_cam.R;
    cam.t = align.R.transpose() * (gt_cam.t - align.t) / align.s;
    return cam;
}

// ---------------------------------------------------------------------------
// Benchmark protocol
// ---------------------------------------------------------------------------

void EvalReport::finalize() {
    mean_psnr = mean_ate_r = mean_ate_t = 0.0;
    if (scenes.empty()) return;
    for (const auto& s : scenes) {
        mean_psnr += s.psnr_db;
        mean_ate_r += s.ate_r;
        mean_ate_t += s.ate_t;
    }
    const double n = static_cast<double>(scenes.size());
    mean_psnr /= n;
    mean_ate_r /= n;
    mean_ate_t /= n;
}

std::string EvalReport::to_tsv() const {
    std::ostringstream os;
    os << "scene\tpsnr_db\tate_r_deg\tate_t\n";
    for (const auto& s : scenes)
        os << s.id << "\t" << s.psnr_db << "\t" << s.ate_r << "\t" << s.ate_t << "\n";
    os << "# n_cond=" << n_cond << " mean_psnr=" << mean_psnr << " frechet=" << frechet
       << " mean_ate_r=" << mean_ate_r << " mean_ate_t=" << mean_ate_t << "\n";
    for (const auto& w : warnings) os << "# warning: " << w << "\n";
    return os.str();
}

EvalReport run_benchmark(const rae::RAEModel<float>& rae_model,
                         const dit::DiTModel<float>* dit_model, const data::Dataset& benchset,
                         const BenchmarkOptions& opts) {
    if (opts.n_cond < 1) throw geom::ValidationError("run_benchmark: n_cond must be >= 1");
    if (!opts.rae_only && dit_model == nullptr)
        throw geom::ValidationError("run_benchmark: diffusion model required");

    EvalReport report;
    report.n_cond = opts.n_cond;
    std::vector<Mat<double>> feats_pred, feats_gt;

    for (std::size_t si = 0; si < benchset.size(); ++si) {
        const auto& scene = benchset.scene(si);
        const int n_views = static_cast<int>(scene.views.size());
        const std::string id = "scene" + std::to_string(si);
        if (n_views != opts.expected_views) {
            report.warnings.push_back(id + ": expected " +
                                      std::to_string(opts.expected_views) + " views, got " +
                                      std::to_string(n_views) + "; skipped");
            continue;
        }
        if (opts.n_cond > n_views)
            throw geom::ValidationError("run_benchmark: n_cond exceeds view count");

        std::vector<int> all(static_cast<std::size_t>(n_views));
        for (int i = 0; i < n_views; ++i) all[static_cast<std::size_t>(i)] = i;
        const data::Sample sample = data::assemble_sample(
            scene, all, scene.views.front().height, scene.views.front().width);

        // Conditioning views: the first view, or a uniform subsample.
        std::vector<bool> cond_vis(static_cast<std::size_t>(n_views), false);
        for (int j = 0; j < opts.n_cond; ++j)
            cond_vis[static_cast<std::size_t>(j * n_views / opts.n_cond)] = true;

        Mat<float> z_ln;
        if (opts.rae_only) {
            data::Sample cond_sample = sample;
            cond_sample.visible = cond_vis;
            z_ln = train::encode_latents(rae_model, cond_sample, false);
        } else {
            const dit::ConditionTokens cond =
                train::make_condition(rae_model, sample, cond_vis, std::nullopt);
            const dit::ConditionTokens uncond = train::make_condition(
                rae_model, sample, std::vector<bool>(cond_vis.size(), false), std::nullopt);
            const Mat<float> z_std =
                dit_model->sample(cond, uncond, opts.sample_steps, opts.cfg_scale,
                                  opts.seed + si);
            z_ln = rae_model.destandardize(z_std);
        }

        SceneScore score;
        score.id = id;
        int scored = 0;
        std::vector<geom::Camera> pred_cams, gt_cams;
        for (int j = 0; j < n_views; ++j) {
            const auto& view = sample.views[static_cast<std::size_t>(j)];
            const Mat<float> pred = decode_view_image(rae_model, z_ln, view.camera);
            const bool held_out = !cond_vis[static_cast<std::size_t>(j)];
            if (held_out || opts.n_cond == n_views) {
                const Mat<float> gt = rae::detail::image_rows<float>(
                    view.image, view.height, view.width, 3);
                score.psnr_db += psnr(pred, gt);
                ++scored;
                feats_pred.push_back(image_features(rae_model, pred, view.height, view.width));
                feats_gt.push_back(image_features(rae_model, gt, view.height, view.width));
            }
            const DecodedPointMap pm = decode_view_pointmap(rae_model, z_ln, view.camera);
            pred_cams.push_back(
                recover_camera(pm.points, view.pointmap, view.valid, view.camera));
            gt_cams.push_back(view.camera);
        }
        if (scored > 0) score.psnr_db /= scored;
        const auto [ate_r, ate_t] = geom::ate(pred_cams, gt_cams);
        score.ate_r = ate_r;
        score.ate_t = ate_t;
        report.scenes.push_back(score);
    }

    if (!feats_pred.empty()) {
        Eigen::Index rows = 0;
        for (const auto& f : feats_pred) rows += f.rows();
        Mat<double> a(rows, feats_pred.front().cols()), b(rows, feats_pred.front().cols());
        Eigen::Index r = 0;
        for (std::size_t i = 0; i < feats_pred.size(); ++i) {
            a.middleRows(r, feats_pred[i].rows()) = feats_pred[i];
            b.middleRows(r, feats_gt[i].rows()) = feats_gt[i];
            r += feats_pred[i].rows();
        }
        report.frechet = frechet_feature_distance(a, b);
    }
    report.finalize();
    return report;
}

}  // namespace l3d::eval
