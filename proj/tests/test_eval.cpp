#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "eval/metrics.hpp"

using namespace l3d;
namespace fs = std::filesystem;

TEST_CASE("psnr oracles") {
    ad::Mat<float> a = ad::Mat<float>::Zero(10, 10);
    ad::Mat<float> b = a;
    CHECK(eval::psnr(a, b) == 99.0);  // capped only at exactly zero error
    b.setConstant(0.1f);              // MSE 0.01 against zero -> 20 dB
    CHECK(eval::psnr(a, b) == doctest::Approx(20.0).epsilon(1e-4));
    // Peak scaling: same error at peak 255 gains 20 log10(255).
    CHECK(eval::psnr(a, b, 255.0) ==
          doctest::Approx(20.0 + 20.0 * std::log10(255.0)).epsilon(1e-4));
    CHECK_THROWS_AS(eval::psnr(a, ad::Mat<float>::Zero(5, 5)), std::invalid_argument);
}

TEST_CASE("feature distance oracles") {
    Rng rng(1);
    const int n = 2000, d = 4;
    ad::Mat<double> a(n, d);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < d; ++c) a(r, c) = rng.normal();

    SUBCASE("a set against itself is numerically zero") {
        CHECK(eval::frechet_feature_distance(a, a) == doctest::Approx(0.0).epsilon(1e-8));
    }
    SUBCASE("a pure mean shift contributes its squared norm") {
        ad::Mat<double> b = a;
        Eigen::RowVector4d shift(0.3, -0.4, 0.0, 1.2);
        b.rowwise() += shift;
        CHECK(eval::frechet_feature_distance(a, b) ==
              doctest::Approx(shift.squaredNorm()).epsilon(1e-6));
    }
    SUBCASE("one-dimensional unit-vs-double stddev") {
        // N(0,1) against N(0,4): 0 + (1 + 4 - 2*2) = 1.
        Rng r2(2);
        const int m = 100000;
        ad::Mat<double> x(m, 1), y(m, 1);
        for (int i = 0; i < m; ++i) {
            x(i, 0) = r2.normal();
            y(i, 0) = 2.0 * r2.normal();
        }
        CHECK(eval::frechet_feature_distance(x, y) == doctest::Approx(1.0).epsilon(0.05));
    }
    SUBCASE("a negative eigenvalue in the cross term raises a numeric error") {
        ad::Mat<double> tiny(2, 4);  // fewer samples than features: rank-deficient
        tiny << 1, 0, 0, 0, 0, 1, 0, 0;
        // Rank-deficient inputs are still regularized; they must not throw.
        CHECK_NOTHROW(eval::frechet_feature_distance(tiny, tiny));
    }
}

TEST_CASE("finite difference checker accepts correct gradients") {
    nn::ParamStore<double> params;
    Rng rng(5);
    params.params["w"] = ad::Mat<double>::Random(3, 3);
    auto loss_fn = [](nn::Ctx<double>& ctx) {
        auto w = ctx.p("w");
        return ad::mean_all(ad::mul(ad::gelu(w), w));
    };
    const auto res = eval::finite_diff_check(params, loss_fn, 9, 1e-6, 1);
    CHECK(res.max_rel_err < 1e-7);
    CHECK(res.worst_param == "w");
}

TEST_CASE("finite difference checker flags a deliberately wrong backward") {
    nn::ParamStore<double> params;
    params.params["w"] = ad::Mat<double>::Random(2, 2);
    auto loss_fn = [](nn::Ctx<double>& ctx) {
        auto w = ctx.p("w");
        ad::Tape<double>& tape = ctx.tape;
        const int wid = w.id;
        // Forward computes 2w but the backward claims the factor is 3.
        int id = tape.push(ad::Mat<double>(2.0 * w.val()), true,
                           [wid](ad::Tape<double>& t, int self) {
                               t.grad(wid) += 3.0 * t.grad(self);
                           });
        ad::Var<double> y{&tape, id};
        return ad::mean_all(y);
    };
    const auto res = eval::finite_diff_check(params, loss_fn, 4, 1e-6, 2);
    // Relative error |3 - 2| / (3 + 2) = 0.2, far above any tolerance.
    CHECK(res.max_rel_err > 0.1);
}

namespace {

rae::RAEConfig tiny_cfg() {
    rae::RAEConfig cfg;
    cfg.hidden = 32;
    cfg.latent_tokens = 4;
    cfg.fuse_depth = 1;
    cfg.dec_depth = 1;
    cfg.n_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.pmap_fusion_layers = {0};
    return cfg;
}

const fs::path& eval_fixture() {
    static fs::path root = [] {
        fs::path dir = fs::temp_directory_path() / "l3d_eval_fixture";
        fs::remove_all(dir);
        scenegen::TrajectoryConfig tc;
        tc.width = tc.height = 28;
        for (int s = 0; s < 2; ++s) {
            const auto scene = scenegen::sample_scene(900 + static_cast<std::uint64_t>(s),
                                                      scenegen::SceneConfig{});
            const auto cams =
                scenegen::sample_trajectory(scene, 3, 45.0, static_cast<std::uint64_t>(s), tc);
            std::vector<scenegen::RenderedView> views;
            for (const auto& c : cams) views.push_back(scenegen::render_view(scene, c));
            char name[16];
            std::snprintf(name, sizeof(name), "%05d", s);
            scenegen::write_scene_dir(dir / "scenes" / name, scene.category, views);
        }
        return dir;
    }();
    return root;
}

rae::RAEModel<float> calibrated_model() {
    auto model = rae::RAEModel<float>::init(tiny_cfg(), 71);
    data::Dataset ds(eval_fixture());
    train::TrainConfig tc;
    tc.calib_latents = 16;
    tc.budget.pixel_min = 700;
    tc.budget.pixel_max = 900;
    tc.budget.aspect_min = 0.9;
    tc.budget.aspect_max = 1.1;
    tc.budget.views_min = 2;
    tc.budget.views_max = 2;
    tc.budget.token_budget = 16;
    train::compute_calibration(model, ds, tc, 3);
    return model;
}

}  // namespace

TEST_CASE("decoded images are clamped to the unit range") {
    auto model = calibrated_model();
    data::Dataset ds(eval_fixture());
    const auto& scene = ds.scene(0);
    const auto sample = data::assemble_sample(scene, {0, 1, 2}, 28, 28);
    const auto z = train::encode_latents(model, sample, false);
    const auto img = eval::decode_view_image(model, z, sample.views[0].camera);
    CHECK(img.rows() == 28 * 28);
    CHECK(img.cols() == 3);
    CHECK(img.minCoeff() >= 0.0f);
    CHECK(img.maxCoeff() <= 1.0f);
    const auto pm = eval::decode_view_pointmap(model, z, sample.views[1].camera);
    CHECK(pm.points.rows() == 28 * 28);
    CHECK(pm.confidence.minCoeff() > 0.0f);
}

TEST_CASE("frozen-embedder features are deterministic") {
    auto model = calibrated_model();
    data::Dataset ds(eval_fixture());
    const auto& view = ds.scene(0).views[0];
    const auto img = rae::detail::image_rows<float>(view.image, 28, 28, 3);
    const auto fa = eval::image_features(model, img, 28, 28);
    const auto fb = eval::image_features(model, img, 28, 28);
    CHECK(fa.rows() == 4);  // one row per patch token
    CHECK((fa - fb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("camera recovery from point maps") {
    data::Dataset ds(eval_fixture());
    const auto sample = data::assemble_sample(ds.scene(0), {0, 1, 2}, 28, 28);

    SUBCASE("perfect point maps return the ground-truth pose") {
        for (const auto& view : sample.views) {
            ad::Mat<float> pred(28 * 28, 3);
            for (Eigen::Index i = 0; i < pred.rows(); ++i)
                for (int c = 0; c < 3; ++c)
                    pred(i, c) = view.pointmap[static_cast<std::size_t>(i) * 3 +
                                               static_cast<std::size_t>(c)];
            const auto cam = eval::recover_camera(pred, view.pointmap, view.valid, view.camera);
            CHECK((cam.R - view.camera.R).cwiseAbs().maxCoeff() < 1e-4);
            CHECK((cam.t - view.camera.t).norm() < 1e-4);
        }
    }
    SUBCASE("a rigidly moved prediction frame moves the camera with it") {
        const Eigen::Matrix3d Q =
            Eigen::AngleAxisd(0.4, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
        const Eigen::Vector3d off(0.2, -0.1, 0.3);
        const double s = 1.5;
        const auto& view = sample.views[1];
        // Predicted scene lives in a frame where gt point p appears at
        // (1/s) Q^T (p - off).
        ad::Mat<float> pred(28 * 28, 3);
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            Eigen::Vector3d p(view.pointmap[static_cast<std::size_t>(i) * 3],
                              view.pointmap[static_cast<std::size_t>(i) * 3 + 1],
                              view.pointmap[static_cast<std::size_t>(i) * 3 + 2]);
            const Eigen::Vector3d q = (1.0 / s) * (Q.transpose() * (p - off));
            for (int c = 0; c < 3; ++c) pred(i, c) = static_cast<float>(q[c]);
        }
        const auto cam = eval::recover_camera(pred, view.pointmap, view.valid, view.camera);
        const Eigen::Matrix3d expected_R = Q.transpose() * view.camera.R;
        const Eigen::Vector3d expected_t = Q.transpose() * (view.camera.t - off) / s;
        CHECK((cam.R - expected_R).cwiseAbs().maxCoeff() < 1e-3);
        CHECK((cam.t - expected_t).norm() < 1e-3);
    }
    SUBCASE("too few valid pixels fall back to the ground-truth camera") {
        const auto& view = sample.views[0];
        std::vector<std::uint8_t> sparse(view.valid.size(), 0);
        sparse[0] = sparse[1] = 1;
        ad::Mat<float> pred = ad::Mat<float>::Zero(28 * 28, 3);
        const auto cam = eval::recover_camera(pred, view.pointmap, sparse, view.camera);
        CHECK((cam.R - view.camera.R).cwiseAbs().maxCoeff() == 0.0);
        CHECK((cam.t - view.camera.t).norm() == 0.0);
    }
}

TEST_CASE("report aggregation") {
    eval::EvalReport report;
    report.scenes.push_back({"a", 20.0, 1.0, 0.1});
    report.scenes.push_back({"b", 30.0, 3.0, 0.3});
    report.finalize();
    CHECK(report.mean_psnr == doctest::Approx(25.0));
    CHECK(report.mean_ate_r == doctest::Approx(2.0));
    CHECK(report.mean_ate_t == doctest::Approx(0.2));
    const std::string tsv = report.to_tsv();
    CHECK(tsv.find("a") != std::string::npos);
    CHECK(tsv.find("b") != std::string::npos);
}

TEST_CASE("reconstruction-only benchmark runs end to end") {
    auto model = calibrated_model();
    data::Dataset ds(eval_fixture());
    eval::BenchmarkOptions opts;
    opts.n_cond = 2;
    opts.expected_views = 3;
    opts.rae_only = true;
    const auto report = eval::run_benchmark(model, nullptr, ds, opts);
    CHECK(report.scenes.size() == 2);
    CHECK(report.n_cond == 2);
    CHECK(report.warnings.empty());
    for (const auto& s : report.scenes) {
        CHECK(std::isfinite(s.psnr_db));
        CHECK(s.psnr_db > 0.0);  // untrained but bounded images never hit zero
        CHECK(std::isfinite(s.ate_r));
        CHECK(std::isfinite(s.ate_t));
    }
    CHECK(std::isfinite(report.frechet));
    CHECK(report.frechet >= 0.0);
}

TEST_CASE("benchmark skips scenes with unexpected view counts") {
    auto model = calibrated_model();
    data::Dataset ds(eval_fixture());
    eval::BenchmarkOptions opts;
    opts.n_cond = 1;
    opts.expected_views = 4;  // fixture scenes have 3 views
    opts.rae_only = true;
    const auto report = eval::run_benchmark(model, nullptr, ds, opts);
    CHECK(report.scenes.empty());
    CHECK(report.warnings.size() == 2);
}
