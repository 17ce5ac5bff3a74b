#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "data/datapipe.hpp"

using namespace l3d;
namespace fs = std::filesystem;

namespace {

data::MultiViewBatch make_batch_of(int n_samples, int n_views) {
    data::MultiViewBatch batch;
    batch.height = batch.width = 8;
    for (int s = 0; s < n_samples; ++s) {
        data::Sample sample;
        sample.visible.assign(static_cast<std::size_t>(n_views), true);
        sample.views.resize(static_cast<std::size_t>(n_views));
        batch.samples.push_back(std::move(sample));
    }
    return batch;
}

}  // namespace

TEST_CASE("shape sampling respects the token budget and ranges") {
    data::BudgetConfig cfg;
    cfg.token_budget = 512;
    Rng rng(77);
    for (int i = 0; i < 500; ++i) {
        const auto shape = data::sample_shape(cfg, rng);
        CHECK(shape.height % cfg.patch == 0);
        CHECK(shape.width % cfg.patch == 0);
        const int pixels = shape.height * shape.width;
        CHECK(pixels >= cfg.pixel_min);
        CHECK(pixels <= cfg.pixel_max);
        const double aspect = static_cast<double>(shape.width) / shape.height;
        CHECK(aspect >= cfg.aspect_min - 0.35);  // rounding to patch multiples
        CHECK(aspect <= cfg.aspect_max + 0.35);
        CHECK(shape.n_views >= cfg.views_min);
        CHECK(shape.n_views <= cfg.views_max);
        const int tokens_per_view = (shape.height / cfg.patch) * (shape.width / cfg.patch);
        CHECK(shape.batch_size >= 1);
        // Batch fills the budget without overshooting (or is a single scene).
        CHECK(tokens_per_view * shape.n_views * shape.batch_size <= cfg.token_budget);
        if (shape.batch_size > 1)
            CHECK(tokens_per_view * shape.n_views * (shape.batch_size + 1) > cfg.token_budget);
    }
}

TEST_CASE("shape sampling oracle: 56x56 with 4 views under budget 512 gives batch 8") {
    data::BudgetConfig cfg;
    cfg.token_budget = 512;
    // 56x56 at patch 14 -> 16 tokens per view; 4 views -> 64; 512/64 = 8.
    const int tokens = (56 / cfg.patch) * (56 / cfg.patch);
    CHECK(tokens == 16);
    CHECK(cfg.token_budget / (tokens * 4) == 8);
}

TEST_CASE("mixture sampling follows the weights") {
    Rng rng(123);
    std::vector<double> w{1.0, 3.0, 0.0, 6.0};
    std::vector<int> counts(4, 0);
    const int n = 200000;
    for (int i = 0; i < n; ++i) ++counts[data::mixture_sample(w, rng)];
    CHECK(counts[2] == 0);
    CHECK(static_cast<double>(counts[0]) / n == doctest::Approx(0.1).epsilon(0.05));
    CHECK(static_cast<double>(counts[1]) / n == doctest::Approx(0.3).epsilon(0.05));
    CHECK(static_cast<double>(counts[3]) / n == doctest::Approx(0.6).epsilon(0.05));
    CHECK_THROWS(data::mixture_sample({}, rng));
    CHECK_THROWS(data::mixture_sample({0.0, 0.0}, rng));
}

TEST_CASE("autoencoder-stage masking keeps at least one visible view") {
    data::MaskPolicy policy{0.5, 0.3, 0.7, 0.0};
    Rng rng(9);
    int masked_batches = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        auto batch = data::apply_view_mask(make_batch_of(2, 6), policy, data::Stage::Rae, rng);
        for (const auto& s : batch.samples) {
            int vis = 0;
            for (bool v : s.visible) vis += v ? 1 : 0;
            CHECK(vis >= 1);
            if (vis < 6) ++masked_batches;
        }
    }
    // Roughly half the samples should see masking.
    CHECK(masked_batches > 1400);
    CHECK(masked_batches < 2600);
}

TEST_CASE("masking with probability one and fixed ratio masks exactly half") {
    data::MaskPolicy policy{1.0, 0.5, 0.5, 0.0};
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto batch = data::apply_view_mask(make_batch_of(1, 8), policy, data::Stage::Rae, rng);
        int vis = 0;
        for (bool v : batch.samples[0].visible) vis += v ? 1 : 0;
        CHECK(vis == 4);
    }
}

TEST_CASE("diffusion-stage drop-all branch hides every view at the configured rate") {
    data::MaskPolicy policy{1.0, 0.6, 0.9, 0.25};
    Rng rng(15);
    int all_hidden = 0;
    const int n = 4000;
    for (int trial = 0; trial < n; ++trial) {
        auto batch =
            data::apply_view_mask(make_batch_of(1, 6), policy, data::Stage::DitStage2, rng);
        int vis = 0;
        for (bool v : batch.samples[0].visible) vis += v ? 1 : 0;
        if (vis == 0) {
            ++all_hidden;
        } else {
            // Masked fraction stays within the configured ratio band.
            const double hidden = (6.0 - vis) / 6.0;
            CHECK(hidden >= 0.6 - 1.0 / 6 - 1e-9);
            CHECK(hidden <= 0.9 + 1e-9);
        }
    }
    CHECK(static_cast<double>(all_hidden) / n == doctest::Approx(0.25).epsilon(0.15));
}

TEST_CASE("resize rescales intrinsics and keeps pointmaps on surfaces") {
    const auto scene = scenegen::sample_scene(42, scenegen::SceneConfig{});
    scenegen::TrajectoryConfig tc;
    tc.width = tc.height = 48;
    const auto cams = scenegen::sample_trajectory(scene, 1, 0.0, 3, tc);
    const auto view = scenegen::render_view(scene, cams[0]);
    const auto small = data::resize_view(view, 24, 36);
    CHECK(small.height == 24);
    CHECK(small.width == 36);
    CHECK(small.camera.width == 36);
    CHECK(small.camera.height == 24);
    CHECK(small.camera.fx == doctest::Approx(view.camera.fx * 36.0 / 48.0));
    CHECK(small.camera.fy == doctest::Approx(view.camera.fy * 24.0 / 48.0));
    // Nearest-neighbour pointmap values must already exist in the source.
    for (std::size_t i = 0; i < small.valid.size(); ++i) {
        if (!small.valid[i]) continue;
        const Eigen::Vector3d p(small.pointmap[i * 3], small.pointmap[i * 3 + 1],
                                small.pointmap[i * 3 + 2]);
        bool found = false;
        for (std::size_t j = 0; j < view.valid.size() && !found; ++j) {
            if (!view.valid[j]) continue;
            if (std::abs(view.pointmap[j * 3] - p.x()) < 1e-12 &&
                std::abs(view.pointmap[j * 3 + 1] - p.y()) < 1e-12 &&
                std::abs(view.pointmap[j * 3 + 2] - p.z()) < 1e-12)
                found = true;
        }
        CHECK(found);
        if (!found) break;
    }
}

TEST_CASE("assembled samples are pose-normalized with consistent pointmaps") {
    const auto scene = scenegen::sample_scene(8, scenegen::SceneConfig{});
    scenegen::TrajectoryConfig tc;
    tc.width = tc.height = 28;
    const auto cams = scenegen::sample_trajectory(scene, 4, 60.0, 17, tc);
    scenegen::StoredScene stored;
    stored.category = scene.category;
    for (const auto& c : cams) stored.views.push_back(scenegen::render_view(scene, c));

    const auto sample = data::assemble_sample(stored, {0, 2, 3}, 28, 28);
    REQUIRE(sample.views.size() == 3);
    CHECK(sample.category == scene.category);
    CHECK(sample.visible == std::vector<bool>(3, true));
    // First camera sits at the origin with identity rotation.
    CHECK(sample.views[0].camera.t.norm() < 1e-9);
    CHECK((sample.views[0].camera.R - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    double far = 0;
    for (const auto& v : sample.views) far = std::max(far, v.camera.t.norm());
    CHECK(far == doctest::Approx(1.0).epsilon(1e-6));
    // Pointmaps live in the same normalized frame: reprojection still works.
    for (const auto& v : sample.views) {
        for (int vv = 0; vv < v.height; vv += 5)
            for (int uu = 0; uu < v.width; uu += 5) {
                const std::size_t i = static_cast<std::size_t>(vv) * v.width + uu;
                if (!v.valid[i]) continue;
                const Eigen::Vector3d p(v.pointmap[i * 3], v.pointmap[i * 3 + 1],
                                        v.pointmap[i * 3 + 2]);
                const Eigen::Vector3d uvz = v.camera.project(p);
                CHECK(uvz.x() == doctest::Approx(uu + 0.5).epsilon(1e-2));
                CHECK(uvz.y() == doctest::Approx(vv + 0.5).epsilon(1e-2));
            }
    }
}

TEST_CASE("dataset batches draw consistent shapes") {
    const fs::path root = fs::temp_directory_path() / "l3d_dataset_test";
    fs::remove_all(root);
    scenegen::TrajectoryConfig tc;
    tc.width = tc.height = 28;
    for (int s = 0; s < 3; ++s) {
        const auto scene = scenegen::sample_scene(100 + static_cast<std::uint64_t>(s),
                                                  scenegen::SceneConfig{});
        const auto cams =
            scenegen::sample_trajectory(scene, 4, 45.0, static_cast<std::uint64_t>(s), tc);
        std::vector<scenegen::RenderedView> views;
        for (const auto& c : cams) views.push_back(scenegen::render_view(scene, c));
        char name[16];
        std::snprintf(name, sizeof(name), "%05d", s);
        scenegen::write_scene_dir(root / "scenes" / name, scene.category, views);
    }
    data::Dataset ds(root);
    CHECK(ds.size() == 3);
    Rng rng(1);
    data::ShapeSample shape{28, 28, 3, 2};
    const auto batch = ds.make_batch(shape, rng);
    REQUIRE(batch.samples.size() == 2);
    CHECK(batch.height == 28);
    CHECK(batch.width == 28);
    for (const auto& s : batch.samples) {
        CHECK(s.views.size() == 3);
        CHECK(s.views[0].camera.t.norm() < 1e-9);
        for (const auto& v : s.views) {
            CHECK(v.height == 28);
            CHECK(v.width == 28);
        }
    }
    fs::remove_all(root);
}
