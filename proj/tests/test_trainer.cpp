#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "train/trainer.hpp"

using namespace l3d;
namespace fs = std::filesystem;

namespace {

rae::RAEConfig tiny_rae_cfg() {
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

dit::DiTConfig tiny_dit_cfg(int n_classes) {
    dit::DiTConfig cfg;
    cfg.depth = 1;
    cfg.width = 32;
    cfg.n_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.head_depth = 1;
    cfg.head_width = 32;
    cfg.head_heads = 2;
    cfg.latent_tokens = 4;
    cfg.latent_dim = 32;
    cfg.time_features = 8;
    cfg.base_dim = 128;
    cfg.n_classes = n_classes;
    return cfg;
}

train::TrainConfig tiny_train_cfg() {
    train::TrainConfig tc;
    tc.peak_lr = 1e-3;
    tc.warmup = 2;
    tc.total = 5;
    tc.calib_latents = 16;
    tc.budget.pixel_min = 700;
    tc.budget.pixel_max = 900;
    tc.budget.aspect_min = 0.9;
    tc.budget.aspect_max = 1.1;
    tc.budget.views_min = 2;
    tc.budget.views_max = 2;
    tc.budget.token_budget = 16;
    return tc;
}

// A tiny on-disk dataset shared by the trainer tests, built once.
const fs::path& fixture_root() {
    static fs::path root = [] {
        fs::path dir = fs::temp_directory_path() / "l3d_trainer_fixture";
        fs::remove_all(dir);
        scenegen::TrajectoryConfig tc;
        tc.width = tc.height = 28;
        for (int s = 0; s < 3; ++s) {
            const auto scene = scenegen::sample_scene(500 + static_cast<std::uint64_t>(s),
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

bool stores_identical(const nn::ParamStore<float>& a, const nn::ParamStore<float>& b) {
    if (a.params.size() != b.params.size()) return false;
    for (const auto& [k, v] : a.params) {
        auto it = b.params.find(k);
        if (it == b.params.end()) return false;
        if (v.rows() != it->second.rows() || v.cols() != it->second.cols()) return false;
        if (std::memcmp(v.data(), it->second.data(), sizeof(float) * v.size()) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("learning rate schedule: linear warmup, cosine decay, clamped tail") {
    train::TrainConfig tc;
    tc.peak_lr = 4e-4;
    tc.floor_lr = 1e-5;
    tc.warmup = 100;
    tc.total = 1100;
    CHECK(train::lr_schedule(0, tc) == doctest::Approx(0.0));
    CHECK(train::lr_schedule(50, tc) == doctest::Approx(2e-4));
    CHECK(train::lr_schedule(100, tc) == doctest::Approx(4e-4));
    // Cosine midpoint sits halfway between peak and floor.
    CHECK(train::lr_schedule(600, tc) == doctest::Approx(0.5 * (4e-4 + 1e-5)).epsilon(1e-9));
    CHECK(train::lr_schedule(1100, tc) == doctest::Approx(1e-5));
    CHECK(train::lr_schedule(5000, tc) == doctest::Approx(1e-5));
    // Monotone decrease after warmup.
    double prev = train::lr_schedule(100, tc);
    for (int s = 200; s <= 1100; s += 100) {
        const double cur = train::lr_schedule(s, tc);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("parameter store round trip is bitwise") {
    nn::ParamStore<float> store;
    Rng rng(1);
    store.params["a.w"] = ad::Mat<float>::Random(5, 7);
    store.params["b"] = ad::Mat<float>::Random(1, 3);
    const fs::path dir = fs::temp_directory_path() / "l3d_store_rt";
    fs::remove_all(dir);
    train::save_store(dir, store);
    const auto back = train::load_store(dir);
    CHECK(stores_identical(store, back));
    fs::remove_all(dir);
}

TEST_CASE("autoencoder checkpoint round trip preserves everything") {
    const auto tc = tiny_train_cfg();
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 42);
    data::Dataset ds(fixture_root());
    for (int i = 0; i < 2; ++i) train::rae_train_step(state, ds, tc);
    train::compute_calibration(state.model, ds, tc, 9);

    const fs::path dir = fs::temp_directory_path() / "l3d_rae_ckpt";
    fs::remove_all(dir);
    train::save_rae_state(dir, state);
    auto back = train::load_rae_state(dir);
    CHECK(back.step == state.step);
    CHECK(stores_identical(back.model.params, state.model.params));
    CHECK(stores_identical(back.model.frozen, state.model.frozen));
    CHECK(stores_identical(back.disc, state.disc));
    CHECK(back.rng.serialize() == state.rng.serialize());
    CHECK(back.model.has_calibration);
    CHECK((back.model.calib_mu - state.model.calib_mu).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((back.model.calib_sigma - state.model.calib_sigma).cwiseAbs().maxCoeff() == 0.0f);
    CHECK(back.opt.step_count == state.opt.step_count);
    fs::remove_all(dir);
}

TEST_CASE("training resumes bit-exactly from a checkpoint") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());

    auto straight = train::init_rae_state(tiny_rae_cfg(), tc, 7);
    for (int i = 0; i < 5; ++i) {
        train::rae_train_step(straight, ds, tc);
        ++straight.step;
    }

    auto first = train::init_rae_state(tiny_rae_cfg(), tc, 7);
    for (int i = 0; i < 3; ++i) {
        train::rae_train_step(first, ds, tc);
        ++first.step;
    }
    const fs::path dir = fs::temp_directory_path() / "l3d_resume";
    fs::remove_all(dir);
    train::save_rae_state(dir, first);
    auto resumed = train::load_rae_state(dir);
    for (int i = 0; i < 2; ++i) {
        train::rae_train_step(resumed, ds, tc);
        ++resumed.step;
    }
    CHECK(resumed.step == straight.step);
    CHECK(stores_identical(resumed.model.params, straight.model.params));
    CHECK(stores_identical(resumed.disc, straight.disc));
    CHECK(resumed.rng.serialize() == straight.rng.serialize());
    fs::remove_all(dir);
}

TEST_CASE("identical seeds give identical steps") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto a = train::init_rae_state(tiny_rae_cfg(), tc, 11);
    auto b = train::init_rae_state(tiny_rae_cfg(), tc, 11);
    const auto sa = train::rae_train_step(a, ds, tc);
    const auto sb = train::rae_train_step(b, ds, tc);
    CHECK(sa.total == sb.total);
    CHECK(stores_identical(a.model.params, b.model.params));
}

TEST_CASE("discriminator and adversarial terms respect their start steps") {
    auto tc = tiny_train_cfg();
    tc.disc_start = 2;
    tc.adv_start = 4;
    tc.total = 6;
    data::Dataset ds(fixture_root());
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 3);
    for (int step = 0; step < 6; ++step) {
        state.step = step;
        const auto stats = train::rae_train_step(state, ds, tc);
        if (step < 2) CHECK(stats.disc_loss == 0.0);
        if (step >= 2) CHECK(stats.disc_loss != 0.0);
        if (step < 4) CHECK(stats.adversarial == 0.0);
    }
}

TEST_CASE("frozen parameters never move during autoencoder training") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 19);
    const auto frozen_before = state.model.frozen;
    const auto params_before = state.model.params;
    for (int i = 0; i < 2; ++i) train::rae_train_step(state, ds, tc);
    CHECK(stores_identical(state.model.frozen, frozen_before));
    CHECK(!stores_identical(state.model.params, params_before));
}

TEST_CASE("latent calibration standardizes the latent distribution") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 23);
    CHECK_THROWS_AS(
        train::encode_latents(state.model, data::Sample{}, true), std::exception);
    train::compute_calibration(state.model, ds, tc, 31);
    CHECK(state.model.has_calibration);
    CHECK(state.model.calib_sigma.minCoeff() > 0.0f);

    // Re-encoding calibration-style latents and standardizing them should
    // give roughly zero-mean, unit-variance coordinates.
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(32), sq = Eigen::ArrayXd::Zero(32);
    int rows = 0;
    Rng rng(31);
    for (int rep = 0; rep < 12; ++rep) {
        data::ShapeSample shape{28, 28, 2, 1};
        const auto batch = ds.make_batch(shape, rng);
        const auto z = train::encode_latents(state.model, batch.samples[0], true);
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            mean += z.row(r).cast<double>().array();
            sq += z.row(r).cast<double>().array().square();
            ++rows;
        }
    }
    mean /= rows;
    sq /= rows;
    // The calibration pass draws its own shapes and masks, so the bounds
    // are loose; the point is that standardization centers and scales.
    CHECK(mean.abs().maxCoeff() < 2.0);
    CHECK((sq - mean.square()).maxCoeff() < 10.0);
    CHECK((sq - mean.square()).minCoeff() > 0.01);
}

TEST_CASE("condition tokens carry visibility tags and labels") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 29);
    train::compute_calibration(state.model, ds, tc, 1);
    Rng rng(2);
    data::ShapeSample shape{28, 28, 2, 1};
    const auto batch = ds.make_batch(shape, rng);
    const auto& sample = batch.samples[0];

    const auto all = train::make_condition(state.model, sample, {true, true}, std::nullopt);
    CHECK(all.tag == dit::ConditionTag::SparseView);
    CHECK(!all.label.has_value());
    const auto one = train::make_condition(state.model, sample, {true, false}, 3);
    CHECK(one.tag == dit::ConditionTag::SingleView);
    CHECK(one.label == 3);
    const auto none = train::make_condition(state.model, sample, {false, false}, std::nullopt);
    CHECK(none.tag == dit::ConditionTag::Uncond);
    CHECK(one.tokens.rows() == 4);
    CHECK(one.tokens.cols() == 32);
    // Hiding a view changes the condition tokens.
    CHECK((all.tokens - one.tokens).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("diffusion steps are deterministic and leave the autoencoder frozen") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto rae_state = train::init_rae_state(tiny_rae_cfg(), tc, 37);
    train::compute_calibration(rae_state.model, ds, tc, 5);
    const double rae_norm = rae_state.model.params.global_norm();

    auto a = train::init_dit_state(tiny_dit_cfg(5), tc, data::Stage::DitStage1, 41);
    auto b = train::init_dit_state(tiny_dit_cfg(5), tc, data::Stage::DitStage1, 41);
    const auto sa = train::dit_train_step(a, rae_state.model, ds, tc);
    const auto sb = train::dit_train_step(b, rae_state.model, ds, tc);
    CHECK(sa.loss == sb.loss);
    CHECK(sa.loss > 0.0);
    CHECK(std::isfinite(sa.grad_norm));
    CHECK(stores_identical(a.model.params, b.model.params));
    CHECK(rae_state.model.params.global_norm() == rae_norm);

    // EMA tracks but does not equal the online weights after a step.
    CHECK(!stores_identical(a.ema, a.model.params));
}

TEST_CASE("diffusion checkpoint round trip") {
    const auto tc = tiny_train_cfg();
    data::Dataset ds(fixture_root());
    auto rae_state = train::init_rae_state(tiny_rae_cfg(), tc, 43);
    train::compute_calibration(rae_state.model, ds, tc, 5);
    auto state = train::init_dit_state(tiny_dit_cfg(5), tc, data::Stage::DitStage1, 47);
    for (int i = 0; i < 2; ++i) {
        train::dit_train_step(state, rae_state.model, ds, tc);
        ++state.step;
    }
    const fs::path dir = fs::temp_directory_path() / "l3d_dit_ckpt";
    fs::remove_all(dir);
    train::save_dit_state(dir, state);
    auto back = train::load_dit_state(dir);
    CHECK(back.step == state.step);
    CHECK(back.stage == data::Stage::DitStage1);
    CHECK(stores_identical(back.model.params, state.model.params));
    CHECK(stores_identical(back.ema, state.ema));
    CHECK(back.rng.serialize() == state.rng.serialize());
    fs::remove_all(dir);
}

TEST_CASE("stage two removes the label table and logs the transition") {
    auto tc = tiny_train_cfg();
    tc.total = 2;
    tc.warmup = 1;
    data::Dataset ds(fixture_root());
    auto rae_state = train::init_rae_state(tiny_rae_cfg(), tc, 53);
    train::compute_calibration(rae_state.model, ds, tc, 5);
    auto state = train::init_dit_state(tiny_dit_cfg(5), tc, data::Stage::DitStage2, 59);
    CHECK(state.model.has_label_table());

    std::vector<std::string> lines;
    const fs::path out = fs::temp_directory_path() / "l3d_stage2";
    fs::remove_all(out);
    train::train_dit(tc, state, rae_state.model, ds, out,
                     [&](const std::string& l) { lines.push_back(l); });
    CHECK(!state.model.has_label_table());
    bool notice = false;
    for (const auto& l : lines)
        if (l.find("label") != std::string::npos) notice = true;
    CHECK(notice);
    CHECK(fs::exists(out / "metrics.tsv"));
    CHECK(fs::exists(out / "checkpoint"));
    fs::remove_all(out);
}

TEST_CASE("autoencoder training loop writes metrics and a checkpoint") {
    auto tc = tiny_train_cfg();
    tc.total = 3;
    tc.log_every = 1;
    data::Dataset ds(fixture_root());
    auto state = train::init_rae_state(tiny_rae_cfg(), tc, 61);
    const fs::path out = fs::temp_directory_path() / "l3d_rae_loop";
    fs::remove_all(out);
    train::train_rae(tc, state, ds, out);
    CHECK(state.step == 3);
    CHECK(fs::exists(out / "metrics.tsv"));
    std::ifstream metrics(out / "metrics.tsv");
    std::string line;
    int rows = 0;
    while (std::getline(metrics, line))
        if (!line.empty()) ++rows;
    CHECK(rows >= 3);
    const auto loaded = train::load_rae_state(out / "checkpoint");
    CHECK(loaded.step == 3);
    fs::remove_all(out);
}
