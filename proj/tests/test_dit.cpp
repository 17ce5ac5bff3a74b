#include <doctest.h>

#include <cmath>

#include "dit/dit.hpp"

using namespace l3d;

namespace {

dit::DiTConfig small_cfg(int n_classes = 0) {
    dit::DiTConfig cfg;
    cfg.depth = 1;
    cfg.width = 32;
    cfg.n_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.head_depth = 1;
    cfg.head_width = 32;
    cfg.head_heads = 2;
    cfg.latent_tokens = 4;
    cfg.latent_dim = 16;
    cfg.time_features = 8;
    cfg.base_dim = 64;
    cfg.n_classes = n_classes;
    return cfg;
}

dit::ConditionTokens random_cond(const dit::DiTConfig& cfg, std::uint64_t seed,
                                 dit::ConditionTag tag) {
    Rng rng(seed);
    dit::ConditionTokens cond;
    cond.tokens.resize(cfg.latent_tokens, cfg.latent_dim);
    for (Eigen::Index r = 0; r < cond.tokens.rows(); ++r)
        for (Eigen::Index c = 0; c < cond.tokens.cols(); ++c)
            cond.tokens(r, c) = static_cast<float>(rng.normal());
    cond.tag = tag;
    return cond;
}

}  // namespace

TEST_CASE("timestep shift is identity when token-times-dim equals the base") {
    // N * M = D -> alpha = 1 -> no shift.
    for (double t : {0.0, 0.2, 0.5, 0.9, 1.0})
        CHECK(dit::timestep_shift(t, 64, 64, 4096) == doctest::Approx(t).epsilon(1e-12));
}

TEST_CASE("timestep shift matches an extended-precision oracle") {
    const std::int64_t n = 1024, m = 768, d = 4096;
    const long double alpha = sqrtl(static_cast<long double>(n) * m / d);
    CHECK(static_cast<double>(alpha) == doctest::Approx(std::sqrt(192.0)).epsilon(1e-14));
    for (double t : {0.01, 0.25, 0.5, 0.75, 0.99}) {
        const long double expected = alpha * t / (1.0L + (alpha - 1.0L) * t);
        CHECK(dit::timestep_shift(t, n, m, d) ==
              doctest::Approx(static_cast<double>(expected)).epsilon(1e-10));
    }
    // Frozen spot value at t = 0.5: alpha / (1 + alpha).
    CHECK(dit::timestep_shift(0.5, n, m, d) == doctest::Approx(0.9326889).epsilon(1e-6));
    // Endpoints are fixed points for any alpha.
    CHECK(dit::timestep_shift(0.0, n, m, d) == 0.0);
    CHECK(dit::timestep_shift(1.0, n, m, d) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("timestep shift inverse round-trips") {
    for (double t : {0.0, 0.1, 0.37, 0.5, 0.88, 1.0}) {
        const double tm = dit::timestep_shift(t, 256, 128, 4096);
        CHECK(dit::timestep_shift_inverse(tm, 256, 128, 4096) ==
              doctest::Approx(t).epsilon(1e-12));
    }
    // Shift is monotone, so the grid stays ordered.
    double prev = -1;
    for (int i = 0; i <= 10; ++i) {
        const double tm = dit::timestep_shift(i / 10.0, 256, 128, 4096);
        CHECK(tm > prev);
        prev = tm;
    }
}

TEST_CASE("interpolation endpoints and validation") {
    ad::Mat<float> z0 = ad::Mat<float>::Random(4, 8);
    ad::Mat<float> eps = ad::Mat<float>::Random(4, 8);
    CHECK((dit::fm_interpolate(z0, eps, 0.0) - z0).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((dit::fm_interpolate(z0, eps, 1.0) - eps).cwiseAbs().maxCoeff() == 0.0f);
    const auto mid = dit::fm_interpolate(z0, eps, 0.5);
    CHECK((mid - ad::Mat<float>(0.5f * z0 + 0.5f * eps)).cwiseAbs().maxCoeff() < 1e-7f);
    CHECK_THROWS_AS(dit::fm_interpolate(z0, ad::Mat<float>(ad::Mat<float>::Zero(3, 8)), 0.5),
                    ad::ShapeError);
    CHECK_THROWS_AS(dit::fm_interpolate(z0, eps, 1.5), std::invalid_argument);
}

TEST_CASE("condition tags from visible view counts") {
    CHECK(dit::tag_for_visible_count(0) == dit::ConditionTag::Uncond);
    CHECK(dit::tag_for_visible_count(1) == dit::ConditionTag::SingleView);
    CHECK(dit::tag_for_visible_count(2) == dit::ConditionTag::SparseView);
    CHECK(dit::tag_for_visible_count(8) == dit::ConditionTag::SparseView);
}

TEST_CASE("size presets") {
    dit::DiTConfig cfg = small_cfg();
    dit::apply_size_preset(cfg, "S");
    CHECK(cfg.depth == 12);
    CHECK(cfg.width == 384);
    CHECK(cfg.n_heads == 6);
    dit::apply_size_preset(cfg, "XL");
    CHECK(cfg.depth == 28);
    CHECK(cfg.width == 1152);
    CHECK(cfg.n_heads == 16);
    dit::DiTConfig untouched = small_cfg();
    dit::apply_size_preset(untouched, "custom");
    CHECK(untouched.width == 32);
    CHECK_THROWS_AS(dit::apply_size_preset(cfg, "XXL"), io::ConfigError);
}

TEST_CASE("a fresh model predicts exactly zero velocity") {
    auto model = dit::DiTModel<double>::init(small_cfg(), 1);
    ad::Tape<double> tape;
    nn::Ctx<double> ctx{tape, model.params, false};
    auto z = ad::constant(tape, ad::Mat<double>(ad::Mat<double>::Random(4, 16)));
    auto cond = random_cond(model.cfg, 2, dit::ConditionTag::SparseView);
    auto v = model.velocity(ctx, z,
                            ad::constant(tape, ad::Mat<double>(cond.tokens.cast<double>())), 0.5,
                            std::nullopt);
    CHECK(v.rows() == 4);
    CHECK(v.cols() == 16);
    CHECK(v.val().cwiseAbs().maxCoeff() == 0.0);  // zero-init output head
}

TEST_CASE("sampling from a zero-velocity model returns the initial noise") {
    auto model = dit::DiTModel<float>::init(small_cfg(), 3);
    auto cond = random_cond(model.cfg, 4, dit::ConditionTag::SingleView);
    auto uncond = random_cond(model.cfg, 5, dit::ConditionTag::Uncond);
    const auto z = model.sample(cond, uncond, 4, 2.0, 99);
    Rng rng(99);
    ad::Mat<float> expected(4, 16);
    for (Eigen::Index r = 0; r < 4; ++r)
        for (Eigen::Index c = 0; c < 16; ++c) expected(r, c) = static_cast<float>(rng.normal());
    CHECK((z - expected).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("single-step sampling follows one Euler update") {
    auto model = dit::DiTModel<double>::init(small_cfg(), 7);
    // Perturb the output head so the velocity is nonzero.
    Rng prng(8);
    nn::init_gaussian(model.params.params.at("head.out.w"), prng, 0.05);
    auto cond = random_cond(model.cfg, 9, dit::ConditionTag::SparseView);
    auto uncond = random_cond(model.cfg, 10, dit::ConditionTag::Uncond);

    const auto z_out = model.sample(cond, uncond, 1, 1.0, 55);
    Rng rng(55);
    ad::Mat<double> eps(4, 16);
    for (Eigen::Index r = 0; r < 4; ++r)
        for (Eigen::Index c = 0; c < 16; ++c) eps(r, c) = rng.normal();
    ad::Tape<double> tape;
    nn::Ctx<double> ctx{tape, model.params, false};
    const auto v = model
                       .velocity(ctx, ad::constant(tape, eps),
                                 ad::constant(tape, ad::Mat<double>(cond.tokens.cast<double>())),
                                 1.0, std::nullopt)
                       .val();
    // dt spans the whole shifted grid: shift(1) - shift(0) = 1.
    CHECK((z_out - ad::Mat<double>(eps - v)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("guidance is skipped at scale one and for unconditional tags") {
    auto model = dit::DiTModel<float>::init(small_cfg(), 11);
    Rng prng(12);
    nn::init_gaussian(model.params.params.at("head.out.w"), prng, 0.05);
    // Open the modulation gates so attention mixes condition tokens into the
    // latent rows; otherwise the fresh blocks act token-wise.
    nn::init_gaussian(model.params.params.at("block0.mod2.w"), prng, 0.1);
    auto cond = random_cond(model.cfg, 13, dit::ConditionTag::SparseView);
    auto ua = random_cond(model.cfg, 14, dit::ConditionTag::Uncond);
    auto ub = random_cond(model.cfg, 15, dit::ConditionTag::Uncond);

    // scale 1: the guidance branch must never be evaluated, so swapping it
    // out cannot change the result.
    const auto a = model.sample(cond, ua, 3, 1.0, 77);
    const auto b = model.sample(cond, ub, 3, 1.0, 77);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);

    // An uncond-tagged condition skips guidance even at scale 2.
    auto uncond_as_cond = random_cond(model.cfg, 16, dit::ConditionTag::Uncond);
    const auto c = model.sample(uncond_as_cond, ua, 3, 2.0, 77);
    const auto d = model.sample(uncond_as_cond, ub, 3, 1.0, 77);
    CHECK((c - d).cwiseAbs().maxCoeff() == 0.0f);

    // At scale != 1 with a real condition, guidance does alter the output.
    const auto e = model.sample(cond, ua, 3, 2.0, 77);
    CHECK((a - e).cwiseAbs().maxCoeff() > 0.0f);

    CHECK_THROWS_AS(model.sample(cond, cond, 3, 2.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(model.sample(cond, ua, 0, 2.0, 1), std::invalid_argument);
}

TEST_CASE("label conditioning requires a table and a valid index") {
    auto with_labels = dit::DiTModel<double>::init(small_cfg(4), 21);
    CHECK(with_labels.has_label_table());
    auto without = dit::DiTModel<double>::init(small_cfg(0), 22);
    CHECK(!without.has_label_table());

    ad::Tape<double> tape;
    nn::Ctx<double> ctx{tape, with_labels.params, false};
    CHECK_NOTHROW(with_labels.condition_vector(ctx, 0.3, 2));
    CHECK_THROWS_AS(with_labels.condition_vector(ctx, 0.3, 7), std::invalid_argument);
    ad::Tape<double> tape2;
    nn::Ctx<double> ctx2{tape2, without.params, false};
    CHECK_THROWS_AS(without.condition_vector(ctx2, 0.3, 1), nn::StateError);
    CHECK_NOTHROW(without.condition_vector(ctx2, 0.3, std::nullopt));

    // Different labels produce different modulation vectors.
    const auto v0 = with_labels.condition_vector(ctx, 0.3, 0).val();
    const auto v1 = with_labels.condition_vector(ctx, 0.3, 1).val();
    CHECK((v0 - v1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("flow matching loss of a zero-velocity model is the target energy") {
    auto model = dit::DiTModel<double>::init(small_cfg(), 31);
    ad::Mat<double> z0 = ad::Mat<double>::Random(4, 16);
    auto cond = random_cond(model.cfg, 32, dit::ConditionTag::SparseView);

    Rng rng(41);
    Rng clone(41);
    ad::Tape<double> tape;
    nn::Ctx<double> ctx{tape, model.params, true};
    const double loss = model.fm_loss(ctx, z0, cond, rng).val()(0, 0);

    // Replay the same draws: one uniform for t, then the noise matrix.
    (void)clone.uniform();
    ad::Mat<double> eps(4, 16);
    for (Eigen::Index r = 0; r < 4; ++r)
        for (Eigen::Index c = 0; c < 16; ++c) eps(r, c) = clone.normal();
    const double expected = (eps - z0).array().square().mean();
    CHECK(loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("frozen time frequencies receive no gradient") {
    auto model = dit::DiTModel<double>::init(small_cfg(), 51);
    ad::Tape<double> tape;
    nn::Ctx<double> ctx{tape, model.params, true};
    auto cond = random_cond(model.cfg, 52, dit::ConditionTag::SparseView);
    Rng rng(53);
    auto loss = model.fm_loss(ctx, ad::Mat<double>(ad::Mat<double>::Random(4, 16)), cond, rng);
    tape.backward(loss.id);
    std::map<std::string, ad::Mat<double>> grads;
    ctx.collect_grads(grads);
    CHECK(grads.count("time.freq") == 0);
    CHECK(grads.count("time.mlp1.w") == 1);
}
