#include "train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "io/container.hpp"

namespace l3d::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (peak_lr <= 0.0 || floor_lr < 0.0 || floor_lr > peak_lr)
        throw io::ConfigError("train: bad learning-rate range");
    if (warmup < 0 || total < 1 || warmup >= total)
        throw io::ConfigError("train: warmup must be < total");
    if (grad_clip <= 0.0) throw io::ConfigError("train: grad_clip must be > 0");
    if (adv_start < disc_start)
        throw io::ConfigError("train: adv_start must be >= disc_start");
    if (cond_drop < 0.0 || cond_drop > 1.0)
        throw io::ConfigError("train: cond_drop must be in [0, 1]");
    if (calib_latents < 1) throw io::ConfigError("train: calib_latents must be >= 1");
    budget.validate();
    rae_mask.validate();
    dit_mask.validate();
}

TrainConfig TrainConfig::from_config(const io::Config& cfg) {
    TrainConfig c;
    c.peak_lr = cfg.get_double("train.peak_lr", c.peak_lr);
    c.floor_lr = cfg.get_double("train.floor_lr", c.floor_lr);
    c.warmup = cfg.get_int("train.warmup", c.warmup);
    c.total = cfg.get_int("train.total", c.total);
    c.beta1 = cfg.get_double("train.beta1", c.beta1);
    c.beta2 = cfg.get_double("train.beta2", c.beta2);
    c.grad_clip = cfg.get_double("train.grad_clip", c.grad_clip);
    c.weight_decay = cfg.get_double("train.weight_decay", c.weight_decay);
    c.disc_start = cfg.get_int("train.disc_start", c.disc_start);
    c.adv_start = cfg.get_int("train.adv_start", c.adv_start);
    c.cond_drop = cfg.get_double("train.cond_drop", c.cond_drop);
    c.disc_lr_scale = cfg.get_double("train.disc_lr_scale", c.disc_lr_scale);
    c.log_every = cfg.get_int("train.log_every", c.log_every);
    c.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    c.calib_latents = static_cast<int>(cfg.get_int("train.calib_latents", c.calib_latents));

    c.budget.patch = static_cast<int>(cfg.get_int("budget.patch", c.budget.patch));
    c.budget.pixel_min = static_cast<int>(cfg.get_int("budget.pixel_min", c.budget.pixel_min));
    c.budget.pixel_max = static_cast<int>(cfg.get_int("budget.pixel_max", c.budget.pixel_max));
    c.budget.aspect_min = cfg.get_double("budget.aspect_min", c.budget.aspect_min);
    c.budget.aspect_max = cfg.get_double("budget.aspect_max", c.budget.aspect_max);
    c.budget.views_min = static_cast<int>(cfg.get_int("budget.views_min", c.budget.views_min));
    c.budget.views_max = static_cast<int>(cfg.get_int("budget.views_max", c.budget.views_max));
    c.budget.token_budget =
        static_cast<int>(cfg.get_int("budget.token_budget", c.budget.token_budget));

    auto mask = [&cfg](const std::string& section, data::MaskPolicy& p) {
        p.mask_probability = cfg.get_double(section + ".probability", p.mask_probability);
        p.ratio_min = cfg.get_double(section + ".ratio_min", p.ratio_min);
        p.ratio_max = cfg.get_double(section + ".ratio_max", p.ratio_max);
        p.drop_all_probability = cfg.get_double(section + ".drop_all", p.drop_all_probability);
    };
    mask("rae_mask", c.rae_mask);
    mask("dit_mask", c.dit_mask);
    c.validate();
    return c;
}

void TrainConfig::echo(io::Config& cfg) const {
    cfg.set("train.peak_lr", std::to_string(peak_lr));
    cfg.set("train.floor_lr", std::to_string(floor_lr));
    cfg.set("train.warmup", std::to_string(warmup));
    cfg.set("train.total", std::to_string(total));
    cfg.set("train.beta1", std::to_string(beta1));
    cfg.set("train.beta2", std::to_string(beta2));
    cfg.set("train.grad_clip", std::to_string(grad_clip));
    cfg.set("train.weight_decay", std::to_string(weight_decay));
    cfg.set("train.disc_start", std::to_string(disc_start));
    cfg.set("train.adv_start", std::to_string(adv_start));
    cfg.set("train.cond_drop", std::to_string(cond_drop));
    cfg.set("train.disc_lr_scale", std::to_string(disc_lr_scale));
    cfg.set("train.log_every", std::to_string(log_every));
    cfg.set("train.seed", std::to_string(seed));
    cfg.set("train.calib_latents", std::to_string(calib_latents));
    cfg.set("budget.patch", std::to_string(budget.patch));
    cfg.set("budget.pixel_min", std::to_string(budget.pixel_min));
    cfg.set("budget.pixel_max", std::to_string(budget.pixel_max));
    cfg.set("budget.aspect_min", std::to_string(budget.aspect_min));
    cfg.set("budget.aspect_max", std::to_string(budget.aspect_max));
    cfg.set("budget.views_min", std::to_string(budget.views_min));
    cfg.set("budget.views_max", std::to_string(budget.views_max));
    cfg.set("budget.token_budget", std::to_string(budget.token_budget));
    auto mask = [&cfg](const std::string& section, const data::MaskPolicy& p) {
        cfg.set(section + ".probability", std::to_string(p.mask_probability));
        cfg.set(section + ".ratio_min", std::to_string(p.ratio_min));
        cfg.set(section + ".ratio_max", std::to_string(p.ratio_max));
        cfg.set(section + ".drop_all", std::to_string(p.drop_all_probability));
    };
    mask("rae_mask", rae_mask);
    mask("dit_mask", dit_mask);
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw io::ConfigError("lr_schedule: negative step");
    const std::int64_t s = std::min(step, cfg.total);
    if (s < cfg.warmup)
        return cfg.peak_lr * static_cast<double>(s) / static_cast<double>(cfg.warmup);
    const double progress = static_cast<double>(s - cfg.warmup) /
                            static_cast<double>(cfg.total - cfg.warmup);
    return cfg.floor_lr +
           (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

namespace {

io::TensorArray mat_to_tensor(const Mat<float>& m) {
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    return io::TensorArray::from_f32(
        {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
        std::move(data));
}

Mat<float> tensor_to_mat(const io::TensorArray& t) {
    if (t.dims.size() != 2 || t.dtype != io::Dtype::f32)
        throw io::FormatError("expected a 2-D f32 tensor", 0);
    Mat<float> m(t.dims[0], t.dims[1]);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = t.f32[static_cast<std::size_t>(r * m.cols() + c)];
    return m;
}

void save_moment_map(const fs::path& dir, const std::map<std::string, Mat<float>>& mats) {
    nn::ParamStore<float> tmp;
    tmp.params = mats;
    save_store(dir, tmp);
}

std::map<std::string, Mat<float>> load_moment_map(const fs::path& dir) {
    if (!fs::exists(dir)) return {};
    return load_store(dir).params;
}

std::ofstream open_metrics(const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const fs::path path = out_dir / "metrics.tsv";
    const bool fresh = !fs::exists(path);
    std::ofstream os(path, std::ios::app);
    if (!os) throw io::ConfigError("cannot open metrics log: " + path.string());
    if (fresh) os << "step\tseconds\tlr\tcomponents...\n";
    return os;
}

}  // namespace

void save_store(const fs::path& dir, const nn::ParamStore<float>& store) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& [name, value] : store.params)
        io::write_container(dir / (name + ".ten"), mat_to_tensor(value));
}

nn::ParamStore<float> load_store(const fs::path& dir) {
    nn::ParamStore<float> store;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".ten") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files)
        store.params[path.stem().string()] = tensor_to_mat(io::read_container(path));
    return store;
}

RaeState init_rae_state(const rae::RAEConfig& cfg, const TrainConfig& tc, std::uint64_t seed) {
    RaeState state{rae::RAEModel<float>::init(cfg, seed), {}, {}, {}, Rng(seed ^ 0x5eedf00dull),
                   0};
    rae::init_discriminator(state.disc, cfg.patch, cfg.disc_hidden, seed ^ 0xd15cull);
    state.opt.beta1 = state.disc_opt.beta1 = tc.beta1;
    state.opt.beta2 = state.disc_opt.beta2 = tc.beta2;
    state.opt.weight_decay = state.disc_opt.weight_decay = tc.weight_decay;
    return state;
}

void save_rae_state(const fs::path& dir, const RaeState& state) {
    fs::create_directories(dir);
    save_store(dir / "params", state.model.params);
    save_store(dir / "frozen", state.model.frozen);
    save_store(dir / "disc", state.disc);
    save_moment_map(dir / "opt_m", state.opt.m);
    save_moment_map(dir / "opt_v", state.opt.v);
    save_moment_map(dir / "disc_m", state.disc_opt.m);
    save_moment_map(dir / "disc_v", state.disc_opt.v);
    if (state.model.has_calibration) {
        io::write_container(dir / "calib_mu.ten", mat_to_tensor(state.model.calib_mu));
        io::write_container(dir / "calib_sigma.ten", mat_to_tensor(state.model.calib_sigma));
    }
    io::Config meta;
    state.model.cfg.echo(meta);
    meta.set("meta.kind", "rae");
    meta.set("meta.step", std::to_string(state.step));
    meta.set("meta.opt_step", std::to_string(state.opt.step_count));
    meta.set("meta.disc_opt_step", std::to_string(state.disc_opt.step_count));
    meta.set("meta.rng", state.rng.serialize());
    meta.set("meta.has_calibration", state.model.has_calibration ? "1" : "0");
    meta.save(dir / "meta.cfg");
}

RaeState load_rae_state(const fs::path& dir) {
    const io::Config meta = io::Config::load(dir / "meta.cfg");
    if (meta.get_string("meta.kind", "") != "rae")
        throw io::ConfigError("not an autoencoder checkpoint: " + dir.string());
    RaeState state;
    state.model.cfg = rae::RAEConfig::from_config(meta);
    state.model.params = load_store(dir / "params");
    state.model.frozen = load_store(dir / "frozen");
    state.disc = load_store(dir / "disc");
    state.opt.m = load_moment_map(dir / "opt_m");
    state.opt.v = load_moment_map(dir / "opt_v");
    state.disc_opt.m = load_moment_map(dir / "disc_m");
    state.disc_opt.v = load_moment_map(dir / "disc_v");
    state.step = meta.get_int("meta.step", 0);
    state.opt.step_count = meta.get_int("meta.opt_step", 0);
    state.disc_opt.step_count = meta.get_int("meta.disc_opt_step", 0);
    state.rng.deserialize(meta.require_string("meta.rng"));
    state.model.has_calibration = meta.get_bool("meta.has_calibration", false);
    if (state.model.has_calibration) {
        state.model.calib_mu = tensor_to_mat(io::read_container(dir / "calib_mu.ten"));
        state.model.calib_sigma = tensor_to_mat(io::read_container(dir / "calib_sigma.ten"));
    } else {
        state.model.calib_mu = Mat<float>::Zero(1, state.model.cfg.hidden);
        state.model.calib_sigma = Mat<float>::Ones(1, state.model.cfg.hidden);
    }
    return state;
}

namespace {
std::string stage_name(data::Stage stage) {
    switch (stage) {
        case data::Stage::Rae: return "rae";
        case data::Stage::DitStage1: return "dit_stage1";
        case data::Stage::DitStage2: return "dit_stage2";
    }
    return "rae";
}
data::Stage stage_from_name(const std::string& name) {
    if (name == "rae") return data::Stage::Rae;
    if (name == "dit_stage1") return data::Stage::DitStage1;
    if (name == "dit_stage2") return data::Stage::DitStage2;
    throw io::ConfigError("unknown stage: " + name);
}
}  // namespace

DitState init_dit_state(const dit::DiTConfig& cfg, const TrainConfig& tc, data::Stage stage,
                        std::uint64_t seed) {
    DitState state{dit::DiTModel<float>::init(cfg, seed), {}, {}, Rng(seed ^ 0xd17f00dull), 0,
                   stage};
    state.ema = state.model.params;  // shadow starts at initialization
    state.opt.beta1 = tc.beta1;
    state.opt.beta2 = tc.beta2;
    state.opt.weight_decay = tc.weight_decay;
    return state;
}

void save_dit_state(const fs::path& dir, const DitState& state) {
    fs::create_directories(dir);
    save_store(dir / "params", state.model.params);
    save_store(dir / "ema", state.ema);
    save_moment_map(dir / "opt_m", state.opt.m);
    save_moment_map(dir / "opt_v", state.opt.v);
    io::Config meta;
    state.model.cfg.echo(meta);
    meta.set("meta.kind", "dit");
    meta.set("meta.step", std::to_string(state.step));
    meta.set("meta.opt_step", std::to_string(state.opt.step_count));
    meta.set("meta.rng", state.rng.serialize());
    meta.set("meta.stage", stage_name(state.stage));
    meta.save(dir / "meta.cfg");
}

DitState load_dit_state(const fs::path& dir) {
    const io::Config meta = io::Config::load(dir / "meta.cfg");
    if (meta.get_string("meta.kind", "") != "dit")
        throw io::ConfigError("not a diffusion checkpoint: " + dir.string());
    DitState state;
    state.model.cfg = dit::DiTConfig::from_config(meta);
    state.model.params = load_store(dir / "params");
    state.ema = load_store(dir / "ema");
    state.opt.m = load_moment_map(dir / "opt_m");
    state.opt.v = load_moment_map(dir / "opt_v");
    state.step = meta.get_int("meta.step", 0);
    state.opt.step_count = meta.get_int("meta.opt_step", 0);
    state.rng.deserialize(meta.require_string("meta.rng"));
    state.stage = stage_from_name(meta.get_string("meta.stage", "dit_stage1"));
    return state;
}

// ---------------------------------------------------------------------------
// Shared forward helpers
// ---------------------------------------------------------------------------

Mat<float> encode_latents(const rae::RAEModel<float>& model, const data::Sample& sample,
                          bool standardized) {
    ad::Tape<float> tape;
    nn::Ctx<float> ctx{tape, model.params, false};
    const auto encoder = model.imgonly_encoder();
    ad::Var<float> z = model.encode(ctx, sample, encoder);
    Mat<float> out = z.val();
    return standardized ? model.standardize(out) : out;
}

void compute_calibration(rae::RAEModel<float>& model, const data::Dataset& dataset,
                         const TrainConfig& tc, std::uint64_t seed) {
    Rng rng(seed);
    const int d = model.cfg.hidden;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(d);
    std::int64_t rows = 0;
    while (rows < tc.calib_latents) {
        const data::ShapeSample shape = data::sample_shape(tc.budget, rng);
        data::MultiViewBatch batch = dataset.make_batch(shape, rng);
        for (const auto& sample : batch.samples) {
            const Mat<float> z = encode_latents(model, sample, false);
            for (Eigen::Index r = 0; r < z.rows(); ++r) {
                const Eigen::VectorXd row = z.row(r).transpose().cast<double>();
                sum += row;
                sumsq += row.cwiseProduct(row);
                ++rows;
            }
            if (rows >= tc.calib_latents) break;
        }
    }
    const double n = static_cast<double>(rows);
    model.calib_mu = (sum / n).transpose().cast<float>();
    Eigen::VectorXd var = sumsq / n - (sum / n).cwiseProduct(sum / n);
    model.calib_sigma =
        (var.array().max(0.0) + 1e-6).sqrt().matrix().transpose().cast<float>();
    model.has_calibration = true;
}

dit::ConditionTokens make_condition(const rae::RAEModel<float>& model, data::Sample sample,
                                    const std::vector<bool>& visibility,
                                    std::optional<int> label) {
    if (visibility.size() != sample.views.size())
        throw geom::ValidationError("make_condition: visibility length mismatch");
    sample.visible = visibility;
    int n_visible = 0;
    for (bool v : visibility) n_visible += v ? 1 : 0;
    dit::ConditionTokens cond;
    cond.tokens = encode_latents(model, sample, true);
    cond.tag = dit::tag_for_visible_count(n_visible);
    cond.label = label;
    return cond;
}

// ---------------------------------------------------------------------------
// RAE training step
// ---------------------------------------------------------------------------

RaeStepStats rae_train_step(RaeState& state, const data::Dataset& dataset,
                            const TrainConfig& tc) {
    rae::RAEModel<float>& model = state.model;
    const rae::RAEConfig& mc = model.cfg;
    const std::string rng_before = state.rng.serialize();

    const data::ShapeSample shape = data::sample_shape(tc.budget, state.rng);
    data::MultiViewBatch batch = dataset.make_batch(shape, state.rng);
    batch = data::apply_view_mask(std::move(batch), tc.rae_mask, data::Stage::Rae, state.rng);

    const bool disc_on = state.step >= tc.disc_start;
    const bool adv_on = state.step >= tc.adv_start;
    const double n_samples = static_cast<double>(batch.samples.size());
    const auto encoder = model.imgonly_encoder();

    RaeStepStats stats;
    stats.lr = lr_schedule(state.step, tc);
    nn::GradMap grads;
    std::vector<std::pair<Mat<float>, Mat<float>>> real_fake;  // for the disc step

    for (const auto& sample : batch.samples) {
        ad::Tape<float> tape;
        nn::Ctx<float> ctx{tape, model.params, true};
        nn::Ctx<float> dctx{tape, state.disc, false};

        ad::Var<float> z = model.encode(ctx, sample, encoder);
        if (mc.noise_tau > 0.0) {
            Mat<float> noise = rae::latent_noise<float>(z.rows(), z.cols(), mc.noise_tau,
                                                        state.rng);
            z = ad::add(z, ad::constant(tape, std::move(noise)));
        }

        // Targets: every masked view plus one random visible view.
        std::vector<int> targets, visible_idx;
        for (std::size_t i = 0; i < sample.views.size(); ++i) {
            if (sample.visible[i])
                visible_idx.push_back(static_cast<int>(i));
            else
                targets.push_back(static_cast<int>(i));
        }
        if (!visible_idx.empty())
            targets.push_back(
                visible_idx[state.rng.uniform_index(visible_idx.size())]);
        if (targets.empty()) continue;

        ad::Var<float> sample_loss{};
        bool have_loss = false;
        for (int ti : targets) {
            const auto& view = sample.views[static_cast<std::size_t>(ti)];
            ad::Var<float> pred = model.decode_image(ctx, z, view.camera);
            ad::Var<float> gt = ad::constant(
                tape, rae::detail::image_rows<float>(view.image, view.height, view.width, 3));
            ad::Var<float> l_mse = ad::mse(pred, gt);
            ad::Var<float> l_perc =
                rae::perceptual_proxy(pred, gt, view.height, view.width);

            rae::PointMapPrediction<float> pm = model.decode_pointmap(ctx, z, view.camera);
            ad::Var<float> gt_points = ad::constant(
                tape,
                rae::detail::image_rows<float>(view.pointmap, view.height, view.width, 3));
            ad::Var<float> l_pmap =
                rae::pointmap_loss(pm, gt_points, view.valid, mc.lambda_conf);

            ad::Var<float> loss = ad::add(
                l_mse, ad::add(ad::scale(l_perc, static_cast<float>(mc.lambda1)),
                               ad::scale(l_pmap, static_cast<float>(mc.lambda3))));
            float adv_value = 0.0f;
            if (adv_on) {
                ad::Var<float> score = rae::discriminator_score(dctx, pred, view.height,
                                                                view.width, mc.patch);
                ad::Var<float> g_adv = ad::neg(score);
                adv_value = g_adv.val()(0, 0);
                loss = ad::add(loss, ad::scale(g_adv, static_cast<float>(mc.lambda2)));
            }
            if (disc_on) real_fake.emplace_back(gt.val(), pred.val());

            const double norm = 1.0 / (static_cast<double>(targets.size()) * n_samples);
            stats.mse += l_mse.val()(0, 0) * norm;
            stats.perceptual += l_perc.val()(0, 0) * norm;
            stats.pointmap += l_pmap.val()(0, 0) * norm;
            stats.adversarial += adv_value * norm;

            sample_loss = have_loss ? ad::add(sample_loss, loss) : loss;
            have_loss = true;
        }
        ad::Var<float> scaled = ad::scale(
            sample_loss,
            static_cast<float>(1.0 / (static_cast<double>(targets.size()) * n_samples)));
        stats.total += scaled.val()(0, 0);
        tape.backward(scaled.id);
        ctx.collect_grads(grads);
    }

    if (!std::isfinite(stats.total))
        throw ad::NumericError("non-finite loss at step " + std::to_string(state.step) +
                               "; batch rng state: " + rng_before);

    stats.grad_norm = nn::clip_grad_norm(grads, tc.grad_clip);
    state.opt.step(model.params, grads, stats.lr);

    if (disc_on && !real_fake.empty()) {
        ad::Tape<float> tape;
        nn::Ctx<float> dctx{tape, state.disc, true};
        ad::Var<float> loss{};
        bool have = false;
        for (const auto& [real, fake] : real_fake) {
            const int h = batch.height, w = batch.width;
            ad::Var<float> d_real = rae::discriminator_score(
                dctx, ad::constant(tape, real), h, w, mc.patch);
            ad::Var<float> d_fake = rae::discriminator_score(
                dctx, ad::constant(tape, fake), h, w, mc.patch);
            ad::Var<float> l = rae::hinge_d_loss(d_real, d_fake);
            loss = have ? ad::add(loss, l) : l;
            have = true;
        }
        loss = ad::scale(loss, static_cast<float>(1.0 / real_fake.size()));
        stats.disc_loss = loss.val()(0, 0);
        tape.backward(loss.id);
        nn::GradMap d_grads;
        dctx.collect_grads(d_grads);
        nn::clip_grad_norm(d_grads, tc.grad_clip);
        state.disc_opt.step(state.disc, d_grads, stats.lr * tc.disc_lr_scale);
    }

    ++state.step;
    return stats;
}

// ---------------------------------------------------------------------------
// DiT training step
// ---------------------------------------------------------------------------

DitStepStats dit_train_step(DitState& state, const rae::RAEModel<float>& rae_model,
                            const data::Dataset& dataset, const TrainConfig& tc) {
    if (!rae_model.has_calibration)
        throw nn::StateError("diffusion training requires a calibrated autoencoder");
    const std::string rng_before = state.rng.serialize();

    data::ShapeSample shape = data::sample_shape(tc.budget, state.rng);
    if (state.stage == data::Stage::DitStage1) shape.n_views = 1;
    data::MultiViewBatch batch = dataset.make_batch(shape, state.rng);

    DitStepStats stats;
    stats.lr = lr_schedule(state.step, tc);
    nn::GradMap grads;
    const double n_samples = static_cast<double>(batch.samples.size());

    for (const auto& sample : batch.samples) {
        const Mat<float> z0 = encode_latents(rae_model, sample, true);

        std::vector<bool> cond_visible(sample.views.size(), false);
        std::optional<int> label;
        if (state.stage == data::Stage::DitStage1) {
            // Pose-only condition; labels carry the content (dropped for CFG).
            if (state.model.has_label_table() && state.rng.uniform() >= tc.cond_drop)
                label = sample.category % state.model.cfg.n_classes;
        } else {
            data::MultiViewBatch one;
            one.height = batch.height;
            one.width = batch.width;
            one.samples.push_back(sample);
            one = data::apply_view_mask(std::move(one), tc.dit_mask, state.stage, state.rng);
            cond_visible = one.samples.front().visible;
        }
        const dit::ConditionTokens cond =
            make_condition(rae_model, sample, cond_visible, label);

        ad::Tape<float> tape;
        nn::Ctx<float> ctx{tape, state.model.params, true};
        ad::Var<float> loss = state.model.fm_loss(ctx, z0, cond, state.rng);
        ad::Var<float> scaled = ad::scale(loss, static_cast<float>(1.0 / n_samples));
        stats.loss += scaled.val()(0, 0);
        tape.backward(scaled.id);
        ctx.collect_grads(grads);
    }

    if (!std::isfinite(stats.loss))
        throw ad::NumericError("non-finite loss at step " + std::to_string(state.step) +
                               "; batch rng state: " + rng_before);

    stats.grad_norm = nn::clip_grad_norm(grads, tc.grad_clip);
    state.opt.step(state.model.params, grads, stats.lr);
    nn::ema_update(state.ema, state.model.params, state.model.cfg.ema_decay);
    ++state.step;
    return stats;
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

void train_rae(const TrainConfig& tc, RaeState& state, const data::Dataset& dataset,
               const fs::path& out_dir, const LogSink& log) {
    tc.validate();
    std::ofstream metrics = open_metrics(out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    while (state.step < tc.total) {
        const RaeStepStats s = rae_train_step(state, dataset, tc);
        if (state.step % tc.log_every == 0 || state.step == tc.total) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char line[256];
            std::snprintf(line, sizeof(line),
                          "%lld\t%.1f\t%.3g\ttotal=%.5f mse=%.5f perc=%.5f adv=%.5f "
                          "pmap=%.5f disc=%.5f gnorm=%.3f",
                          static_cast<long long>(state.step), secs, s.lr, s.total, s.mse,
                          s.perceptual, s.adversarial, s.pointmap, s.disc_loss, s.grad_norm);
            metrics << line << "\n";
            metrics.flush();
            if (log) log(line);
        }
    }
    save_rae_state(out_dir / "checkpoint", state);
}

void train_dit(const TrainConfig& tc, DitState& state, const rae::RAEModel<float>& rae_model,
               const data::Dataset& dataset, const fs::path& out_dir, const LogSink& log) {
    tc.validate();
    if (!rae_model.has_calibration)
        throw nn::StateError("diffusion training requires a calibrated autoencoder");
    if (state.stage == data::Stage::DitStage2 && state.model.params.has("label.table")) {
        state.model.params.params.erase("label.table");
        state.ema.params.erase("label.table");
        state.opt.m.erase("label.table");
        state.opt.v.erase("label.table");
        if (log) log("stage 2: label embedding table removed from the checkpoint");
    }
    const double frozen_norm = rae_model.params.global_norm();

    std::ofstream metrics = open_metrics(out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    while (state.step < tc.total) {
        const DitStepStats s = dit_train_step(state, rae_model, dataset, tc);
        if (state.step % tc.log_every == 0 || state.step == tc.total) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char line[160];
            std::snprintf(line, sizeof(line), "%lld\t%.1f\t%.3g\tfm=%.5f gnorm=%.3f",
                          static_cast<long long>(state.step), secs, s.lr, s.loss, s.grad_norm);
            metrics << line << "\n";
            metrics.flush();
            if (log) log(line);
        }
    }
    if (rae_model.params.global_norm() != frozen_norm)
        throw nn::StateError("frozen autoencoder parameters changed during diffusion training");
    save_dit_state(out_dir / "checkpoint", state);
}

}  // namespace l3d::train
