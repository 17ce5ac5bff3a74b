// Command-line front end: dataset generation, training, inference and
// verification. All randomness flows from --seed; --threads 1 is bit-exact.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "data/datapipe.hpp"
#include "dit/dit.hpp"
#include "eval/metrics.hpp"
#include "io/config.hpp"
#include "io/container.hpp"
#include "rae/rae.hpp"
#include "scenegen/scenegen.hpp"
#include "train/trainer.hpp"

namespace fs = std::filesystem;
using namespace l3d;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration file");
    cmd->add_option("--set", args.sets, "override, section.key=value")->take_all();
    cmd->add_option("--seed", args.seed, "run seed")->each([&args](const std::string&) {
        args.seed_given = true;
    });
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--threads", args.threads, "worker cap; 1 = bit-exact");
}

io::Config resolve_config(const CommonArgs& args) {
    io::Config cfg =
        args.config_path.empty() ? io::Config() : io::Config::load(args.config_path);
    for (const auto& kv : args.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw io::ConfigError("--set expects section.key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (args.seed_given) cfg.set("run.seed", std::to_string(args.seed));
    return cfg;
}

std::uint64_t run_seed(const io::Config& cfg) {
    return static_cast<std::uint64_t>(cfg.get_int("run.seed", 0));
}

fs::path require_out(const CommonArgs& args) {
    if (args.out.empty()) throw io::ConfigError("--out is required for this subcommand");
    fs::create_directories(args.out);
    return args.out;
}

void echo_config(const io::Config& cfg, const fs::path& out_dir) {
    cfg.save(out_dir / "config.cfg");
}

scenegen::SceneConfig scene_config(const io::Config& cfg) {
    scenegen::SceneConfig c;
    c.min_primitives = static_cast<int>(cfg.get_int("scene.min_primitives", c.min_primitives));
    c.max_primitives = static_cast<int>(cfg.get_int("scene.max_primitives", c.max_primitives));
    c.extent = cfg.get_double("scene.extent", c.extent);
    c.size_scale = cfg.get_double("scene.size_scale", c.size_scale);
    c.rest_on_ground = cfg.get_bool("scene.rest_on_ground", c.rest_on_ground);
    c.class_count = static_cast<int>(cfg.get_int("scene.classes", c.class_count));
    c.include_ground = cfg.get_bool("scene.ground", c.include_ground);
    c.validate();
    return c;
}

scenegen::TrajectoryConfig trajectory_config(const io::Config& cfg) {
    scenegen::TrajectoryConfig c;
    c.width = static_cast<int>(cfg.get_int("traj.width", c.width));
    c.height = static_cast<int>(cfg.get_int("traj.height", c.height));
    c.fov_deg = cfg.get_double("traj.fov_deg", c.fov_deg);
    c.radius_min = cfg.get_double("traj.radius_min", c.radius_min);
    c.radius_max = cfg.get_double("traj.radius_max", c.radius_max);
    c.elevation_min = cfg.get_double("traj.elevation_min", c.elevation_min);
    c.elevation_max = cfg.get_double("traj.elevation_max", c.elevation_max);
    c.max_arc_deg = cfg.get_double("traj.max_arc_deg", c.max_arc_deg);
    return c;
}

std::string scene_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return buf;
}

void write_ppm(const fs::path& path, const ad::Mat<float>& image, int height, int width) {
    std::ofstream os(path, std::ios::binary);
    os << "P6\n" << width << " " << height << "\n255\n";
    for (Eigen::Index r = 0; r < image.rows(); ++r)
        for (int c = 0; c < 3; ++c) {
            const float v = std::min(std::max(image(r, c), 0.0f), 1.0f);
            os.put(static_cast<char>(std::lround(v * 255.0f)));
        }
}

io::TensorArray image_to_tensor(const ad::Mat<float>& image, int height, int width) {
    std::vector<float> data(static_cast<std::size_t>(image.rows()) * 3);
    for (Eigen::Index r = 0; r < image.rows(); ++r)
        for (int c = 0; c < 3; ++c) data[static_cast<std::size_t>(r) * 3 + c] = image(r, c);
    return io::TensorArray::from_f32({static_cast<std::uint32_t>(height),
                                      static_cast<std::uint32_t>(width), 3},
                                     std::move(data));
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    const std::uint64_t seed = run_seed(cfg);
    const int n_scenes = static_cast<int>(cfg.get_int("data.n_scenes", 16));
    const int n_views = static_cast<int>(cfg.get_int("data.n_views", 4));
    const double motion = cfg.get_double("data.motion_min_deg", 30.0);
    const auto scfg = scene_config(cfg);
    const auto tcfg = trajectory_config(cfg);

    for (int i = 0; i < n_scenes; ++i) {
        const std::uint64_t s = seed * 1000003ull + static_cast<std::uint64_t>(i);
        const scenegen::SceneSpec scene = scenegen::sample_scene(s, scfg);
        const auto cams = scenegen::sample_trajectory(scene, n_views, motion, s ^ 0x7137ull,
                                                      tcfg);
        std::vector<scenegen::RenderedView> views;
        views.reserve(cams.size());
        for (const auto& cam : cams) views.push_back(scenegen::render_view(scene, cam));
        scenegen::write_scene_dir(out / "scenes" / scene_id(i), scene.category, views);
    }
    echo_config(cfg, out);
    std::cout << "wrote " << n_scenes << " scenes to " << out.string() << "\n";
    return 0;
}

int cmd_train_rae(const CommonArgs& args, bool resume) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    io::Config echo = cfg;
    const train::TrainConfig tc = [&] {
        io::Config c = cfg;
        if (args.seed_given) c.set("train.seed", std::to_string(args.seed));
        return train::TrainConfig::from_config(c);
    }();
    const rae::RAEConfig rc = rae::RAEConfig::from_config(cfg);
    const data::Dataset dataset(cfg.require_string("data.dir"));

    train::RaeState state = resume && fs::exists(out / "checkpoint" / "meta.cfg")
                                ? train::load_rae_state(out / "checkpoint")
                                : train::init_rae_state(rc, tc, tc.seed);
    tc.echo(echo);
    rc.echo(echo);
    echo_config(echo, out);
    train::train_rae(tc, state, dataset, out,
                     [](const std::string& line) { std::cout << line << "\n"; });
    if (!state.model.has_calibration) {
        train::compute_calibration(state.model, dataset, tc, tc.seed ^ 0xca11bull);
        train::save_rae_state(out / "checkpoint", state);
    }
    return 0;
}

int cmd_train_dit(const CommonArgs& args, bool resume) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    io::Config echo = cfg;
    const train::TrainConfig tc = [&] {
        io::Config c = cfg;
        if (args.seed_given) c.set("train.seed", std::to_string(args.seed));
        return train::TrainConfig::from_config(c);
    }();
    const train::RaeState rae_state =
        train::load_rae_state(cfg.require_string("dit.rae_checkpoint"));
    if (!rae_state.model.has_calibration)
        throw nn::StateError("autoencoder checkpoint lacks calibration statistics");

    const data::Stage stage =
        cfg.get_string("train.stage", "dit_stage1") == "dit_stage2" ? data::Stage::DitStage2
                                                                    : data::Stage::DitStage1;
    train::DitState state = [&] {
        if (resume && fs::exists(out / "checkpoint" / "meta.cfg")) {
            auto s = train::load_dit_state(out / "checkpoint");
            s.stage = stage;
            return s;
        }
        const std::string init_from = cfg.get_string("dit.init_checkpoint", "");
        if (!init_from.empty()) {
            auto s = train::load_dit_state(init_from);
            s.stage = stage;
            s.step = 0;
            return s;
        }
        dit::DiTConfig dc = dit::DiTConfig::from_config(cfg);
        dc.latent_tokens = rae_state.model.cfg.latent_tokens;
        dc.latent_dim = rae_state.model.cfg.hidden;
        return train::init_dit_state(dc, tc, stage, tc.seed);
    }();
    tc.echo(echo);
    state.model.cfg.echo(echo);
    echo_config(echo, out);
    const data::Dataset dataset(cfg.require_string("data.dir"));
    train::train_dit(tc, state, rae_state.model, dataset, out,
                     [](const std::string& line) { std::cout << line << "\n"; });
    return 0;
}

int cmd_encode(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    const train::RaeState rae_state =
        train::load_rae_state(cfg.require_string("encode.rae_checkpoint"));
    const bool standardized = cfg.get_bool("encode.standardized", false);
    const data::Dataset dataset(cfg.require_string("data.dir"));
    fs::create_directories(out / "latents");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const auto& scene = dataset.scene(i);
        std::vector<int> all(scene.views.size());
        for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
        const data::Sample sample = data::assemble_sample(
            scene, all, scene.views.front().height, scene.views.front().width);
        const ad::Mat<float> z =
            train::encode_latents(rae_state.model, sample, standardized);
        std::vector<float> data(static_cast<std::size_t>(z.size()));
        for (Eigen::Index r = 0; r < z.rows(); ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c)
                data[static_cast<std::size_t>(r * z.cols() + c)] = z(r, c);
        io::write_container(out / "latents" / (scene_id(static_cast<int>(i)) + ".ten"),
                            io::TensorArray::from_f32({static_cast<std::uint32_t>(z.rows()),
                                                       static_cast<std::uint32_t>(z.cols())},
                                                      std::move(data)));
    }
    echo_config(cfg, out);
    return 0;
}

ad::Mat<float> load_latents(const fs::path& path) {
    const io::TensorArray t = io::read_container(path);
    if (t.dims.size() != 2 || t.dtype != io::Dtype::f32)
        throw io::FormatError("latents must be a 2-D f32 tensor", 0);
    ad::Mat<float> z(t.dims[0], t.dims[1]);
    for (Eigen::Index r = 0; r < z.rows(); ++r)
        for (Eigen::Index c = 0; c < z.cols(); ++c)
            z(r, c) = t.f32[static_cast<std::size_t>(r * z.cols() + c)];
    return z;
}

void write_decoded_views(const rae::RAEModel<float>& model, const ad::Mat<float>& z_ln,
                         const data::Sample& sample, const fs::path& out) {
    for (std::size_t j = 0; j < sample.views.size(); ++j) {
        const auto& view = sample.views[j];
        const ad::Mat<float> img = eval::decode_view_image(model, z_ln, view.camera);
        const std::string stem = "view_" + scene_id(static_cast<int>(j));
        io::write_container(out / (stem + ".ten"),
                            image_to_tensor(img, view.height, view.width));
        write_ppm(out / (stem + ".ppm"), img, view.height, view.width);
    }
}

data::Sample scene_sample(const fs::path& scene_dir) {
    const scenegen::StoredScene scene = scenegen::read_scene_dir(scene_dir);
    std::vector<int> all(scene.views.size());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
    return data::assemble_sample(scene, all, scene.views.front().height,
                                 scene.views.front().width);
}

int cmd_decode(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    const train::RaeState rae_state =
        train::load_rae_state(cfg.require_string("decode.rae_checkpoint"));
    ad::Mat<float> z = load_latents(cfg.require_string("decode.latents"));
    if (cfg.get_bool("decode.standardized", false))
        z = rae_state.model.destandardize(z);
    const data::Sample sample = scene_sample(cfg.require_string("decode.scene"));
    write_decoded_views(rae_state.model, z, sample, out);
    echo_config(cfg, out);
    return 0;
}

int cmd_sample(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    const train::RaeState rae_state =
        train::load_rae_state(cfg.require_string("sample.rae_checkpoint"));
    train::DitState dit_state =
        train::load_dit_state(cfg.require_string("sample.dit_checkpoint"));
    if (cfg.get_bool("sample.use_ema", true)) dit_state.model.params = dit_state.ema;

    const data::Sample sample = scene_sample(cfg.require_string("sample.scene"));
    const int n_views = static_cast<int>(sample.views.size());
    const int n_cond = static_cast<int>(cfg.get_int("sample.n_cond", 1));
    if (n_cond < 0 || n_cond > n_views)
        throw io::ConfigError("sample.n_cond out of range");
    std::vector<bool> vis(static_cast<std::size_t>(n_views), false);
    for (int j = 0; j < n_cond; ++j)
        vis[static_cast<std::size_t>(j * n_views / std::max(n_cond, 1))] = true;

    const dit::ConditionTokens cond =
        train::make_condition(rae_state.model, sample, vis, std::nullopt);
    const dit::ConditionTokens uncond = train::make_condition(
        rae_state.model, sample, std::vector<bool>(vis.size(), false), std::nullopt);
    const int steps =
        static_cast<int>(cfg.get_int("sample.steps", dit_state.model.cfg.sample_steps));
    const double w = cfg.get_double("dit.cfg_scale", dit_state.model.cfg.cfg_scale);
    const ad::Mat<float> z_std =
        dit_state.model.sample(cond, uncond, steps, w, run_seed(cfg));
    const ad::Mat<float> z_ln = rae_state.model.destandardize(z_std);
    write_decoded_views(rae_state.model, z_ln, sample, out);
    io::Config echo = cfg;
    echo.set("dit.cfg_scale", std::to_string(w));
    echo.set("sample.steps", std::to_string(steps));
    echo_config(echo, out);
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const fs::path out = require_out(args);
    const train::RaeState rae_state =
        train::load_rae_state(cfg.require_string("eval.rae_checkpoint"));
    eval::BenchmarkOptions opts;
    opts.n_cond = static_cast<int>(cfg.get_int("eval.n_cond", 1));
    opts.expected_views = static_cast<int>(cfg.get_int("eval.expected_views", 16));
    opts.sample_steps = static_cast<int>(cfg.get_int("eval.steps", 50));
    opts.cfg_scale = cfg.get_double("dit.cfg_scale", 2.0);
    opts.seed = run_seed(cfg);
    opts.rae_only = cfg.get_bool("eval.rae_only", false);

    std::optional<train::DitState> dit_state;
    if (!opts.rae_only) {
        dit_state = train::load_dit_state(cfg.require_string("eval.dit_checkpoint"));
        if (cfg.get_bool("eval.use_ema", true)) dit_state->model.params = dit_state->ema;
    }
    const data::Dataset benchset(cfg.require_string("data.dir"));
    const eval::EvalReport report = eval::run_benchmark(
        rae_state.model, dit_state ? &dit_state->model : nullptr, benchset, opts);
    std::ofstream(out / "report.tsv") << report.to_tsv();
    echo_config(cfg, out);
    std::cout << report.to_tsv();
    return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
    const io::Config cfg = resolve_config(args);
    const std::uint64_t seed = run_seed(cfg);
    const double tol = cfg.get_double("gradcheck.tol", 1e-4);

    // Tiny double-precision fixtures: one rendered scene, two views.
    rae::RAEConfig rc;
    rc.hidden = 32;
    rc.latent_tokens = 4;
    rc.fuse_depth = 1;
    rc.dec_depth = 2;
    rc.n_heads = 2;
    rc.mlp_ratio = 2;
    rc.pmap_fusion_layers = {0, 1};
    const auto model = rae::RAEModel<double>::init(rc, seed);
    nn::ParamStore<double> disc;
    rae::init_discriminator(disc, rc.patch, 16, seed ^ 0xd15c);

    scenegen::SceneConfig scfg;
    const auto spec = scenegen::sample_scene(seed, scfg);
    scenegen::TrajectoryConfig tcfg;
    tcfg.width = tcfg.height = 28;
    const auto cams = scenegen::sample_trajectory(spec, 2, 20.0, seed, tcfg);
    data::Sample sample;
    for (const auto& cam : cams) sample.views.push_back(scenegen::render_view(spec, cam));
    sample.visible = {true, false};
    {
        std::vector<geom::Camera> cs;
        for (auto& v : sample.views) cs.push_back(v.camera);
        auto [norm, scale] = geom::normalize_poses(cs);
        (void)scale;
        for (std::size_t i = 0; i < sample.views.size(); ++i)
            sample.views[i].camera = norm[i];
    }

    auto rae_loss = [&](nn::Ctx<double>& ctx) {
        nn::Ctx<double> dctx{ctx.tape, disc, false};
        const auto encoder = model.imgonly_encoder();
        ad::Var<double> z = model.encode(ctx, sample, encoder);
        const auto& view = sample.views[1];
        ad::Var<double> pred = model.decode_image(ctx, z, view.camera);
        ad::Var<double> gt = ad::constant(
            ctx.tape, rae::detail::image_rows<double>(view.image, view.height, view.width, 3));
        rae::PointMapPrediction<double> pm = model.decode_pointmap(ctx, z, view.camera);
        ad::Var<double> gt_pts = ad::constant(
            ctx.tape,
            rae::detail::image_rows<double>(view.pointmap, view.height, view.width, 3));
        ad::Var<double> loss = ad::mse(pred, gt);
        loss = ad::add(loss, ad::scale(rae::perceptual_proxy(pred, gt, view.height, view.width),
                                       rc.lambda1));
        loss = ad::add(loss, ad::scale(rae::pointmap_loss(pm, gt_pts, view.valid, rc.lambda_conf),
                                       rc.lambda3));
        loss = ad::add(loss, ad::scale(ad::neg(rae::discriminator_score(
                                           dctx, pred, view.height, view.width, rc.patch)),
                                       rc.lambda2));
        return loss;
    };
    const auto rae_res = eval::finite_diff_check(model.params, rae_loss, 2, 1e-5, seed);

    dit::DiTConfig dc;
    dc.depth = 1;
    dc.width = 32;
    dc.n_heads = 2;
    dc.mlp_ratio = 2;
    dc.head_depth = 1;
    dc.head_width = 32;
    dc.head_heads = 2;
    dc.latent_tokens = rc.latent_tokens;
    dc.latent_dim = rc.hidden;
    dc.time_features = 8;
    dc.n_classes = 4;
    const auto dmodel = dit::DiTModel<double>::init(dc, seed ^ 0xd17);
    Rng zrng(seed ^ 0x20);
    ad::Mat<double> z0(dc.latent_tokens, dc.latent_dim);
    for (Eigen::Index r = 0; r < z0.rows(); ++r)
        for (Eigen::Index c = 0; c < z0.cols(); ++c) z0(r, c) = zrng.normal();
    dit::ConditionTokens cond;
    cond.tokens = ad::Mat<float>::Zero(dc.latent_tokens, dc.latent_dim);
    for (Eigen::Index r = 0; r < cond.tokens.rows(); ++r)
        for (Eigen::Index c = 0; c < cond.tokens.cols(); ++c)
            cond.tokens(r, c) = static_cast<float>(zrng.normal());
    cond.tag = dit::ConditionTag::SingleView;
    cond.label = 1;
    auto dit_loss = [&](nn::Ctx<double>& ctx) {
        Rng r(seed ^ 0x21);
        return dmodel.fm_loss(ctx, z0, cond, r);
    };
    const auto dit_res = eval::finite_diff_check(dmodel.params, dit_loss, 2, 1e-5, seed ^ 1);

    const double worst = std::max(rae_res.max_rel_err, dit_res.max_rel_err);
    std::cout << "rae max rel err " << rae_res.max_rel_err << " (" << rae_res.worst_param
              << ")\n"
              << "dit max rel err " << dit_res.max_rel_err << " (" << dit_res.worst_param
              << ")\n"
              << "max rel err " << worst << "\n";
    return worst < tol ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale 3D latent scene representation and generation"};
    app.require_subcommand(1);

    std::map<std::string, CommonArgs> args;
    bool resume = false;
    const std::vector<std::string> names = {"gen-data", "train-rae", "train-dit", "encode",
                                            "decode",   "sample",    "eval",      "gradcheck"};
    for (const auto& name : names) {
        CLI::App* cmd = app.add_subcommand(name);
        add_common(cmd, args[name]);
        if (name == "train-rae" || name == "train-dit")
            cmd->add_flag("--resume", resume, "continue from the checkpoint in --out");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 1;
    }

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        Eigen::setNbThreads(std::max(1, args[name].threads));
        if (name == "gen-data") return cmd_gen_data(args[name]);
        if (name == "train-rae") return cmd_train_rae(args[name], resume);
        if (name == "train-dit") return cmd_train_dit(args[name], resume);
        if (name == "encode") return cmd_encode(args[name]);
        if (name == "decode") return cmd_decode(args[name]);
        if (name == "sample") return cmd_sample(args[name]);
        if (name == "eval") return cmd_eval(args[name]);
        if (name == "gradcheck") return cmd_gradcheck(args[name]);
        std::cerr << "unknown subcommand\n";
        return 1;
    } catch (const ad::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
