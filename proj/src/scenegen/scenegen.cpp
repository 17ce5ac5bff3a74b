#include "scenegen/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "io/config.hpp"
#include "io/container.hpp"

namespace l3d::scenegen {

namespace {

// Fixed directional light (unit vector toward the light, world -y is up).
const Eigen::Vector3d kLightDir = Eigen::Vector3d(0.4, -0.8, 0.45).normalized();

// Hits farther than this (world units) carry no point map supervision: with
// cameras orbiting at radius <= ~3.2 around unit-extent scenes, anything
// beyond is a near-horizon ground intersection.
constexpr double kMaxPointDistance = 12.0;

std::optional<Hit> hit_sphere(const Primitive& p, const Eigen::Vector3d& o,
                              const Eigen::Vector3d& d) {
    const double r = p.size.x();
    const Eigen::Vector3d oc = o - p.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - r * r;
    const double disc = b * b - c;
    if (disc < 0.0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t < 1e-6) t = -b + sq;
    if (t < 1e-6) return std::nullopt;
    Hit h;
    h.t = t;
    h.point = o + t * d;
    h.normal = (h.point - p.center).normalized();
    return h;
}

std::optional<Hit> hit_box(const Primitive& p, const Eigen::Vector3d& o,
                           const Eigen::Vector3d& d) {
    const Eigen::Vector3d half = p.size * 0.5;
    double tmin = -1e300, tmax = 1e300;
    int axis = -1;
    double axis_sign = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double lo = p.center(a) - half(a), hi = p.center(a) + half(a);
        if (std::abs(d(a)) < 1e-12) {
            if (o(a) < lo || o(a) > hi) return std::nullopt;
            continue;
        }
        double t0 = (lo - o(a)) / d(a);
        double t1 = (hi - o(a)) / d(a);
        double sign = -1.0;
        if (t0 > t1) {
            std::swap(t0, t1);
            sign = 1.0;
        }
        if (t0 > tmin) {
            tmin = t0;
            axis = a;
            axis_sign = sign;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return std::nullopt;
    }
    if (tmin < 1e-6 || axis < 0) return std::nullopt;
    Hit h;
    h.t = tmin;
    h.point = o + tmin * d;
    h.normal = Eigen::Vector3d::Zero();
    h.normal(axis) = axis_sign;
    return h;
}

std::optional<Hit> hit_plane(const Primitive& p, const Eigen::Vector3d& o,
                             const Eigen::Vector3d& d) {
    if (std::abs(d.y()) < 1e-12) return std::nullopt;
    const double t = (p.center.y() - o.y()) / d.y();
    if (t < 1e-6) return std::nullopt;
    Hit h;
    h.t = t;
    h.point = o + t * d;
    h.normal = Eigen::Vector3d(0.0, d.y() > 0.0 ? -1.0 : 1.0, 0.0);
    return h;
}

Eigen::Vector3d shade(const Primitive& p, const Hit& h) {
    const double diffuse = 0.3 + 0.7 * std::max(0.0, h.normal.dot(kLightDir));
    return p.albedo * diffuse;
}

std::string view_suffix(int index) {
    std::ostringstream os;
    os << std::setw(3) << std::setfill('0') << index;
    return os.str();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

void SceneConfig::validate() const {
    if (min_primitives < 1 || max_primitives < min_primitives)
        throw io::ConfigError("scene config: bad primitive count range");
    if (extent <= 0.0) throw io::ConfigError("scene config: extent must be positive");
    if (size_scale <= 0.0) throw io::ConfigError("scene config: size_scale must be positive");
    if (class_count < 1) throw io::ConfigError("scene config: class_count must be >= 1");
}

SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& config) {
    config.validate();
    Rng rng(seed);
    SceneSpec scene;

    const int n = config.min_primitives +
                  static_cast<int>(rng.uniform_index(
                      static_cast<std::uint64_t>(config.max_primitives - config.min_primitives + 1)));
    for (int i = 0; i < n; ++i) {
        Primitive p;
        p.kind = rng.uniform() < 0.5 ? PrimitiveKind::Sphere : PrimitiveKind::Box;
        for (int a = 0; a < 3; ++a) p.center(a) = rng.uniform(-config.extent, config.extent);
        // Keep primitives off the ground plane region.
        p.center.y() = rng.uniform(-config.extent, 0.3);
        if (p.kind == PrimitiveKind::Sphere) {
            p.size.setConstant(rng.uniform(0.15, 0.45) * config.extent * config.size_scale);
        } else {
            for (int a = 0; a < 3; ++a)
                p.size(a) = rng.uniform(0.2, 0.7) * config.extent * config.size_scale;
        }
        if (config.rest_on_ground && config.include_ground) {
            // Ground plane sits at y = 0.6 * extent with -y up.
            const double bottom = p.kind == PrimitiveKind::Sphere ? p.size.x() : 0.5 * p.size.y();
            p.center.y() = 0.6 * config.extent - bottom;
        }
        // Saturated albedos so the color-bucket label stays well separated.
        for (int a = 0; a < 3; ++a) p.albedo(a) = rng.uniform(0.05, 0.45);
        p.albedo(static_cast<int>(rng.uniform_index(3))) = rng.uniform(0.7, 1.0);
        scene.primitives.push_back(p);
    }

    if (config.include_ground) {
        Primitive ground;
        ground.kind = PrimitiveKind::Plane;
        ground.center = Eigen::Vector3d(0.0, 0.6 * config.extent, 0.0);
        const double g = rng.uniform(0.25, 0.75);
        ground.albedo = Eigen::Vector3d(g, g, g);
        scene.primitives.push_back(ground);
    }

    for (int a = 0; a < 3; ++a) scene.background(a) = rng.uniform(0.0, 0.25);

    // Label = dominant (largest) non-plane primitive's kind x color bucket,
    // folded into the configured class count. Deterministic in the scene.
    int dominant = 0;
    double best = -1.0;
    for (int i = 0; i < static_cast<int>(scene.primitives.size()); ++i) {
        const auto& p = scene.primitives[static_cast<std::size_t>(i)];
        if (p.kind == PrimitiveKind::Plane) continue;
        const double measure = p.kind == PrimitiveKind::Sphere ? p.size.x() : p.size.prod();
        if (measure > best) {
            best = measure;
            dominant = i;
        }
    }
    const auto& dp = scene.primitives[static_cast<std::size_t>(dominant)];
    int bucket = 0;
    dp.albedo.maxCoeff(&bucket);
    scene.category = (static_cast<int>(dp.kind) * 3 + bucket) % config.class_count;
    return scene;
}

std::optional<Hit> trace(const SceneSpec& scene, const Eigen::Vector3d& origin,
                         const Eigen::Vector3d& dir) {
    std::optional<Hit> best;
    for (int i = 0; i < static_cast<int>(scene.primitives.size()); ++i) {
        const auto& p = scene.primitives[static_cast<std::size_t>(i)];
        std::optional<Hit> h;
        switch (p.kind) {
            case PrimitiveKind::Sphere: h = hit_sphere(p, origin, dir); break;
            case PrimitiveKind::Box: h = hit_box(p, origin, dir); break;
            case PrimitiveKind::Plane: h = hit_plane(p, origin, dir); break;
        }
        if (h && (!best || h->t < best->t)) {
            best = h;
            best->primitive = i;
        }
    }
    return best;
}

RenderedView render_view(const SceneSpec& scene, const geom::Camera& camera) {
    camera.validate();
    RenderedView view;
    view.height = camera.height;
    view.width = camera.width;
    view.camera = camera;
    const std::size_t pixels = static_cast<std::size_t>(view.height) * view.width;
    view.image.resize(pixels * 3);
    view.pointmap.assign(pixels * 3, 0.0f);
    view.valid.assign(pixels, 0);

    const Eigen::Vector3d origin = camera.center();
    for (int v = 0; v < view.height; ++v) {
        for (int u = 0; u < view.width; ++u) {
            const std::size_t idx = static_cast<std::size_t>(v) * view.width + u;
            const Eigen::Vector3d dir = camera.pixel_ray(u + 0.5, v + 0.5);
            const auto hit = trace(scene, origin, dir);
            Eigen::Vector3d color = scene.background;
            if (hit) {
                color = shade(scene.primitives[static_cast<std::size_t>(hit->primitive)], *hit);
                // Near-horizon ground hits land arbitrarily far away; keep the
                // shading but exclude them from the geometry supervision.
                if (hit->t <= kMaxPointDistance) {
                    view.valid[idx] = 1;
                    for (int c = 0; c < 3; ++c)
                        view.pointmap[idx * 3 + c] = static_cast<float>(hit->point(c));
                }
            }
            for (int c = 0; c < 3; ++c)
                view.image[idx * 3 + c] = static_cast<float>(std::clamp(color(c), 0.0, 1.0));
        }
    }
    return view;
}

std::vector<geom::Camera> sample_trajectory(const SceneSpec& scene, int n_views,
                                            double motion_min_deg, std::uint64_t seed,
                                            const TrajectoryConfig& config) {
    if (n_views < 1) throw geom::ValidationError("sample_trajectory: n_views must be >= 1");

    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    int counted = 0;
    for (const auto& p : scene.primitives) {
        if (p.kind == PrimitiveKind::Plane) continue;
        centroid += p.center;
        ++counted;
    }
    if (counted > 0) centroid /= counted;

    Rng rng(seed);
    for (int attempt = 0; attempt < config.max_retries; ++attempt) {
        const double radius = rng.uniform(config.radius_min, config.radius_max);
        const double elevation = rng.uniform(config.elevation_min, config.elevation_max);
        const double start = rng.uniform(0.0, 2.0 * M_PI);
        double arc_deg = n_views > 1
                             ? rng.uniform(std::min(motion_min_deg * 1.25, config.max_arc_deg),
                                           config.max_arc_deg)
                             : 0.0;
        arc_deg = std::max(arc_deg, motion_min_deg);

        std::vector<geom::Camera> cams;
        cams.reserve(static_cast<std::size_t>(n_views));
        for (int i = 0; i < n_views; ++i) {
            const double frac = n_views > 1 ? static_cast<double>(i) / (n_views - 1) : 0.0;
            const double theta = start + frac * arc_deg * M_PI / 180.0;
            geom::Camera cam;
            cam.width = config.width;
            cam.height = config.height;
            const double f = 0.5 * config.width / std::tan(0.5 * config.fov_deg * M_PI / 180.0);
            cam.fx = cam.fy = f;
            cam.cx = 0.5 * config.width;
            cam.cy = 0.5 * config.height;
            cam.t = centroid + radius * Eigen::Vector3d(std::sin(theta), -elevation, std::cos(theta));
            // Look-at with world up = -y (y-down convention).
            const Eigen::Vector3d fwd = (centroid - cam.t).normalized();
            const Eigen::Vector3d up_world(0.0, -1.0, 0.0);
            const Eigen::Vector3d right = up_world.cross(fwd).normalized();
            const Eigen::Vector3d down = fwd.cross(right);
            cam.R.col(0) = right;
            cam.R.col(1) = down;
            cam.R.col(2) = fwd;
            cams.push_back(cam);
        }

        if (n_views == 1) return cams;
        const double angle =
            geom::rotation_angle(cams.front().R, cams.back().R) * 180.0 / M_PI;
        if (angle + 1e-9 >= motion_min_deg) return cams;
    }
    throw GenerationError("sample_trajectory: motion constraint unsatisfied after retries");
}

void write_scene_dir(const std::filesystem::path& scene_dir, int category,
                     const std::vector<RenderedView>& views) {
    std::filesystem::create_directories(scene_dir);
    std::ostringstream meta;
    meta << "[scene]\n";
    meta << "category = " << category << "\n";
    meta << "n_views = " << views.size() << "\n";
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto& cam = views[i].camera;
        meta << "\n[view_" << view_suffix(static_cast<int>(i)) << "]\n";
        meta << "fx = " << fmt(cam.fx) << "\nfy = " << fmt(cam.fy) << "\ncx = " << fmt(cam.cx)
             << "\ncy = " << fmt(cam.cy) << "\n";
        meta << "R =";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) meta << " " << fmt(cam.R(r, c));
        meta << "\nt = " << fmt(cam.t.x()) << " " << fmt(cam.t.y()) << " " << fmt(cam.t.z())
             << "\n";
        meta << "width = " << cam.width << "\nheight = " << cam.height << "\n";
    }
    {
        const auto tmp = scene_dir / "meta.cfg.tmp";
        std::ofstream out(tmp, std::ios::trunc);
        out << meta.str();
        out.close();
        std::filesystem::rename(tmp, scene_dir / "meta.cfg");
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto& v = views[i];
        const auto h = static_cast<std::uint32_t>(v.height);
        const auto w = static_cast<std::uint32_t>(v.width);
        const std::string sfx = view_suffix(static_cast<int>(i));
        io::write_container(scene_dir / ("view_" + sfx + ".ten"),
                            io::TensorArray::from_f32({h, w, 3}, v.image));
        io::write_container(scene_dir / ("pmap_" + sfx + ".ten"),
                            io::TensorArray::from_f32({h, w, 3}, v.pointmap));
        io::write_container(scene_dir / ("valid_" + sfx + ".ten"),
                            io::TensorArray::from_u8({h, w}, v.valid));
    }
}

StoredScene read_scene_dir(const std::filesystem::path& scene_dir) {
    const io::Config meta = io::Config::load(scene_dir / "meta.cfg");
    StoredScene scene;
    scene.category = static_cast<int>(meta.get_int("scene.category", 0));
    const auto n_views = meta.get_int("scene.n_views", 0);
    for (int i = 0; i < n_views; ++i) {
        const std::string sec = "view_" + view_suffix(i);
        RenderedView v;
        geom::Camera& cam = v.camera;
        cam.fx = meta.get_double(sec + ".fx", 0.0);
        cam.fy = meta.get_double(sec + ".fy", 0.0);
        cam.cx = meta.get_double(sec + ".cx", 0.0);
        cam.cy = meta.get_double(sec + ".cy", 0.0);
        cam.width = static_cast<int>(meta.get_int(sec + ".width", 0));
        cam.height = static_cast<int>(meta.get_int(sec + ".height", 0));
        const auto r = meta.get_doubles(sec + ".R", {});
        const auto t = meta.get_doubles(sec + ".t", {});
        if (r.size() != 9 || t.size() != 3)
            throw io::ConfigError("malformed camera in " + scene_dir.string());
        for (int row = 0; row < 3; ++row)
            for (int col = 0; col < 3; ++col)
                cam.R(row, col) = r[static_cast<std::size_t>(row * 3 + col)];
        cam.t = Eigen::Vector3d(t[0], t[1], t[2]);

        const std::string sfx = view_suffix(i);
        auto img = io::read_container(scene_dir / ("view_" + sfx + ".ten"));
        auto pmap = io::read_container(scene_dir / ("pmap_" + sfx + ".ten"));
        auto valid = io::read_container(scene_dir / ("valid_" + sfx + ".ten"));
        v.height = cam.height;
        v.width = cam.width;
        v.image = std::move(img.f32);
        v.pointmap = std::move(pmap.f32);
        v.valid = std::move(valid.u8);
        scene.views.push_back(std::move(v));
    }
    return scene;
}

std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& root) {
    std::vector<std::filesystem::path> dirs;
    const auto scenes = root / "scenes";
    if (!std::filesystem::exists(scenes)) return dirs;
    for (const auto& entry : std::filesystem::directory_iterator(scenes))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

}  // namespace l3d::scenegen
