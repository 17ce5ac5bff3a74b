#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "geometry/geometry.hpp"

namespace l3d::scenegen {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class PrimitiveKind : int { Sphere = 0, Box = 1, Plane = 2 };

struct Primitive {
    PrimitiveKind kind = PrimitiveKind::Sphere;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    // Sphere: size.x() is the radius. Box: full extents. Plane: horizontal
    // plane at height center.y(), size unused.
    Eigen::Vector3d size = Eigen::Vector3d::Ones();
    Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.5);
};

struct SceneSpec {
    std::vector<Primitive> primitives;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    int category = 0;
};

struct SceneConfig {
    int min_primitives = 2;
    int max_primitives = 5;
    double extent = 1.0;      // primitive centers within [-extent, extent]^3
    double size_scale = 1.0;  // multiplier on drawn primitive sizes
    // Drop each primitive onto the ground plane (contact at its lowest
    // point) instead of leaving it floating at its sampled height.
    bool rest_on_ground = false;
    int class_count = 10;
    bool include_ground = true;

    void validate() const;
};

struct RenderedView {
    int height = 0, width = 0;
    std::vector<float> image;     // H*W*3 in [0,1]
    std::vector<float> pointmap;  // H*W*3 world coordinates, 0 where invalid
    std::vector<std::uint8_t> valid;  // H*W, 1 = surface hit
    geom::Camera camera;
};

struct TrajectoryConfig {
    int width = 56, height = 56;
    double fov_deg = 50.0;
    double radius_min = 2.2, radius_max = 3.2;
    double elevation_min = 0.2, elevation_max = 0.9;  // world -y is up
    double max_arc_deg = 300.0;
    int max_retries = 16;
};

SceneSpec sample_scene(std::uint64_t seed, const SceneConfig& config);

RenderedView render_view(const SceneSpec& scene, const geom::Camera& camera);

// Smooth orbit around the scene centroid; first-to-last rotation angle is at
// least motion_min_deg when n_views > 1.
std::vector<geom::Camera> sample_trajectory(const SceneSpec& scene, int n_views,
                                            double motion_min_deg, std::uint64_t seed,
                                            const TrajectoryConfig& config = {});

// First-hit query used by tests and by render_view itself.
// Returns distance along the (unit) ray, or nothing on a miss.
struct Hit {
    double t = 0.0;
    Eigen::Vector3d point;
    Eigen::Vector3d normal;
    int primitive = -1;
};
std::optional<Hit> trace(const SceneSpec& scene, const Eigen::Vector3d& origin,
                         const Eigen::Vector3d& dir);

// Dataset directory layout: <root>/scenes/<id>/meta.cfg plus per-view
// view_XYZ.ten, pmap_XYZ.ten, valid_XYZ.ten containers.
void write_scene_dir(const std::filesystem::path& scene_dir, int category,
                     const std::vector<RenderedView>& views);

struct StoredScene {
    int category = 0;
    std::vector<RenderedView> views;
};
StoredScene read_scene_dir(const std::filesystem::path& scene_dir);

// All scene directories under <root>/scenes, sorted by id.
std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& root);

}  // namespace l3d::scenegen
