#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <utility>
#include <vector>

namespace l3d::geom {

struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DegenerateInputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Pinhole camera. Convention: x-right, y-down, z-forward; extrinsics are
// camera-to-world; the ray through pixel (u, v) is
// R * normalize(K^-1 * (u + 0.5, v + 0.5, 1)).
struct Camera {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // camera-to-world
    Eigen::Vector3d t = Eigen::Vector3d::Zero();      // camera center, world units
    int width = 0, height = 0;

    Eigen::Vector3d center() const { return t; }
    // World-space unit direction of the ray through pixel center (u, v).
    Eigen::Vector3d pixel_ray(double u, double v) const;
    // World point -> pixel coordinates and camera-frame depth.
    Eigen::Vector3d project(const Eigen::Vector3d& world) const;

    void validate(double tol = 1e-6) const;
};

// H x W x 7: channels 0-2 unit ray direction (world), 3-5 Plücker moment
// o x d, 6 visibility flag (constant per view).
struct RayMap {
    int height = 0, width = 0;
    std::vector<float> data;  // row-major, 7 channels innermost

    float& at(int v, int u, int c) { return data[(static_cast<std::size_t>(v) * width + u) * 7 + c]; }
    float at(int v, int u, int c) const {
        return data[(static_cast<std::size_t>(v) * width + u) * 7 + c];
    }
};

struct Sim3 {
    double s = 1.0;
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return s * (R * p) + t; }
};

RayMap plucker_ray_map(const Camera& camera, bool visible);

// Rebase all poses to the frame of the first camera and divide translations
// by the farthest camera distance. Returns (normalized cameras, scale).
// Degenerate (farthest distance < 1e-9) falls back to scale 1.
std::pair<std::vector<Camera>, double> normalize_poses(const std::vector<Camera>& cameras);

// Least-squares Sim(3) minimizing sum ||s R src + t - dst||^2.
Sim3 umeyama_align(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst);

// Absolute trajectory error after Sim(3) alignment of camera centers.
// Returns (rotation RMSE in degrees, translation RMSE in normalized units).
std::pair<double, double> ate(const std::vector<Camera>& pred, const std::vector<Camera>& gt);

// Geodesic angle between two rotations, radians.
double rotation_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

}  // namespace l3d::geom
