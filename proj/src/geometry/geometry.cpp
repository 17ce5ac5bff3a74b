#include "geometry/geometry.hpp"

#include <cmath>

namespace l3d::geom {

void Camera::validate(double tol) const {
    if (fx <= 0.0 || fy <= 0.0) throw ValidationError("focal length must be positive");
    if (width <= 0 || height <= 0) throw ValidationError("image size must be positive");
    const Eigen::Matrix3d err = R.transpose() * R - Eigen::Matrix3d::Identity();
    if (err.cwiseAbs().maxCoeff() > tol) throw ValidationError("rotation is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > tol) throw ValidationError("rotation has det != +1");
}

Eigen::Vector3d Camera::pixel_ray(double u, double v) const {
    Eigen::Vector3d cam((u - cx) / fx, (v - cy) / fy, 1.0);
    return (R * cam.normalized()).normalized();
}

Eigen::Vector3d Camera::project(const Eigen::Vector3d& world) const {
    const Eigen::Vector3d cam = R.transpose() * (world - t);
    return {fx * cam.x() / cam.z() + cx, fy * cam.y() / cam.z() + cy, cam.z()};
}

RayMap plucker_ray_map(const Camera& camera, bool visible) {
    camera.validate();
    RayMap map;
    map.height = camera.height;
    map.width = camera.width;
    map.data.resize(static_cast<std::size_t>(map.height) * map.width * 7);
    const Eigen::Vector3d origin = camera.center();
    const float mask = visible ? 1.0f : 0.0f;
    for (int v = 0; v < map.height; ++v) {
        for (int u = 0; u < map.width; ++u) {
            const Eigen::Vector3d d = camera.pixel_ray(u + 0.5, v + 0.5);
            const Eigen::Vector3d m = origin.cross(d);
            map.at(v, u, 0) = static_cast<float>(d.x());
            map.at(v, u, 1) = static_cast<float>(d.y());
            map.at(v, u, 2) = static_cast<float>(d.z());
            map.at(v, u, 3) = static_cast<float>(m.x());
            map.at(v, u, 4) = static_cast<float>(m.y());
            map.at(v, u, 5) = static_cast<float>(m.z());
            map.at(v, u, 6) = mask;
        }
    }
    return map;
}

std::pair<std::vector<Camera>, double> normalize_poses(const std::vector<Camera>& cameras) {
    if (cameras.empty()) throw ValidationError("normalize_poses: empty camera list");
    const Eigen::Matrix3d R0t = cameras.front().R.transpose();
    const Eigen::Vector3d t0 = cameras.front().t;

    std::vector<Camera> out = cameras;
    double farthest = 0.0;
    for (auto& cam : out) {
        cam.R = R0t * cam.R;
        cam.t = R0t * (cam.t - t0);
        farthest = std::max(farthest, cam.t.norm());
    }
    // First pose is identity by construction; pin it exactly.
    out.front().R = Eigen::Matrix3d::Identity();
    out.front().t.setZero();

    const double scale = farthest < 1e-9 ? 1.0 : farthest;
    for (auto& cam : out) cam.t /= scale;
    return {out, scale};
}

Sim3 umeyama_align(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst) {
    if (src.size() != dst.size()) throw ValidationError("umeyama_align: size mismatch");
    const auto n = src.size();
    if (n < 3) throw DegenerateInputError("umeyama_align: need at least 3 point pairs");

    Eigen::Vector3d mu_src = Eigen::Vector3d::Zero(), mu_dst = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        mu_src += src[i];
        mu_dst += dst[i];
    }
    mu_src /= static_cast<double>(n);
    mu_dst /= static_cast<double>(n);

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    double var_src = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d a = src[i] - mu_src;
        const Eigen::Vector3d b = dst[i] - mu_dst;
        cov += b * a.transpose();
        var_src += a.squaredNorm();
    }
    cov /= static_cast<double>(n);
    var_src /= static_cast<double>(n);

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    // Collinear inputs leave the rotation about the line unconstrained.
    if (sv(1) < 1e-12 * std::max(sv(0), 1.0))
        throw DegenerateInputError("umeyama_align: rank-deficient covariance");

    Eigen::Vector3d sign_fix = Eigen::Vector3d::Ones();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) sign_fix(2) = -1.0;

    Sim3 result;
    result.R = svd.matrixU() * sign_fix.asDiagonal() * svd.matrixV().transpose();
    result.s = sv.dot(sign_fix) / var_src;
    if (result.s <= 0.0) throw DegenerateInputError("umeyama_align: non-positive scale");
    result.t = mu_dst - result.s * (result.R * mu_src);
    return result;
}

double rotation_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    // atan2 of the axis magnitude against the trace term: well conditioned
    // at small angles, unlike acos of the trace which loses sqrt(eps) there.
    const Eigen::Matrix3d r = a.transpose() * b;
    const Eigen::Vector3d axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    return std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
}

std::pair<double, double> ate(const std::vector<Camera>& pred, const std::vector<Camera>& gt) {
    if (pred.size() != gt.size()) throw ValidationError("ate: trajectory length mismatch");
    if (pred.size() < 3) throw ValidationError("ate: need at least 3 poses");

    std::vector<Eigen::Vector3d> pc, gc;
    pc.reserve(pred.size());
    gc.reserve(gt.size());
    for (const auto& c : pred) pc.push_back(c.center());
    for (const auto& c : gt) gc.push_back(c.center());

    const Sim3 align = umeyama_align(pc, gc);

    double sum_sq_t = 0.0, sum_sq_r = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        sum_sq_t += (align.apply(pc[i]) - gc[i]).squaredNorm();
        const double ang = rotation_angle(align.R * pred[i].R, gt[i].R);
        sum_sq_r += ang * ang;
    }
    const double n = static_cast<double>(pred.size());
    const double ate_t = std::sqrt(sum_sq_t / n);
    const double ate_r = std::sqrt(sum_sq_r / n) * 180.0 / M_PI;
    return {ate_r, ate_t};
}

}  // namespace l3d::geom
