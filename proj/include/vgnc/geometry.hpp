#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vgnc/error.hpp"

namespace vgnc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics. Pixel (0,0) is the center of the top-left pixel.
struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    Mat3 matrix() const {
        Mat3 k;
        k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
        return k;
    }

    Mat3 inverse() const {
        Mat3 k;
        k << 1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1;
        return k;
    }

    bool valid() const {
        return fx > 0 && fy > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
    }

    bool contains(const Vec2& px) const {
        return px.x() >= -0.5 && px.x() < width - 0.5 && px.y() >= -0.5 && px.y() < height - 0.5;
    }

    /// K^-1 [u v 1]^T
    Vec3 normalized(const Vec2& px) const { return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0}; }

    bool operator==(const CameraIntrinsics&) const = default;
};

/// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }

    Pose inverse() const { return {rotation.transpose(), -rotation.transpose() * translation}; }

    /// (this * other)(x) = this(other(x))
    Pose compose(const Pose& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }

    bool is_valid(double tol = 1e-9) const {
        return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
               std::abs(rotation.determinant() - 1.0) <= tol;
    }
};

struct CameraView {
    CameraIntrinsics intrinsics;
    Pose pose;
};

struct EssentialMatrix {
    Mat3 e = Mat3::Zero();
};

struct Correspondence {
    Vec2 pixel_a = Vec2::Zero();
    Vec2 pixel_b = Vec2::Zero();
};

struct Projection {
    Vec2 pixel;
    double depth;
};

inline Mat3 skew(const Vec3& v) {
    Mat3 s;
    s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return s;
}

/// Rotation from a Hamilton quaternion (w, x, y, z); the input is normalized first.
inline Mat3 rotation_from_quaternion(double w, double x, double y, double z) {
    Eigen::Quaterniond q(w, x, y, z);
    q.normalize();
    return q.toRotationMatrix();
}

inline std::array<double, 4> quaternion_from_rotation(const Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    if (q.w() < 0) q.coeffs() *= -1.0;
    return {q.w(), q.x(), q.y(), q.z()};
}

/// Pose that maps camera frame of `from` into the camera frame of `to`.
inline Pose relative_pose(const Pose& from, const Pose& to) { return to.compose(from.inverse()); }

/// Camera at `eye` looking at `target`; +z forward, +y down in the image.
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, -1, 0)) {
    const Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up);
    if (x.norm() < 1e-12) x = z.cross(Vec3(1, 0, 0));
    x.normalize();
    const Vec3 y = z.cross(x);
    Pose p;
    p.rotation.row(0) = x.transpose();
    p.rotation.row(1) = y.transpose();
    p.rotation.row(2) = z.transpose();
    p.translation = -p.rotation * eye;
    return p;
}

inline Projection project_point(const Vec3& point_world, const CameraView& view) {
    const Vec3 pc = view.pose.apply(point_world);
    if (pc.z() <= 1e-8)
        throw Error(Errc::point_behind_camera, "point has non-positive depth");
    const auto& k = view.intrinsics;
    return {Vec2(k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy), pc.z()};
}

inline EssentialMatrix essential_from_pose(const Pose& rel_pose) {
    if (rel_pose.translation.norm() <= 1e-8)
        throw Error(Errc::degenerate_baseline, "pure rotation has no essential matrix");
    return {skew(rel_pose.translation) * rel_pose.rotation};
}

/// Nearest matrix with singular values (s, s, 0), s the mean of the two largest.
inline Mat3 project_to_essential_manifold(const Mat3& e) {
    Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 s = svd.singularValues();
    const double m = 0.5 * (s[0] + s[1]);
    return svd.matrixU() * Vec3(m, m, 0.0).asDiagonal() * svd.matrixV().transpose();
}

namespace detail {

struct RayDepths {
    Vec3 point; // in the frame of camera a
    double depth_a;
    double depth_b;
};

/// Midpoint triangulation in camera-a coordinates given b = R a + t.
inline RayDepths midpoint_in_a(const Vec3& xa, const Vec3& xb, const Mat3& r, const Vec3& t) {
    const Vec3 cb = -r.transpose() * t;
    const Vec3 db = r.transpose() * xb;
    // Minimize |s*xa - (cb + q*db)|^2 over s, q.
    const double aa = xa.dot(xa), ab = xa.dot(db), bb = db.dot(db);
    const double ac = xa.dot(cb), bc = db.dot(cb);
    const double denom = aa * bb - ab * ab;
    if (std::abs(denom) <= 1e-14 * aa * bb) return {Vec3::Zero(), -1.0, -1.0};
    const double s = (ac * bb - ab * bc) / denom;
    const double q = (ab * ac - aa * bc) / denom;
    const Vec3 p = 0.5 * (s * xa + cb + q * db);
    return {p, s * xa.z(), q * xb.z()};
}

} // namespace detail

/// Recover (R, t) with |t| = 1 from an essential matrix by cheirality voting over the
/// four SVD candidates. Correspondences are (a, b) pixels with x_b^T E x_a = 0.
inline Pose decompose_essential(const EssentialMatrix& essential, std::span<const Correspondence> corrs,
                                const CameraIntrinsics& k) {
    if (corrs.empty())
        throw Error(Errc::precondition, "decompose_essential needs at least one correspondence");

    Eigen::JacobiSVD<Mat3> svd(essential.e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 s = svd.singularValues();
    if (!(s[0] > 0) || s[2] / s[0] >= 1e-6)
        throw Error(Errc::invalid_essential, "matrix is not rank 2");

    Mat3 u = svd.matrixU();
    Mat3 v = svd.matrixV();
    if (u.determinant() < 0) u = -u;
    if (v.determinant() < 0) v = -v;
    Mat3 w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;

    const std::array<Mat3, 2> rotations{u * w * v.transpose(), u * w.transpose() * v.transpose()};
    const Vec3 t0 = u.col(2).normalized();

    std::vector<Vec3> na, nb;
    na.reserve(corrs.size());
    nb.reserve(corrs.size());
    for (const auto& c : corrs) {
        na.push_back(k.normalized(c.pixel_a));
        nb.push_back(k.normalized(c.pixel_b));
    }

    Pose best;
    int best_votes = 0;
    for (const auto& r : rotations) {
        for (double sign : {1.0, -1.0}) {
            const Vec3 t = sign * t0;
            int votes = 0;
            for (std::size_t i = 0; i < na.size(); ++i) {
                const auto tri = detail::midpoint_in_a(na[i], nb[i], r, t);
                if (tri.depth_a > 0 && tri.depth_b > 0) ++votes;
            }
            if (votes > best_votes) {
                best_votes = votes;
                best = {r, t};
            }
        }
    }
    if (best_votes == 0)
        throw Error(Errc::cheirality_failure, "no candidate places points in front of both cameras");
    return best;
}

/// Midpoint of the shortest segment between the two back-projected rays, in world coordinates.
inline Vec3 triangulate(const Correspondence& corr, const CameraView& view_a, const CameraView& view_b) {
    const Vec3 ca = view_a.pose.center();
    const Vec3 cb = view_b.pose.center();
    const Vec3 da = (view_a.pose.rotation.transpose() * view_a.intrinsics.normalized(corr.pixel_a)).normalized();
    const Vec3 db = (view_b.pose.rotation.transpose() * view_b.intrinsics.normalized(corr.pixel_b)).normalized();
    if ((ca - cb).norm() <= 1e-10)
        throw Error(Errc::degenerate_triangulation, "views share a camera center");
    if (da.cross(db).norm() <= 1e-10)
        throw Error(Errc::degenerate_triangulation, "rays are parallel");

    const Vec3 w0 = ca - cb;
    const double b = da.dot(db);
    const double d = da.dot(w0);
    const double e = db.dot(w0);
    const double denom = 1.0 - b * b;
    const double s = (b * e - d) / denom;
    const double q = (e - b * d) / denom;
    return 0.5 * ((ca + s * da) + (cb + q * db));
}

} // namespace vgnc
