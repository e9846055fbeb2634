#pragma once

// Pinhole cameras, rigid poses and the raster encodings of camera / depth priors.
//
// Conventions:
//   * pixel (m, n) = (column, row) at integer coordinates, no half-pixel offset;
//   * a Pose maps camera coordinates into the reference frame: X_ref = R * X_cam + t;
//   * rasters are channel-major arrays of shape c x H x W.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "gcut3r/array.hpp"

namespace gcut3r {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;

    Mat3 matrix() const;
    /// K^{-1} [m, n, 1]^T
    Vec3 back_project(double m, double n) const;
    /// Throws invalid-intrinsics unless fx > 0 and fy > 0.
    void validate() const;

    friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

struct Quat {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    double norm() const;
    Quat operator-() const { return {-w, -x, -y, -z}; }
    double dot(const Quat& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }

    friend bool operator==(const Quat&, const Quat&) = default;
};

/// w >= 0; when w == 0 the first nonzero component is made positive.
Quat canonicalize(const Quat& q);
Mat3 quat_to_rot(const Quat& q);
/// Throws invalid-rotation if R is not orthonormal (or det != +1) within 1e-6.
Quat rot_to_quat(const Mat3& r);
/// Rotation by `angle` radians about `axis` (need not be normalized).
Quat axis_angle(const Vec3& axis, double angle);
/// Geodesic angle in radians between two rotations.
double rotation_angle(const Mat3& a, const Mat3& b);

struct Pose {
    Quat q;
    Vec3 t = Vec3::Zero();

    static Pose identity() { return {}; }
    static Pose from_rt(const Mat3& r, const Vec3& t);
    static Pose translation(double x, double y, double z);

    Mat3 rotation() const { return quat_to_rot(q); }
    Vec3 apply(const Vec3& p) const { return rotation() * p + t; }
    /// Throws invalid-quaternion if |q| deviates from 1 by more than 1e-9.
    void validate() const;
};

Pose compose(const Pose& a, const Pose& b);
Pose invert(const Pose& p);
/// invert(pi) * pj: pose of frame j expressed in the camera frame of i.
Pose relative(const Pose& pi, const Pose& pj);

struct DepthRaster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;   // H*W, 0 where invalid
    std::vector<std::uint8_t> mask;  // H*W, 1 where valid
    double scale = 1.0;           // normalisation denominator

    DepthRaster() = default;
    DepthRaster(std::size_t h, std::size_t w);

    std::size_t index(std::size_t row, std::size_t col) const { return row * width + col; }
    std::size_t valid_count() const;
    double max_valid() const;
    void validate() const;
};

enum class RayEncoding {
    rotation_only,  // normalize(R K^-1 [m,n,1])
    homogeneous,    // normalize(R K^-1 [m,n,1] + t), literal affine reading
};

/// Unit ray directions, 3 x H x W. Without a pose the rays stay in the camera frame.
Array encode_rays(const Intrinsics& k, const std::optional<Pose>& pose, std::size_t height,
                  std::size_t width, RayEncoding mode = RayEncoding::rotation_only);
/// Translation broadcast to every pixel, 3 x H x W.
Array encode_pose_map(const Pose& pose, std::size_t height, std::size_t width);
/// [depth / scale; mask], 2 x H x W.
Array encode_depth(const DepthRaster& depth);

/// Pointmap (3 x H x W) in the frame `pose` maps into. Invalid pixels are the origin.
Array unproject(const DepthRaster& depth, const Intrinsics& k, const Pose& pose);

struct PixelProjection {
    double u = 0.0;  // column
    double v = 0.0;  // row
    double depth = 0.0;
    bool in_front = false;
};

PixelProjection project_point(const Vec3& point, const Intrinsics& k, const Pose& pose);

struct Projection {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> u;
    std::vector<double> v;
    std::vector<double> depth;
    std::vector<std::uint8_t> in_front;
};

/// Projects every pixel of a 3 x H x W pointmap into the camera described by (k, pose).
Projection project(const Array& points, const Intrinsics& k, const Pose& pose);

}  // namespace gcut3r
