#include "gcut3r/geometry.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>

#include "gcut3r/errors.hpp"

namespace gcut3r {

Mat3 Intrinsics::matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
}

Vec3 Intrinsics::back_project(double m, double n) const {
    return {(m - cx) / fx, (n - cy) / fy, 1.0};
}

void Intrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy) ||
        !std::isfinite(cx) || !std::isfinite(cy)) {
        fail(Errc::invalid_intrinsics, "focal lengths must be positive and finite (fx=" +
                                           std::to_string(fx) + ", fy=" + std::to_string(fy) + ")");
    }
}

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat canonicalize(const Quat& q) {
    const double c[4] = {q.w, q.x, q.y, q.z};
    for (double v : c) {
        if (v > 0.0) return q;
        if (v < 0.0) return -q;
    }
    return q;
}

Mat3 quat_to_rot(const Quat& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Quat rot_to_quat(const Mat3& r) {
    const double ortho_err = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho_err <= 1e-6) || std::abs(r.determinant() - 1.0) > 1e-6) {
        fail(Errc::invalid_rotation, "matrix is not a proper rotation (orthonormality error " +
                                         std::to_string(ortho_err) + ")");
    }
    // Shepperd's method: branch on the largest diagonal term for stability.
    Quat q;
    const double tr = r.trace();
    if (tr > r(0, 0) && tr > r(1, 1) && tr > r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + tr);
        q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
    } else if (r(0, 0) >= r(1, 1) && r(0, 0) >= r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
        q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
    } else if (r(1, 1) >= r(2, 2)) {
        const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
        q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
    } else {
        const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
        q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
    }
    const double n = q.norm();
    q = {q.w / n, q.x / n, q.y / n, q.z / n};
    return canonicalize(q);
}

Quat axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (n == 0.0) return {};
    const Vec3 a = axis / n;
    const double s = std::sin(0.5 * angle);
    return canonicalize({std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s});
}

double rotation_angle(const Mat3& a, const Mat3& b) {
    const Mat3 d = a.transpose() * b;
    // atan2 form stays accurate near 0 and pi, unlike acos((tr - 1) / 2).
    const Vec3 axis{d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)};
    return std::atan2(0.5 * axis.norm(), 0.5 * (d.trace() - 1.0));
}

Pose Pose::from_rt(const Mat3& r, const Vec3& t) { return {rot_to_quat(r), t}; }

Pose Pose::translation(double x, double y, double z) { return {Quat{}, Vec3{x, y, z}}; }

void Pose::validate() const {
    if (!(std::abs(q.norm() - 1.0) <= 1e-9) || !t.allFinite()) {
        fail(Errc::invalid_quaternion,
             "pose quaternion must be unit norm (|q| = " + std::to_string(q.norm()) + ")");
    }
}

namespace {

Quat quat_mul(const Quat& a, const Quat& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat unit(const Quat& q) {
    const double n = q.norm();
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

}  // namespace

Pose compose(const Pose& a, const Pose& b) {
    return {canonicalize(unit(quat_mul(a.q, b.q))), a.rotation() * b.t + a.t};
}

Pose invert(const Pose& p) {
    const Quat qi = canonicalize({p.q.w, -p.q.x, -p.q.y, -p.q.z});
    return {qi, -(quat_to_rot(qi) * p.t)};
}

Pose relative(const Pose& pi, const Pose& pj) { return compose(invert(pi), pj); }

DepthRaster::DepthRaster(std::size_t h, std::size_t w)
    : height(h), width(w), values(h * w, 0.0), mask(h * w, 0) {}

std::size_t DepthRaster::valid_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

double DepthRaster::max_valid() const {
    double m = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i]) m = std::max(m, values[i]);
    }
    return m;
}

void DepthRaster::validate() const {
    if (values.size() != height * width || mask.size() != height * width) {
        fail(Errc::shape, "depth raster buffers do not match " + std::to_string(height) + "x" +
                              std::to_string(width));
    }
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        fail(Errc::invalid_scale, "depth scale must be positive, got " + std::to_string(scale));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i] > 1 || !(values[i] >= 0.0) || !std::isfinite(values[i])) {
            fail(Errc::shape, "depth raster holds an invalid entry at index " + std::to_string(i));
        }
    }
}

Array encode_rays(const Intrinsics& k, const std::optional<Pose>& pose, std::size_t height,
                  std::size_t width, RayEncoding mode) {
    k.validate();
    if (height == 0 || width == 0) fail(Errc::shape, "encode_rays needs a non-empty raster");
    Mat3 r = Mat3::Identity();
    Vec3 t = Vec3::Zero();
    if (pose) {
        pose->validate();
        r = pose->rotation();
        if (mode == RayEncoding::homogeneous) t = pose->t;
    }
    Array out({3, height, width});
    for (std::size_t n = 0; n < height; ++n) {
        for (std::size_t m = 0; m < width; ++m) {
            Vec3 d = r * k.back_project(static_cast<double>(m), static_cast<double>(n)) + t;
            const double len = d.norm();
            // The literal reading can land on the origin; fall back to the rotated ray.
            if (len == 0.0) d = r * k.back_project(static_cast<double>(m), static_cast<double>(n));
            d.normalize();
            for (int c = 0; c < 3; ++c) out.at(c, n, m) = d[c];
        }
    }
    return out;
}

Array encode_pose_map(const Pose& pose, std::size_t height, std::size_t width) {
    pose.validate();
    Array out({3, height, width});
    const std::size_t plane = height * width;
    for (std::size_t c = 0; c < 3; ++c) {
        std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, pose.t[static_cast<Eigen::Index>(c)]);
    }
    return out;
}

Array encode_depth(const DepthRaster& depth) {
    if (!(depth.scale > 0.0)) {
        fail(Errc::invalid_scale, "depth scale must be positive, got " + std::to_string(depth.scale));
    }
    depth.validate();
    const std::size_t plane = depth.height * depth.width;
    Array out({2, depth.height, depth.width});
    for (std::size_t i = 0; i < plane; ++i) {
        if (depth.mask[i]) {
            out[i] = depth.values[i] / depth.scale;
            out[plane + i] = 1.0;
        }
    }
    return out;
}

Array unproject(const DepthRaster& depth, const Intrinsics& k, const Pose& pose) {
    k.validate();
    const Mat3 r = pose.rotation();
    Array out({3, depth.height, depth.width});
    for (std::size_t n = 0; n < depth.height; ++n) {
        for (std::size_t m = 0; m < depth.width; ++m) {
            const std::size_t i = depth.index(n, m);
            if (!depth.mask[i]) continue;
            const Vec3 p = r * (depth.values[i] * k.back_project(static_cast<double>(m),
                                                                 static_cast<double>(n))) +
                           pose.t;
            for (int c = 0; c < 3; ++c) out.at(c, n, m) = p[c];
        }
    }
    return out;
}

PixelProjection project_point(const Vec3& point, const Intrinsics& k, const Pose& pose) {
    const Vec3 cam = pose.rotation().transpose() * (point - pose.t);
    PixelProjection out;
    out.depth = cam.z();
    out.in_front = cam.z() > 0.0;
    if (out.in_front) {
        out.u = k.fx * cam.x() / cam.z() + k.cx;
        out.v = k.fy * cam.y() / cam.z() + k.cy;
    }
    return out;
}

Projection project(const Array& points, const Intrinsics& k, const Pose& pose) {
    if (points.rank() != 3 || points.dim(0) != 3) {
        fail(Errc::shape, "project expects a 3xHxW pointmap, got " + shape_str(points.shape));
    }
    k.validate();
    Projection out;
    out.height = points.dim(1);
    out.width = points.dim(2);
    const std::size_t plane = out.height * out.width;
    out.u.resize(plane);
    out.v.resize(plane);
    out.depth.resize(plane);
    out.in_front.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const Vec3 p{points[i], points[plane + i], points[2 * plane + i]};
        const PixelProjection px = project_point(p, k, pose);
        out.u[i] = px.u;
        out.v[i] = px.v;
        out.depth[i] = px.depth;
        out.in_front[i] = px.in_front ? 1 : 0;
    }
    return out;
}

}  // namespace gcut3r
