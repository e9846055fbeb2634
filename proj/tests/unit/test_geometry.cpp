#include <Eigen/Geometry>
#include <numbers>

#include "gcut3r/geometry.hpp"
#include "support.hpp"

using namespace gcut3r;
using namespace testing;

namespace {

Vec3 ray_at(const Array& r, std::size_t row, std::size_t col) {
    return {r.at(0, row, col), r.at(1, row, col), r.at(2, row, col)};
}

// Independent pinhole oracle: K^{-1} by explicit matrix inversion.
Vec3 oracle_ray(const Intrinsics& k, const Mat3& rot, double m, double n) {
    Mat3 km;
    km << k.fx, 0, k.cx, 0, k.fy, k.cy, 0, 0, 1;
    return (rot * (km.inverse() * Vec3(m, n, 1.0))).normalized();
}

}  // namespace

TEST_SUITE("encode_rays") {
    TEST_CASE("hand example without pose") {
        const Array r = encode_rays({2, 2, 1, 1}, std::nullopt, 2, 4);
        const Vec3 v = ray_at(r, 1, 3);
        CHECK(v.x() == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
        CHECK(v.y() == 0.0);
        CHECK(v.z() == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
    }

    TEST_CASE("principal point maps to the optical axis") {
        const Array r = encode_rays({7.5, 3.0, 2, 1}, std::nullopt, 3, 4);
        CHECK((ray_at(r, 1, 2) - Vec3(0, 0, 1)).norm() == 0.0);
    }

    TEST_CASE("pose rotation turns the principal ray") {
        const Pose p{axis_angle({0, 1, 0}, std::numbers::pi / 2), Vec3(4, -2, 9)};
        const Array r = encode_rays({5, 5, 1, 1}, p, 3, 3);
        CHECK((ray_at(r, 1, 1) - Vec3(1, 0, 0)).norm() < 1e-12);
    }

    TEST_CASE("non-invertible intrinsics") {
        check_throws_code([] { encode_rays({0, 1, 0, 0}, std::nullopt, 2, 2); }, Errc::invalid_intrinsics);
        check_throws_code([] { encode_rays({1, -2, 0, 0}, std::nullopt, 2, 2); }, Errc::invalid_intrinsics);
    }

    TEST_CASE("random rays are unit and match the matrix-inverse oracle") {
        std::mt19937_64 rng(11);
        for (int trial = 0; trial < 20; ++trial) {
            const Intrinsics k = random_intrinsics(rng);
            const Pose p = random_pose(rng);
            const Array r = encode_rays(k, p, 9, 13);
            for (std::size_t n = 0; n < 9; ++n) {
                for (std::size_t m = 0; m < 13; ++m) {
                    const Vec3 v = ray_at(r, n, m);
                    CHECK(std::abs(v.norm() - 1.0) < 1e-9);
                    CHECK((v - oracle_ray(k, p.rotation(), double(m), double(n))).norm() < 1e-12);
                }
            }
        }
    }

    TEST_CASE("identity pose equals no pose elementwise") {
        std::mt19937_64 rng(12);
        const Intrinsics k = random_intrinsics(rng);
        CHECK(encode_rays(k, Pose::identity(), 8, 8) == encode_rays(k, std::nullopt, 8, 8));
    }

    TEST_CASE("homogeneous reading adds the translation before normalising") {
        const Pose p = Pose::translation(0, 0, 1);
        const Array r = encode_rays({2, 2, 1, 1}, p, 2, 4, RayEncoding::homogeneous);
        // K^-1 [3,1,1] = (1,0,1); + t = (1,0,2)
        CHECK((ray_at(r, 1, 3) - Vec3(1, 0, 2).normalized()).norm() < 1e-12);
    }
}

TEST_SUITE("encode_pose_map / encode_depth") {
    TEST_CASE("pose map broadcasts the translation") {
        CHECK(encode_pose_map(Pose::identity(), 2, 2) == Array({3, 2, 2}, 0.0));
        CHECK(encode_pose_map(Pose::translation(1, 2, 3), 1, 1) == Array({3, 1, 1}, {1, 2, 3}));
        const Array m = encode_pose_map(Pose::translation(1, 2, 3), 2, 3);
        REQUIRE(m.shape == Shape{3, 2, 3});
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < 3; ++j) CHECK(ray_at(m, i, j) == Vec3(1, 2, 3));
        }
    }

    TEST_CASE("depth channels") {
        DepthRaster d(1, 3);
        d.scale = 4.0;
        d.values = {2.0, 0.0, 4.0};
        d.mask = {1, 0, 1};
        const Array x = encode_depth(d);
        REQUIRE(x.shape == Shape{2, 1, 3});
        CHECK(x.at(0, 0, 0) == 0.5);
        CHECK(x.at(1, 0, 0) == 1.0);
        CHECK(x.at(0, 0, 1) == 0.0);
        CHECK(x.at(1, 0, 1) == 0.0);
        CHECK(x.at(0, 0, 2) == 1.0);
        CHECK(x.at(1, 0, 2) == 1.0);
    }

    TEST_CASE("nonpositive scale") {
        DepthRaster d(1, 1);
        d.scale = 0.0;
        check_throws_code([&] { encode_depth(d); }, Errc::invalid_scale);
        d.scale = -1.0;
        check_throws_code([&] { encode_depth(d); }, Errc::invalid_scale);
    }
}

TEST_SUITE("rotations") {
    TEST_CASE("conversion examples") {
        const Quat q = rot_to_quat(Mat3::Identity());
        CHECK(q == Quat{1, 0, 0, 0});
        Mat3 expect = Vec3(1, -1, -1).asDiagonal();
        CHECK(max_diff(quat_to_rot({0, 1, 0, 0}), expect) == 0.0);
        CHECK(rot_to_quat(quat_to_rot({-1, 0, 0, 0})) == Quat{1, 0, 0, 0});
    }

    TEST_CASE("non-orthonormal matrix") {
        Mat3 m = Mat3::Identity();
        m(0, 1) = 1e-3;
        check_throws_code([&] { rot_to_quat(m); }, Errc::invalid_rotation);
        check_throws_code([&] { rot_to_quat(Mat3(Vec3(1, 1, -1).asDiagonal())); }, Errc::invalid_rotation);
    }

    TEST_CASE("quaternion matrix agrees with Eigen") {
        std::mt19937_64 rng(3);
        for (int i = 0; i < 200; ++i) {
            const Quat q = random_quat(rng);
            const Mat3 ref = Eigen::Quaterniond(q.w, q.x, q.y, q.z).toRotationMatrix();
            CHECK(max_diff(quat_to_rot(q), ref) < 1e-14);
        }
    }

    TEST_CASE("round trips") {
        std::mt19937_64 rng(4);
        for (int i = 0; i < 1000; ++i) {
            const Quat q = random_quat(rng);
            const Mat3 r = quat_to_rot(q);
            const Quat back = rot_to_quat(r);
            CHECK(std::abs(back.w - q.w) + std::abs(back.x - q.x) + std::abs(back.y - q.y) + std::abs(back.z - q.z) < 1e-9);
            CHECK(max_diff(quat_to_rot(back), r) < 1e-9);
            CHECK(back.w >= 0.0);
            CHECK(std::abs(r.determinant() - 1.0) < 1e-9);
        }
        // the w = 0 boundary: a half turn about each axis
        for (const Vec3& axis : {Vec3(1, 0, 0), Vec3(0, -1, 0), Vec3(0, 0, 1), Vec3(1, -1, 0)}) {
            const Quat q = axis_angle(axis, std::numbers::pi);
            CHECK(max_diff(quat_to_rot(rot_to_quat(quat_to_rot(q))), quat_to_rot(q)) < 1e-9);
        }
    }

    TEST_CASE("canonical sign") {
        CHECK(canonicalize({-0.5, 0.5, 0.5, 0.5}) == Quat{0.5, -0.5, -0.5, -0.5});
        CHECK(canonicalize({0, -1, 0, 0}) == Quat{0, 1, 0, 0});
        CHECK(canonicalize({0, 0, -0.6, 0.8}) == Quat{0, 0, 0.6, -0.8});
    }

    TEST_CASE("geodesic angle") {
        const Mat3 a = quat_to_rot(axis_angle({0, 0, 1}, 0.3));
        const Mat3 b = quat_to_rot(axis_angle({0, 0, 1}, 1.0));
        CHECK(rotation_angle(a, b) == doctest::Approx(0.7).epsilon(1e-12));
        CHECK(rotation_angle(a, a) == 0.0);
    }
}

TEST_SUITE("pose algebra") {
    TEST_CASE("examples") {
        const Pose i = invert(Pose::identity());
        CHECK(i.q == Quat{});
        CHECK(i.t.norm() == 0.0);
        std::mt19937_64 rng(5);
        const Pose p = random_pose(rng);
        const Pose r = relative(p, p);
        CHECK(max_diff(r.rotation(), Mat3::Identity()) < 1e-12);
        CHECK(r.t.norm() < 1e-12);
        const Pose c = compose(Pose::translation(1, 0, 0), Pose::translation(0, 2, 0));
        CHECK(c.t == Vec3(1, 2, 0));
        CHECK(c.q == Quat{});
    }

    TEST_CASE("group laws against 4x4 matrices") {
        std::mt19937_64 rng(6);
        auto mat = [](const Pose& p) {
            Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
            m.topLeftCorner<3, 3>() = p.rotation();
            m.topRightCorner<3, 1>() = p.t;
            return m;
        };
        for (int i = 0; i < 200; ++i) {
            const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
            const Pose l = compose(compose(a, b), c), r = compose(a, compose(b, c));
            CHECK((mat(l) - mat(r)).cwiseAbs().maxCoeff() < 1e-9);
            CHECK((mat(compose(a, b)) - mat(a) * mat(b)).cwiseAbs().maxCoeff() < 1e-12);
            const Pose e = compose(invert(a), a);
            CHECK((mat(e) - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
            const Pose ii = invert(invert(a));
            CHECK((mat(ii) - mat(a)).cwiseAbs().maxCoeff() < 1e-9);
            CHECK((mat(relative(a, b)) - mat(a).inverse() * mat(b)).cwiseAbs().maxCoeff() < 1e-9);
            CHECK(std::abs(l.q.norm() - 1.0) < 1e-9);
        }
    }
}

TEST_SUITE("unproject / project") {
    TEST_CASE("unproject examples") {
        DepthRaster d(1, 1);
        d.values = {5.0};
        d.mask = {1};
        const Array x = unproject(d, {1, 1, 0, 0}, Pose::identity());
        CHECK(ray_at(x, 0, 0) == Vec3(0, 0, 5));

        DepthRaster e(2, 4);
        e.values[e.index(1, 3)] = 2.0;
        e.mask[e.index(1, 3)] = 1;
        CHECK(ray_at(unproject(e, {2, 2, 1, 1}, Pose::identity()), 1, 3) == Vec3(2, 0, 2));
        CHECK(ray_at(unproject(e, {2, 2, 1, 1}, Pose::translation(1, 1, 1)), 1, 3) == Vec3(3, 1, 3));
        // invalid pixels sit at the origin even with a translation
        CHECK(ray_at(unproject(e, {2, 2, 1, 1}, Pose::translation(1, 1, 1)), 0, 0) == Vec3(0, 0, 0));
    }

    TEST_CASE("project examples") {
        const PixelProjection a = project_point({0, 0, 5}, {1, 1, 0, 0}, Pose::identity());
        CHECK(a.u == 0.0);
        CHECK(a.v == 0.0);
        CHECK(a.depth == 5.0);
        CHECK(a.in_front);
        const PixelProjection b = project_point({2, 0, 2}, {2, 2, 1, 1}, Pose::identity());
        CHECK(b.u == 3.0);
        CHECK(b.v == 1.0);
        CHECK(b.depth == 2.0);
        CHECK_FALSE(project_point({0, 0, -1}, {1, 1, 0, 0}, Pose::identity()).in_front);
    }

    TEST_CASE("round trip on random cameras") {
        std::mt19937_64 rng(8);
        std::uniform_real_distribution<double> depth(0.3, 7.0);
        std::bernoulli_distribution valid(0.8);
        for (int trial = 0; trial < 30; ++trial) {
            const Intrinsics k = random_intrinsics(rng);
            const Pose p = random_pose(rng);
            DepthRaster d(7, 9);
            for (std::size_t i = 0; i < d.values.size(); ++i) {
                if (valid(rng)) {
                    d.values[i] = depth(rng);
                    d.mask[i] = 1;
                }
            }
            const Projection pr = project(unproject(d, k, p), k, p);
            for (std::size_t n = 0; n < 7; ++n) {
                for (std::size_t m = 0; m < 9; ++m) {
                    const std::size_t i = d.index(n, m);
                    if (!d.mask[i]) continue;
                    CHECK(std::abs(pr.u[i] - double(m)) < 1e-9);
                    CHECK(std::abs(pr.v[i] - double(n)) < 1e-9);
                    CHECK(std::abs(pr.depth[i] - d.values[i]) < 1e-9);
                    CHECK(pr.in_front[i]);
                }
            }
        }
    }
}
