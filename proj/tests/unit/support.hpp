#pragma once

#include <doctest.h>

#include <cmath>
#include <random>

#include "gcut3r/errors.hpp"
#include "gcut3r/geometry.hpp"

namespace testing {

using namespace gcut3r;

inline Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    return Vec3(n(rng), n(rng), n(rng)).normalized();
}

inline Quat random_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Quat q{n(rng), n(rng), n(rng), n(rng)};
    const double s = q.norm();
    return canonicalize({q.w / s, q.x / s, q.y / s, q.z / s});
}

inline Pose random_pose(std::mt19937_64& rng, double t_scale = 2.0) {
    std::uniform_real_distribution<double> u(-t_scale, t_scale);
    return {random_quat(rng), Vec3(u(rng), u(rng), u(rng))};
}

inline Intrinsics random_intrinsics(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> f(10.0, 60.0), c(5.0, 30.0);
    return {f(rng), f(rng), c(rng), c(rng)};
}

inline double max_diff(const Mat3& a, const Mat3& b) { return (a - b).cwiseAbs().maxCoeff(); }

/// Runs `f` and checks it throws gcut3r::Error with `code`.
template <class F>
void check_throws_code(F&& f, Errc code) {
    bool thrown = false;
    try {
        f();
    } catch (const Error& e) {
        thrown = true;
        CHECK_MESSAGE(e.code() == code, e.what());
    }
    CHECK_MESSAGE(thrown, "expected a " << errc_name(code) << " error");
}

}  // namespace testing
