#include <cmath>

#include "gcut3r/losses.hpp"
#include "support.hpp"

using namespace gcut3r;
using namespace testing;
using ad::Var;

namespace {

Array random_array(std::mt19937_64& rng, Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Array a(std::move(shape));
    for (double& x : a.data) x = u(rng);
    return a;
}

// Independent per-pixel evaluation straight from the formula.
double oracle_point_loss(const Array& pred, const Array& conf, const Array& gt, const Array& mask, double alpha) {
    const std::size_t plane = conf.size();
    double acc = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        if (mask[i] == 0.0) continue;
        double d2 = 0.0;
        for (std::size_t c = 0; c < 3; ++c) d2 += std::pow(pred[c * plane + i] - gt[c * plane + i], 2);
        acc += conf[i] * std::sqrt(d2) - alpha * std::log(conf[i]);
        ++valid;
    }
    return acc / static_cast<double>(valid);
}

double pixel_loss(double r, double c, double alpha) { return c * r - alpha * std::log(c); }

// Ternary search for the minimiser of a unimodal function on [lo, hi].
double argmin(const std::function<double(double)>& f, double lo, double hi) {
    for (int it = 0; it < 300; ++it) {
        const double a = lo + (hi - lo) / 3.0, b = hi - (hi - lo) / 3.0;
        if (f(a) < f(b)) {
            hi = b;
        } else {
            lo = a;
        }
    }
    return 0.5 * (lo + hi);
}

Prediction make_prediction(const Array& points, const Array& conf, const Quat& q, const Vec3& t, bool grad = false) {
    return {Var(points, grad), Var(conf, grad), Var(Array({4}, {q.w, q.x, q.y, q.z}), grad),
            Var(Array({3}, {t.x(), t.y(), t.z()}), grad)};
}

}  // namespace

TEST_SUITE("pointmap loss") {
    TEST_CASE("perfect prediction at the confidence boundary is zero") {
        std::mt19937_64 rng(1);
        const Array gt = random_array(rng, {3, 4, 4}, -1, 1);
        const Var l = pointmap_loss_frame(Var(gt), Var(Array({4, 4}, 1.0)), gt, Array({4, 4}, 1.0), {});
        CHECK(l.item() == 0.0);
    }

    TEST_CASE("single pixel hand value") {
        const Array gt({3, 1, 1}, {0, 0, 0});
        const Array pred({3, 1, 1}, {0, 2, 0});
        const Var l = pointmap_loss_frame(Var(pred), Var(Array({1, 1}, {0.5})), gt, Array({1, 1}, 1.0), {0.2, 1.0});
        CHECK(std::abs(l.item() - 1.13863) < 1e-5);
    }

    TEST_CASE("matches the per-pixel oracle with masking") {
        std::mt19937_64 rng(2);
        for (int trial = 0; trial < 10; ++trial) {
            const Array pred = random_array(rng, {3, 5, 6}, -1, 1), gt = random_array(rng, {3, 5, 6}, -1, 1);
            const Array conf = random_array(rng, {5, 6}, 1.0, 4.0);
            Array mask({5, 6});
            for (double& m : mask.data) m = std::bernoulli_distribution(0.6)(rng) ? 1.0 : 0.0;
            mask[0] = 1.0;
            const double got = pointmap_loss_frame(Var(pred), Var(conf), gt, mask, {0.3, 1.0}).item();
            CHECK(std::abs(got - oracle_point_loss(pred, conf, gt, mask, 0.3)) < 1e-13);
        }
    }

    TEST_CASE("frames are summed and empty frames skipped") {
        std::mt19937_64 rng(3);
        std::vector<Var> preds, confs;
        std::vector<Array> gts, masks;
        double expect = 0.0;
        for (int f = 0; f < 3; ++f) {
            const Array p = random_array(rng, {3, 2, 2}, -1, 1), g = random_array(rng, {3, 2, 2}, -1, 1);
            const Array c = random_array(rng, {2, 2}, 1.0, 3.0);
            const Array m({2, 2}, f == 1 ? 0.0 : 1.0);
            if (f != 1) expect += oracle_point_loss(p, c, g, m, 0.2);
            preds.emplace_back(p);
            confs.emplace_back(c);
            gts.push_back(g);
            masks.push_back(m);
        }
        CHECK(std::abs(pointmap_loss(preds, confs, gts, masks, {}).item() - expect) < 1e-13);
    }

    TEST_CASE("no valid pixel anywhere is a degenerate target") {
        std::vector<Var> preds{Var(Array({3, 2, 2}))}, confs{Var(Array({2, 2}, 2.0))};
        std::vector<Array> gts{Array({3, 2, 2})}, masks{Array({2, 2}, 0.0)};
        check_throws_code([&] { pointmap_loss(preds, confs, gts, masks, {}); }, Errc::degenerate_target);
    }

    TEST_CASE("shape mismatch") {
        check_throws_code(
            [] { pointmap_loss_frame(Var(Array({3, 2, 2})), Var(Array({2, 2})), Array({3, 2, 3}), Array({2, 2}), {}); },
            Errc::shape);
    }

    TEST_CASE("confidence stationarity at alpha over r") {
        const double alpha = 0.2;
        for (double r : {0.01, 0.05, 0.1, 0.5, 2.0}) {
            const double c_free = argmin([&](double c) { return pixel_loss(r, c, alpha); }, 1e-6, 100.0);
            CHECK(std::abs(c_free - alpha / r) < 1e-6);
            // the head constrains C > 1, so the reachable minimiser is max(1, alpha / r)
            const double c_head = argmin([&](double c) { return pixel_loss(r, c, alpha); }, 1.0, 100.0);
            CHECK(std::abs(c_head - std::max(1.0, alpha / r)) < 1e-6);
        }
    }

    TEST_CASE("monotone in every residual at fixed confidence") {
        std::mt19937_64 rng(4);
        const Array gt = random_array(rng, {3, 3, 3}, -1, 1), conf = random_array(rng, {3, 3}, 1.0, 3.0);
        const Array mask({3, 3}, 1.0);
        Array pred = random_array(rng, {3, 3, 3}, -1, 1);
        double prev = pointmap_loss_frame(Var(pred), Var(conf), gt, mask, {}).item();
        for (int step = 0; step < 50; ++step) {
            // push one pixel further from its target along its residual direction
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, 8)(rng);
            for (std::size_t c = 0; c < 3; ++c) pred[c * 9 + i] = gt[c * 9 + i] + 1.1 * (pred[c * 9 + i] - gt[c * 9 + i]);
            const double cur = pointmap_loss_frame(Var(pred), Var(conf), gt, mask, {}).item();
            CHECK(cur >= prev);
            prev = cur;
        }
    }

    TEST_CASE("gradient exactness on a 2x2 pointmap") {
        std::mt19937_64 rng(5);
        std::vector<nn::Parameter> ps{{"points", Var(random_array(rng, {3, 2, 2}, -1, 1), true)},
                                      {"conf", Var(random_array(rng, {2, 2}, 1.2, 3.0), true)}};
        const Array gt = random_array(rng, {3, 2, 2}, -1, 1);
        const auto r = nn::grad_check(
            [&] { return pointmap_loss_frame(ps[0].var, ps[1].var, gt, Array({2, 2}, 1.0), {}); }, ps);
        CHECK(r.max_rel_error < 1e-6);
    }
}

TEST_SUITE("pose loss") {
    TEST_CASE("exact match is zero") {
        std::mt19937_64 rng(6);
        const Pose p = random_pose(rng);
        const Var l = pose_loss(Var(Array({4}, {p.q.w, p.q.x, p.q.y, p.q.z})),
                                Var(Array({3}, {p.t.x(), p.t.y(), p.t.z()})), p.q, p.t);
        CHECK(l.item() == 0.0);
    }

    TEST_CASE("hand value sqrt2 plus 1") {
        const Var l = pose_loss(Var(Array({4}, {0, 1, 0, 0})), Var(Array({3}, {1, 0, 0})), {1, 0, 0, 0}, Vec3::Zero());
        CHECK(std::abs(l.item() - 2.41421) < 1e-5);
    }

    TEST_CASE("sign of the target quaternion does not matter") {
        std::mt19937_64 rng(7);
        for (int trial = 0; trial < 100; ++trial) {
            const Quat pq = random_quat(rng), q = random_quat(rng);
            const Vec3 t = Vec3::Random();
            const Var qv(Array({4}, {pq.w, pq.x, pq.y, pq.z})), tv(Array({3}, {0.1, 0.2, 0.3}));
            CHECK(pose_loss(qv, tv, q, t).item() == pose_loss(qv, tv, -q, t).item());
        }
    }

    TEST_CASE("non-unit quaternions are rejected") {
        check_throws_code([] { pose_loss(Var(Array({4}, {1, 0, 0, 0.01})), Var(Array({3})), {1, 0, 0, 0}, Vec3::Zero()); },
                          Errc::invalid_quaternion);
        check_throws_code([] { pose_loss(Var(Array({4}, {1, 0, 0, 0})), Var(Array({3})), {0.9, 0, 0, 0}, Vec3::Zero()); },
                          Errc::invalid_quaternion);
    }

    TEST_CASE("gradient exactness") {
        std::mt19937_64 rng(8);
        const Quat pq = random_quat(rng);
        std::vector<nn::Parameter> ps{{"q", Var(Array({4}, {pq.w, pq.x, pq.y, pq.z}), true)},
                                      {"t", Var(random_array(rng, {3}, -1, 1), true)}};
        const Quat q = random_quat(rng);
        // the loss only accepts unit quaternions, so probe with a step small enough to stay inside 1e-6
        const auto r = nn::grad_check([&] { return pose_loss(ps[0].var, ps[1].var, q, Vec3(0.3, -0.2, 0.1)); }, ps,
                                      1e-7);
        CHECK(r.max_rel_error < 1e-6);
    }
}

TEST_SUITE("total loss") {
    TEST_CASE("total combines the terms with the pose weight") {
        std::mt19937_64 rng(9);
        std::vector<Prediction> preds;
        std::vector<FrameTarget> targets;
        for (int f = 0; f < 4; ++f) {
            preds.push_back(make_prediction(random_array(rng, {3, 4, 4}, -1, 1), random_array(rng, {4, 4}, 1, 3),
                                            random_quat(rng), Vec3::Random()));
            targets.push_back({random_array(rng, {3, 4, 4}, -1, 1), Array({4, 4}, 1.0), random_pose(rng)});
        }
        for (double w : {0.0, 1.0, 2.5}) {
            const LossReport r = total_loss(preds, targets, {0.2, w});
            CHECK(r.total == doctest::Approx(r.l_point + w * r.l_pose).epsilon(1e-14));
            REQUIRE(r.frames.size() == 4);
            double point = 0.0, pose = 0.0;
            for (const auto& f : r.frames) {
                point += f.point;
                pose += f.pose;
            }
            CHECK(point == doctest::Approx(r.l_point).epsilon(1e-14));
            CHECK(pose == doctest::Approx(r.l_pose).epsilon(1e-14));
        }
        CHECK(total_loss(preds, targets, {0.2, 0.0}).total == total_loss(preds, targets, {0.2, 0.0}).l_point);
    }

    TEST_CASE("zero residual with confidence above one gives a negative total") {
        std::mt19937_64 rng(10);
        const Array gt = random_array(rng, {3, 4, 4}, -1, 1);
        const Pose p = random_pose(rng);
        std::vector<Prediction> preds{make_prediction(gt, Array({4, 4}, 1.5), p.q, p.t)};
        std::vector<FrameTarget> targets{{gt, Array({4, 4}, 1.0), p}};
        const LossReport r = total_loss(preds, targets, {});
        CHECK(r.total < 0.0);
        CHECK(r.total == doctest::Approx(-0.2 * std::log(1.5)));
    }

    TEST_CASE("doubling residuals doubles the weighted term") {
        std::mt19937_64 rng(11);
        const Array gt = random_array(rng, {3, 4, 4}, -1, 1), off = random_array(rng, {3, 4, 4}, -1, 1);
        const Array conf = random_array(rng, {4, 4}, 1, 3), mask({4, 4}, 1.0);
        Array p1 = gt, p2 = gt;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            p1[i] += off[i];
            p2[i] += 2.0 * off[i];
        }
        double reg = 0.0;
        for (double c : conf.data) reg += 0.2 * std::log(c);
        reg /= static_cast<double>(conf.size());
        const double l1 = pointmap_loss_frame(Var(p1), Var(conf), gt, mask, {}).item() + reg;
        const double l2 = pointmap_loss_frame(Var(p2), Var(conf), gt, mask, {}).item() + reg;
        CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-13));
    }

    TEST_CASE("length mismatch and invalid config") {
        std::vector<Prediction> preds(2);
        std::vector<FrameTarget> targets(1);
        check_throws_code([&] { total_loss(preds, targets, {}); }, Errc::shape);
        check_throws_code([] { LossConfig{0.0, 1.0}.validate(); }, Errc::config);
        check_throws_code([] { LossConfig{0.2, -1.0}.validate(); }, Errc::config);
    }

    TEST_CASE("composite loss gradient") {
        std::mt19937_64 rng(12);
        std::vector<nn::Parameter> ps;
        std::vector<FrameTarget> targets;
        for (int f = 0; f < 2; ++f) {
            const Quat q = random_quat(rng);
            ps.push_back({"p" + std::to_string(f), Var(random_array(rng, {3, 2, 2}, -1, 1), true)});
            ps.push_back({"c" + std::to_string(f), Var(random_array(rng, {2, 2}, 1.2, 3), true)});
            ps.push_back({"t" + std::to_string(f), Var(random_array(rng, {3}, -1, 1), true)});
            targets.push_back({random_array(rng, {3, 2, 2}, -1, 1), Array({2, 2}, 1.0), {q, Vec3::Random()}});
        }
        const Quat pq = random_quat(rng);
        auto f = [&] {
            std::vector<Prediction> preds;
            for (int k = 0; k < 2; ++k) {
                preds.push_back({ps[3 * k].var, ps[3 * k + 1].var, Var(Array({4}, {pq.w, pq.x, pq.y, pq.z})),
                                 ps[3 * k + 2].var});
            }
            return total_loss(preds, targets, {0.2, 0.7}).total_var;
        };
        CHECK(nn::grad_check(f, ps).max_rel_error < 1e-6);
    }
}
