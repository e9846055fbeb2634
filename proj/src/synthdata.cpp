#include "gcut3r/synthdata.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "gcut3r/errors.hpp"
#include "gcut3r/rng.hpp"

namespace gcut3r {

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec3 v;
    do {
        v = {n(rng), n(rng), n(rng)};
    } while (v.norm() < 1e-9);
    return v.normalized();
}

/// Waves with random direction, frequency in [f_lo, f_hi] cycles per normalised unit and
/// amplitudes summing to `total`.
std::vector<Wave> random_waves(std::mt19937_64& rng, std::size_t count, double f_lo, double f_hi, double total) {
    std::vector<Wave> waves(count);
    double weight_sum = 0.0;
    std::vector<double> weights(count);
    for (auto& w : weights) weight_sum += (w = uniform(rng, 0.2, 1.0));
    for (std::size_t i = 0; i < count; ++i) {
        const double angle = uniform(rng, 0.0, 2.0 * kPi);
        const double freq = 2.0 * kPi * uniform(rng, f_lo, f_hi);
        waves[i] = {freq * std::cos(angle), freq * std::sin(angle), uniform(rng, 0.0, 2.0 * kPi),
                    total * weights[i] / weight_sum};
    }
    return waves;
}

double wave_sum(const std::vector<Wave>& waves, double un, double vn) {
    double s = 0.0;
    for (const Wave& w : waves) s += w.amplitude * std::sin(w.ku * un + w.kv * vn + w.phase);
    return s;
}

bool is_identity(const Pose& p) { return p.q == Quat{} && p.t == Vec3::Zero(); }

}  // namespace

SceneConfig SceneConfig::flat() {
    SceneConfig c;
    c.tilt_max = 0.0;
    c.amplitude_max = 0.0;
    return c;
}

double Scene::depth(double u, double v) const {
    const double w = static_cast<double>(config.image_size);
    const double un = (u - camera.cx) / w, vn = (v - camera.cy) / w;
    return base + tilt_u * un + tilt_v * vn + wave_sum(waves, un, vn);
}

std::array<double, 2> Scene::depth_gradient(double u, double v) const {
    const double w = static_cast<double>(config.image_size);
    const double un = (u - camera.cx) / w, vn = (v - camera.cy) / w;
    double du = tilt_u, dv = tilt_v;
    for (const Wave& wv : waves) {
        const double c = wv.amplitude * std::cos(wv.ku * un + wv.kv * vn + wv.phase);
        du += c * wv.ku;
        dv += c * wv.kv;
    }
    return {du / w, dv / w};
}

Vec3 Scene::point(double u, double v) const { return depth(u, v) * camera.back_project(u, v); }

std::array<double, 3> Scene::color(double u, double v) const {
    const double w = static_cast<double>(config.image_size);
    const double un = (u - camera.cx) / w, vn = (v - camera.cy) / w;
    const double d = depth(u, v);
    const auto [du, dv] = depth_gradient(u, v);
    const Vec3 ray = camera.back_project(u, v);
    const Vec3 su = du * ray + Vec3(d / camera.fx, 0.0, 0.0);
    const Vec3 sv = dv * ray + Vec3(0.0, d / camera.fy, 0.0);
    Vec3 n = su.cross(sv).normalized();
    if (n.z() > 0.0) n = -n;
    const Vec3 light = Vec3(-0.3, -0.6, -1.0).normalized();
    const double shade = 0.4 + 0.6 * std::max(0.0, n.dot(light));
    std::array<double, 3> rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
        const double tex = 0.5 + wave_sum(texture[c], un, vn);
        rgb[c] = std::clamp(tex * shade, 0.0, 1.0);
    }
    return rgb;
}

double Scene::domain_lo() const { return -config.margin * static_cast<double>(config.image_size); }

double Scene::domain_hi() const {
    const double w = static_cast<double>(config.image_size);
    return (w - 1.0) + config.margin * w;
}

Scene gen_scene(std::uint64_t seed, const SceneConfig& config) {
    std::mt19937_64 rng(derive_seed(seed, "scene"));
    Scene s;
    s.seed = seed;
    s.config = config;
    const double w = static_cast<double>(config.image_size);
    const double f = w * uniform(rng, config.min_focal, config.max_focal);
    const double c = 0.5 * (w - 1.0);
    s.camera = {f, f, c + uniform(rng, -1.0, 1.0), c + uniform(rng, -1.0, 1.0)};

    // |u_n| <= 0.5 + margin + 1/w over the domain, so the tilt term is bounded by
    // tilt_max * (0.5 + margin + 1/w) per axis.
    s.base = uniform(rng, config.base_min, config.base_max);
    s.tilt_u = uniform(rng, -config.tilt_max, config.tilt_max);
    s.tilt_v = uniform(rng, -config.tilt_max, config.tilt_max);
    s.waves = random_waves(rng, config.waves, 0.5, 2.0, uniform(rng, 0.0, config.amplitude_max));
    for (auto& channel : s.texture) channel = random_waves(rng, 3, 1.5, 5.0, uniform(rng, 0.15, 0.4));
    return s;
}

namespace {

struct Hit {
    double lambda = 0.0;
    double u = 0.0;
    double v = 0.0;
};

/// Newton iteration on the depth along the pixel ray until the ray meets the surface.
std::optional<Hit> intersect(const Scene& scene, const Mat3& r, const Vec3& origin, double m, double n,
                             double lambda0) {
    const Intrinsics& k = scene.camera;
    const Vec3 dir = r * k.back_project(m, n);
    double lambda = lambda0;
    for (int it = 0; it < 60; ++it) {
        const Vec3 x = origin + lambda * dir;
        if (x.z() <= 1e-9) return std::nullopt;
        const double u = k.fx * x.x() / x.z() + k.cx;
        const double v = k.fy * x.y() / x.z() + k.cy;
        const double f = x.z() - scene.depth(u, v);
        if (std::abs(f) < 1e-13) {
            if (u < scene.domain_lo() || u > scene.domain_hi() || v < scene.domain_lo() || v > scene.domain_hi()) {
                return std::nullopt;
            }
            if (std::abs(lambda - lambda0) > 0.1) return std::nullopt;
            return Hit{lambda, u, v};
        }
        const auto [du, dv] = scene.depth_gradient(u, v);
        const double z2 = x.z() * x.z();
        const double u_l = k.fx * (dir.x() * x.z() - x.x() * dir.z()) / z2;
        const double v_l = k.fy * (dir.y() * x.z() - x.y() * dir.z()) / z2;
        const double df = dir.z() - du * u_l - dv * v_l;
        if (std::abs(df) < 1e-12) return std::nullopt;
        lambda -= f / df;
    }
    return std::nullopt;
}

}  // namespace

RenderedView render_view(const Scene& scene, const Pose& pose) {
    const std::size_t size = scene.config.image_size;
    RenderedView view;
    view.image = Array({3, size, size}, kBackground);
    view.depth = DepthRaster(size, size);
    view.source_u.assign(size * size, std::numeric_limits<double>::quiet_NaN());
    view.source_v.assign(size * size, std::numeric_limits<double>::quiet_NaN());

    auto shade_pixel = [&](std::size_t idx, std::size_t row, std::size_t col, double depth, double u, double v) {
        view.depth.values[idx] = depth;
        view.depth.mask[idx] = 1;
        view.source_u[idx] = u;
        view.source_v[idx] = v;
        const auto rgb = scene.color(u, v);
        for (std::size_t c = 0; c < 3; ++c) view.image.at(c, row, col) = rgb[c];
    };

    if (is_identity(pose)) {
        for (std::size_t n = 0; n < size; ++n) {
            for (std::size_t m = 0; m < size; ++m) {
                const double u = static_cast<double>(m), v = static_cast<double>(n);
                shade_pixel(n * size + m, n, m, scene.depth(u, v), u, v);
            }
        }
        return view;
    }

    // Splat a supersampled canonical surface, nearest depth wins.
    const Mat3 r = pose.rotation();
    const Mat3 rt = r.transpose();
    const Intrinsics& k = scene.camera;
    std::vector<double> zbuf(size * size, std::numeric_limits<double>::infinity());
    const double step = 1.0 / static_cast<double>(scene.config.supersample);
    const double lo = scene.domain_lo(), hi = scene.domain_hi();
    const auto samples = static_cast<std::size_t>(std::floor((hi - lo) / step)) + 1;
    for (std::size_t i = 0; i < samples; ++i) {
        const double v = lo + static_cast<double>(i) * step;
        for (std::size_t j = 0; j < samples; ++j) {
            const double u = lo + static_cast<double>(j) * step;
            const Vec3 cam = rt * (scene.point(u, v) - pose.t);
            if (cam.z() <= 1e-6) continue;
            const double px = std::round(k.fx * cam.x() / cam.z() + k.cx);
            const double py = std::round(k.fy * cam.y() / cam.z() + k.cy);
            if (px < 0.0 || py < 0.0 || px >= static_cast<double>(size) || py >= static_cast<double>(size)) continue;
            const std::size_t idx = static_cast<std::size_t>(py) * size + static_cast<std::size_t>(px);
            if (cam.z() < zbuf[idx]) zbuf[idx] = cam.z();
        }
    }
    for (std::size_t n = 0; n < size; ++n) {
        for (std::size_t m = 0; m < size; ++m) {
            const std::size_t idx = n * size + m;
            if (!std::isfinite(zbuf[idx])) continue;
            const auto hit = intersect(scene, r, pose.t, static_cast<double>(m), static_cast<double>(n), zbuf[idx]);
            if (hit) shade_pixel(idx, n, m, hit->lambda, hit->u, hit->v);
        }
    }
    if (view.depth.valid_count() == 0) fail(Errc::empty_view, "camera sees no surface");
    return view;
}

double overlap_with_first(const RenderedView& view, std::size_t image_size) {
    const double hi = static_cast<double>(image_size) - 1.0;
    std::size_t inside = 0;
    for (std::size_t i = 0; i < view.source_u.size(); ++i) {
        const double u = view.source_u[i], v = view.source_v[i];
        if (view.depth.mask[i] && u >= 0.0 && u <= hi && v >= 0.0 && v <= hi) ++inside;
    }
    return static_cast<double>(inside) / static_cast<double>(view.source_u.size());
}

void NoiseConfig::validate() const {
    if (depth_noise_std < 0.0 || pose_rot_noise_deg < 0.0 || pose_trans_noise < 0.0) {
        fail(Errc::config, "noise scales must be non-negative");
    }
    if (keep_prob < 0.0 || keep_prob > 1.0) fail(Errc::config, "keep probability must lie in [0, 1]");
    if (scanline_stride == 0) fail(Errc::config, "scanline stride must be >= 1");
}

bool NoiseConfig::is_profile(const std::string& name) {
    return name == "clean" || name == "noisy" || name == "sparse" || name == "lidar";
}

NoiseConfig NoiseConfig::profile(const std::string& name) {
    NoiseConfig n;
    if (name == "clean") return n;
    if (name == "noisy") {
        n.depth_noise_std = 0.05;
        n.pose_rot_noise_deg = 1.0;
        n.pose_trans_noise = 0.02;
        return n;
    }
    if (name == "sparse") {
        n.depth_noise_std = 0.02;
        n.sparsity = Sparsity::bernoulli;
        n.keep_prob = 0.1;
        return n;
    }
    if (name == "lidar") {
        n.depth_noise_std = 0.02;
        n.pose_rot_noise_deg = 0.5;
        n.pose_trans_noise = 0.01;
        n.sparsity = Sparsity::scanlines;
        n.scanline_stride = 4;
        return n;
    }
    fail(Errc::usage, "unknown noise profile '" + name + "' (expected clean, noisy, sparse or lidar)");
}

GuidanceSet perturb_priors(const GuidanceSet& guidance, const NoiseConfig& noise, std::uint64_t seed) {
    noise.validate();
    GuidanceSet out = guidance;
    if (out.depth && noise.depth_noise_std > 0.0) {
        std::mt19937_64 rng(derive_seed(seed, "depth-noise"));
        std::normal_distribution<double> n(1.0, noise.depth_noise_std);
        for (std::size_t i = 0; i < out.depth->values.size(); ++i) {
            if (!out.depth->mask[i]) continue;
            out.depth->values[i] = std::max(out.depth->values[i] * n(rng), 1e-6);
        }
    }
    if (out.pose) {
        std::mt19937_64 rng(derive_seed(seed, "pose-noise"));
        if (noise.pose_rot_noise_deg > 0.0) {
            const Quat dq = axis_angle(random_unit(rng), noise.pose_rot_noise_deg * kPi / 180.0);
            out.pose = compose(Pose{dq, Vec3::Zero()}, Pose{out.pose->q, Vec3::Zero()});
            out.pose->t = guidance.pose->t;
        }
        if (noise.pose_trans_noise > 0.0) {
            std::normal_distribution<double> n(0.0, noise.pose_trans_noise);
            for (int c = 0; c < 3; ++c) out.pose->t[c] += n(rng);
        }
    }
    return out;
}

namespace {

void sparsify(DepthRaster& depth, const NoiseConfig& noise, std::mt19937_64& rng) {
    if (noise.sparsity == Sparsity::dense) return;
    for (std::size_t row = 0; row < depth.height; ++row) {
        for (std::size_t col = 0; col < depth.width; ++col) {
            const std::size_t i = depth.index(row, col);
            if (!depth.mask[i]) continue;
            const bool keep = noise.sparsity == Sparsity::bernoulli
                                  ? std::uniform_real_distribution<double>(0.0, 1.0)(rng) < noise.keep_prob
                                  : row % noise.scanline_stride == 0;
            if (!keep) {
                depth.mask[i] = 0;
                depth.values[i] = 0.0;
            }
        }
    }
}

}  // namespace

std::vector<Frame> SceneSample::model_frames(ModalitySubset subset) const {
    std::vector<Frame> out;
    out.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) out.push_back({frames[i].image, guidance[i].restricted(subset)});
    return out;
}

SceneSample gen_sequence(std::uint64_t seed, const NoiseConfig& noise, const SceneConfig& config) {
    noise.validate();
    const Scene scene = gen_scene(derive_seed(seed, "scene-seed"), config);
    const double max_rot = config.max_step_rotation_deg * kPi / 180.0;

    std::vector<Pose> poses;
    std::vector<RenderedView> views;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        std::mt19937_64 rng(derive_seed(seed, "trajectory", static_cast<std::uint64_t>(attempt)));
        poses.assign(1, Pose::identity());
        views.clear();
        ok = true;
        for (std::size_t k = 1; k < kSequenceLength; ++k) {
            const Quat dq = axis_angle(random_unit(rng), uniform(rng, 0.0, max_rot));
            const Vec3 dt = random_unit(rng) * uniform(rng, 0.0, config.max_step_translation);
            poses.push_back(compose(poses.back(), Pose{dq, dt}));
        }
        views.push_back(render_view(scene, poses[0]));
        for (std::size_t k = 1; k < kSequenceLength && ok; ++k) {
            try {
                views.push_back(render_view(scene, poses[k]));
            } catch (const Error& e) {
                if (e.code() != Errc::empty_view) throw;
                ok = false;
                break;
            }
            ok = overlap_with_first(views.back(), config.image_size) >= config.min_overlap;
        }
    }
    if (!ok) fail(Errc::generation, "no trajectory met the overlap constraint after 100 attempts");

    std::mt19937_64 world_rng(derive_seed(seed, "world"));
    const Pose world{axis_angle(random_unit(world_rng), uniform(world_rng, 0.0, kPi / 6.0)),
                     Vec3(uniform(world_rng, -1.0, 1.0), uniform(world_rng, -1.0, 1.0), uniform(world_rng, -1.0, 1.0))};

    SceneSample sample;
    sample.seed = seed;
    for (std::size_t k = 0; k < kSequenceLength; ++k) {
        SampleFrame f;
        f.image = views[k].image;
        f.gt_depth = views[k].depth;
        f.gt_depth.scale = kDepthScale;
        f.intrinsics = scene.camera;
        f.pose = compose(world, poses[k]);
        f.relative_pose = k == 0 ? Pose::identity() : relative(sample.frames[0].pose, f.pose);
        f.gt_pointmap = unproject(f.gt_depth, f.intrinsics, f.relative_pose);
        f.valid = Array({config.image_size, config.image_size});
        for (std::size_t i = 0; i < f.valid.size(); ++i) f.valid[i] = f.gt_depth.mask[i];
        sample.frames.push_back(std::move(f));
    }

    std::mt19937_64 sparse_rng(derive_seed(seed, "sparsity"));
    std::vector<GuidanceSet> absolute;
    double guide_scale = kDepthScale;  // raised only if noise pushes a prior past the range
    for (std::size_t k = 0; k < kSequenceLength; ++k) {
        GuidanceSet g;
        g.intrinsics = sample.frames[k].intrinsics;
        g.pose = sample.frames[k].pose;
        g.depth = sample.frames[k].gt_depth;
        sparsify(*g.depth, noise, sparse_rng);
        g = perturb_priors(g, noise, derive_seed(seed, "priors", k));
        guide_scale = std::max(guide_scale, g.depth->max_valid());
        absolute.push_back(std::move(g));
    }
    for (std::size_t k = 0; k < kSequenceLength; ++k) {
        GuidanceSet g = absolute[k];
        g.pose = k == 0 ? Pose::identity() : relative(*absolute[0].pose, *absolute[k].pose);
        g.depth->scale = guide_scale;
        sample.guidance.push_back(std::move(g));
    }
    return sample;
}

}  // namespace gcut3r
