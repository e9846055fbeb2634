#pragma once

// Procedural multi-view RGB-D scenes.
//
// A scene is a smooth depth field seen by a canonical camera (frame 0): a tilted
// plane plus a few low-frequency sinusoids, textured by a smooth colour field and
// lit by a fixed Lambertian light. Other views splat a supersampled version of the
// canonical surface into their image with a z-buffer, then refine every winning
// pixel to the exact ray/surface intersection.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gcut3r/geometry.hpp"
#include "gcut3r/model.hpp"

namespace gcut3r {

inline constexpr std::size_t kSequenceLength = 4;
/// Corpus-wide depth normaliser: the upper end of the scene depth range.
inline constexpr double kDepthScale = 2.0;

struct SceneConfig {
    std::size_t image_size = 32;
    std::size_t supersample = 4;
    double margin = 0.35;  // extra canonical domain on each side, fraction of image width
    double base_min = 1.0;
    double base_max = 1.4;
    double tilt_max = 0.25;       // depth change per unit normalised image coordinate
    double amplitude_max = 0.2;   // bound on the summed sinusoid amplitudes
    std::size_t waves = 3;
    double min_focal = 0.8;       // focal length range, in image widths
    double max_focal = 1.3;
    double max_step_rotation_deg = 8.0;
    double max_step_translation = 0.2;
    double min_overlap = 0.3;

    /// A config whose scenes are constant-depth planes.
    static SceneConfig flat();
};

struct Wave {
    double ku = 0.0;  // angular frequency along normalised u
    double kv = 0.0;
    double phase = 0.0;
    double amplitude = 0.0;
};

struct Scene {
    std::uint64_t seed = 0;
    SceneConfig config;
    Intrinsics camera;  // canonical camera, also used by every view
    double base = 1.0;
    double tilt_u = 0.0;
    double tilt_v = 0.0;
    std::vector<Wave> waves;
    std::array<std::vector<Wave>, 3> texture;

    /// Depth along the canonical camera's optical axis at canonical pixel (u, v).
    double depth(double u, double v) const;
    /// d depth / du and d depth / dv.
    std::array<double, 2> depth_gradient(double u, double v) const;
    /// Point on the surface in the canonical camera frame.
    Vec3 point(double u, double v) const;
    /// Shaded colour at canonical pixel (u, v), each channel in [0, 1].
    std::array<double, 3> color(double u, double v) const;
    /// Canonical domain covered by the surface, [lo, hi] in pixels along each axis.
    double domain_lo() const;
    double domain_hi() const;
};

/// Deterministic in (seed, config).
Scene gen_scene(std::uint64_t seed, const SceneConfig& config = {});

struct RenderedView {
    Array image;        // 3 x H x W
    DepthRaster depth;  // scale = 1 until a sequence-level scale is assigned
    std::vector<double> source_u;  // canonical (u, v) of every valid pixel, NaN elsewhere
    std::vector<double> source_v;
};

inline constexpr double kBackground = 0.5;

/// `pose` is the camera pose in the canonical frame. Throws empty-view when no pixel sees the surface.
RenderedView render_view(const Scene& scene, const Pose& pose);

enum class Sparsity { dense, bernoulli, scanlines };

struct NoiseConfig {
    double depth_noise_std = 0.0;    // relative
    double pose_rot_noise_deg = 0.0;
    double pose_trans_noise = 0.0;
    Sparsity sparsity = Sparsity::dense;
    double keep_prob = 1.0;          // for bernoulli
    std::size_t scanline_stride = 1; // for scanlines

    void validate() const;
    /// clean | noisy | sparse | lidar
    static NoiseConfig profile(const std::string& name);
    static bool is_profile(const std::string& name);
};

struct SampleFrame {
    Array image;
    DepthRaster gt_depth;  // scale = kDepthScale
    Intrinsics intrinsics;
    Pose pose;          // absolute (world) camera pose
    Pose relative_pose; // relative to frame 0
    Array gt_pointmap;  // 3 x H x W in the frame-0 camera
    Array valid;        // H x W, 1 where gt_depth is valid
};

struct SceneSample {
    std::uint64_t seed = 0;
    std::vector<SampleFrame> frames;
    std::vector<GuidanceSet> guidance;  // per frame, poses relative to frame 0

    std::vector<Frame> model_frames(ModalitySubset subset) const;
};

/// Multiplicative depth noise (clamped positive), fixed-angle random-axis rotation noise,
/// Gaussian translation noise. Intrinsics untouched. Deterministic in seed.
GuidanceSet perturb_priors(const GuidanceSet& guidance, const NoiseConfig& noise, std::uint64_t seed);

/// Throws generation when no trajectory satisfies the overlap constraint in 100 attempts.
SceneSample gen_sequence(std::uint64_t seed, const NoiseConfig& noise, const SceneConfig& config = {});

/// Fraction of valid pixels of `view` whose canonical source lies inside the frame-0 image.
double overlap_with_first(const RenderedView& view, std::size_t image_size);

}  // namespace gcut3r
