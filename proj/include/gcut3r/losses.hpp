#pragma once

#include <span>
#include <vector>

#include "gcut3r/geometry.hpp"
#include "gcut3r/model.hpp"

namespace gcut3r {

struct LossConfig {
    double alpha = 0.2;        // confidence regularisation weight
    double pose_weight = 1.0;  // multiplier on the pose term

    void validate() const;
};

/// Supervision for one frame, all in the first-camera frame.
struct FrameTarget {
    Array pointmap;  // 3 x H x W
    Array mask;      // H x W, 1 where ground truth exists
    Pose pose;
};

struct FrameLoss {
    double point = 0.0;
    double pose = 0.0;
};

struct LossReport {
    Var total_var;  // differentiable total
    double l_point = 0.0;
    double l_pose = 0.0;
    double total = 0.0;
    std::vector<FrameLoss> frames;
};

/// Mean over valid pixels of C*|X^ - X| - alpha*log C for one frame. Returns an
/// undefined Var when the frame has no valid pixel.
Var pointmap_loss_frame(const Var& pred_points, const Var& confidence, const Array& gt_points,
                        const Array& mask, const LossConfig& cfg);

/// Sum over frames of pointmap_loss_frame. Throws degenerate-target if no frame has a valid pixel.
Var pointmap_loss(std::span<const Var> pred_points, std::span<const Var> confidences,
                  std::span<const Array> gt_points, std::span<const Array> masks, const LossConfig& cfg);

/// |q^ - q| + |t^ - t| with q sign-aligned to q^. Both quaternions must be unit within 1e-6.
Var pose_loss(const Var& pred_quat, const Var& pred_trans, const Quat& gt_quat, const Vec3& gt_trans);

LossReport total_loss(std::span<const Prediction> predictions, std::span<const FrameTarget> targets,
                      const LossConfig& cfg);

}  // namespace gcut3r
