#include "gcut3r/losses.hpp"

#include <cmath>

#include "gcut3r/errors.hpp"

namespace gcut3r {

void LossConfig::validate() const {
    if (!(alpha > 0.0)) fail(Errc::config, "alpha must be positive");
    if (!(pose_weight >= 0.0)) fail(Errc::config, "pose_weight must be non-negative");
}

Var pointmap_loss_frame(const Var& pred_points, const Var& confidence, const Array& gt_points,
                        const Array& mask, const LossConfig& cfg) {
    if (pred_points.shape() != gt_points.shape || pred_points.shape().size() != 3 || pred_points.shape()[0] != 3) {
        fail(Errc::shape, "pointmap_loss: prediction " + shape_str(pred_points.shape()) + " vs target " +
                              shape_str(gt_points.shape));
    }
    const std::size_t h = gt_points.dim(1), w = gt_points.dim(2), plane = h * w;
    if (confidence.shape() != Shape{h, w} || mask.shape != Shape{h, w}) {
        fail(Errc::shape, "pointmap_loss: confidence " + shape_str(confidence.shape()) + " / mask " +
                              shape_str(mask.shape) + " vs " + std::to_string(h) + "x" + std::to_string(w));
    }
    std::size_t valid = 0;
    for (double m : mask.data) valid += m != 0.0 ? 1 : 0;
    if (valid == 0) return {};

    // Pixels as rows: (H*W) x 3 residuals, per-pixel Euclidean norm.
    const Var residual = ad::sub(pred_points, ad::constant(gt_points));
    const Var dist = ad::row_norm(ad::transpose(ad::reshape(residual, {3, plane})));  // [H*W]
    const Var conf = ad::reshape(confidence, {plane});
    const Var per_pixel = ad::sub(ad::mul(conf, dist), ad::scale(ad::log(conf), cfg.alpha));
    Array weights({plane});
    for (std::size_t i = 0; i < plane; ++i) weights[i] = mask[i] != 0.0 ? 1.0 / static_cast<double>(valid) : 0.0;
    return ad::sum(ad::mul(per_pixel, ad::constant(std::move(weights))));
}

Var pointmap_loss(std::span<const Var> pred_points, std::span<const Var> confidences,
                  std::span<const Array> gt_points, std::span<const Array> masks, const LossConfig& cfg) {
    cfg.validate();
    if (pred_points.size() != confidences.size() || pred_points.size() != gt_points.size() ||
        pred_points.size() != masks.size()) {
        fail(Errc::shape, "pointmap_loss: frame counts differ");
    }
    Var total;
    for (std::size_t f = 0; f < pred_points.size(); ++f) {
        Var l = pointmap_loss_frame(pred_points[f], confidences[f], gt_points[f], masks[f], cfg);
        if (!l.defined()) continue;
        total = total.defined() ? ad::add(total, l) : l;
    }
    if (!total.defined()) fail(Errc::degenerate_target, "no valid ground-truth pixel in any frame");
    return total;
}

Var pose_loss(const Var& pred_quat, const Var& pred_trans, const Quat& gt_quat, const Vec3& gt_trans) {
    if (pred_quat.shape() != Shape{4} || pred_trans.shape() != Shape{3}) {
        fail(Errc::shape, "pose_loss: expected [4] and [3], got " + shape_str(pred_quat.shape()) + " and " +
                              shape_str(pred_trans.shape()));
    }
    const auto& qv = pred_quat.value().data;
    const Quat pq{qv[0], qv[1], qv[2], qv[3]};
    if (std::abs(pq.norm() - 1.0) > 1e-6 || std::abs(gt_quat.norm() - 1.0) > 1e-6) {
        fail(Errc::invalid_quaternion, "pose_loss needs unit quaternions (|q^|=" + std::to_string(pq.norm()) +
                                           ", |q|=" + std::to_string(gt_quat.norm()) + ")");
    }
    const Quat q = pq.dot(gt_quat) < 0.0 ? -gt_quat : gt_quat;
    const Var dq = ad::sub(pred_quat, ad::constant(Array({4}, {q.w, q.x, q.y, q.z})));
    const Var dt = ad::sub(pred_trans, ad::constant(Array({3}, {gt_trans.x(), gt_trans.y(), gt_trans.z()})));
    return ad::add(ad::row_norm(ad::reshape(dq, {1, 4})), ad::row_norm(ad::reshape(dt, {1, 3})));
}

LossReport total_loss(std::span<const Prediction> predictions, std::span<const FrameTarget> targets,
                      const LossConfig& cfg) {
    cfg.validate();
    if (predictions.size() != targets.size()) {
        fail(Errc::shape, "total_loss: " + std::to_string(predictions.size()) + " predictions vs " +
                              std::to_string(targets.size()) + " targets");
    }
    LossReport report;
    Var point_sum, pose_sum;
    for (std::size_t f = 0; f < predictions.size(); ++f) {
        const Prediction& p = predictions[f];
        const FrameTarget& t = targets[f];
        FrameLoss fl;
        Var lp = pointmap_loss_frame(p.pointmap, p.confidence, t.pointmap, t.mask, cfg);
        if (lp.defined()) {
            fl.point = lp.item();
            point_sum = point_sum.defined() ? ad::add(point_sum, lp) : lp;
        }
        Var lq = pose_loss(p.quat, p.trans, t.pose.q, t.pose.t);
        fl.pose = lq.item();
        pose_sum = pose_sum.defined() ? ad::add(pose_sum, lq) : lq;
        report.frames.push_back(fl);
    }
    if (!point_sum.defined()) fail(Errc::degenerate_target, "no valid ground-truth pixel in any frame");
    report.l_point = point_sum.item();
    report.l_pose = pose_sum.item();
    report.total_var = ad::add(point_sum, ad::scale(pose_sum, cfg.pose_weight));
    report.total = report.total_var.item();
    return report;
}

}  // namespace gcut3r
