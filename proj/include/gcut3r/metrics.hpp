#pragma once

// Evaluation protocol: point-cloud accuracy / completeness / normal consistency,
// video depth errors, trajectory errors after similarity alignment, and the
// per-pixel pointmap L2.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcut3r/array.hpp"
#include "gcut3r/geometry.hpp"

namespace gcut3r {

using PointCloud = std::vector<Vec3>;

struct Sim3 {
    double s = 1.0;
    Mat3 r = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return s * (r * p) + t; }
};

/// Least-squares similarity with s*R*src + t ~ dst. Throws insufficient-points for
/// N < 3 and degenerate-configuration when the cross-covariance has rank < 2.
Sim3 umeyama_sim3(const PointCloud& src, const PointCloud& dst, bool with_scale = true);

/// Exact nearest-neighbour index. Ties are broken towards the smallest point index, so
/// results coincide with a brute-force scan over (squared distance, index).
class KdTree {
public:
    explicit KdTree(const PointCloud& points);

    struct Hit {
        std::size_t index = 0;
        double dist2 = 0.0;
    };

    Hit nearest(const Vec3& q) const;
    /// k nearest, sorted by (dist2, index). k is clamped to the cloud size.
    std::vector<Hit> knn(const Vec3& q, std::size_t k) const;

private:
    struct Node {
        std::size_t begin = 0, end = 0;  // range in order_
        int axis = -1;                   // -1 for leaves
        double split = 0.0;
        std::size_t left = 0, right = 0;
    };

    std::size_t build(std::size_t begin, std::size_t end);
    template <class Visit>
    void search(std::size_t node, const Vec3& q, Visit& visit) const;

    const PointCloud& points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
};

/// Lower/upper midpoint average for even sizes. Throws evaluation on empty input.
double median(std::vector<double> values);

struct AccComp {
    double acc_mean = 0.0;
    double acc_median = 0.0;
    double comp_mean = 0.0;
    double comp_median = 0.0;
};

AccComp acc_comp(const PointCloud& pred, const PointCloud& gt);

/// Unit normals from the smallest-eigenvalue eigenvector of each point's k-NN covariance
/// (the point itself included). Throws insufficient-points when the cloud has <= k points.
std::vector<Vec3> estimate_normals(const PointCloud& cloud, std::size_t k);

struct NormalConsistency {
    double nc_mean = 0.0;
    double nc_median = 0.0;
};

NormalConsistency normal_consistency(const PointCloud& pred, const PointCloud& gt, std::size_t k = 10);

enum class DepthAlign { none, median };

struct DepthMetrics {
    double abs_rel = 0.0;
    double delta_125 = 0.0;  // percent
};

DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const std::uint8_t> mask, DepthAlign align = DepthAlign::none);

struct PoseMetrics {
    double ate = 0.0;
    double rpe_trans = 0.0;
    double rpe_rot_deg = 0.0;
    bool degenerate = false;  // alignment fell back to a rigid fit
};

PoseMetrics pose_metrics(std::span<const Pose> pred, std::span<const Pose> gt);

/// Mean per-pixel Euclidean distance per frame, no alignment. Masks are H x W, nonzero = valid.
std::vector<double> l2_per_frame(std::span<const Array> pred, std::span<const Array> gt,
                                 std::span<const Array> masks);

struct ReportRow {
    std::string scene_id;
    bool k = false, p = false, d = false;
    AccComp acc;
    NormalConsistency nc;
    DepthMetrics depth;
    PoseMetrics pose;
    std::vector<double> l2;  // one per frame
};

/// "scene_id K P D acc_mean acc_med comp_mean comp_med nc_mean nc_med abs_rel delta ate rpe_t rpe_r l2_1 .."
std::string format_report_row(const ReportRow& row);
std::string report_header(std::size_t frames = 4);

}  // namespace gcut3r
