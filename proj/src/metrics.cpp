#include "gcut3r/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <queue>

#include "gcut3r/errors.hpp"

namespace gcut3r {

namespace {

Sim3 umeyama(const PointCloud& src, const PointCloud& dst, bool with_scale, bool check_rank) {
    if (src.size() != dst.size()) {
        fail(Errc::shape, "umeyama_sim3: " + std::to_string(src.size()) + " source vs " +
                              std::to_string(dst.size()) + " target points");
    }
    if (src.size() < 3) fail(Errc::insufficient_points, "umeyama_sim3 needs at least 3 point pairs");
    const double n = static_cast<double>(src.size());
    Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        mu_s += src[i];
        mu_d += dst[i];
    }
    mu_s /= n;
    mu_d /= n;
    Mat3 cov = Mat3::Zero();
    double var_s = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const Vec3 a = src[i] - mu_s;
        cov += (dst[i] - mu_d) * a.transpose();
        var_s += a.squaredNorm();
    }
    cov /= n;
    var_s /= n;

    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (check_rank && (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0])) {
        fail(Errc::degenerate_configuration, "umeyama_sim3: point configuration is (nearly) collinear");
    }
    Vec3 signs(1.0, 1.0, 1.0);
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) signs[2] = -1.0;
    Sim3 out;
    out.r = svd.matrixU() * signs.asDiagonal() * svd.matrixV().transpose();
    if (with_scale) {
        if (!(var_s > 0.0)) fail(Errc::degenerate_configuration, "umeyama_sim3: source points coincide");
        out.s = sv.dot(signs) / var_s;
    }
    out.t = mu_d - out.s * out.r * mu_s;
    return out;
}

}  // namespace

Sim3 umeyama_sim3(const PointCloud& src, const PointCloud& dst, bool with_scale) {
    return umeyama(src, dst, with_scale, true);
}

// ---- kd-tree ----

constexpr std::size_t kLeafSize = 8;

KdTree::KdTree(const PointCloud& points) : points_(points), order_(points.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points.empty()) build(0, points.size());
}

std::size_t KdTree::build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(points_[order_[i]]);
        hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (!(hi[axis] > lo[axis])) return id;  // all points coincide

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    Node& node = nodes_[id];
    node.axis = axis;
    node.split = split;
    node.left = left;
    node.right = right;
    return id;
}

namespace {

double dist2(const Vec3& a, const Vec3& b) {
    const double dx = a.x() - b.x(), dy = a.y() - b.y(), dz = a.z() - b.z();
    return dx * dx + dy * dy + dz * dz;
}

bool before(const KdTree::Hit& a, const KdTree::Hit& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

}  // namespace

// `visit` receives candidate indices and exposes bound(): the squared distance beyond
// which a subtree cannot contribute. Subtrees at exactly the bound are still visited
// so index ties resolve the same way as a linear scan.
template <class Visit>
void KdTree::search(std::size_t id, const Vec3& q, Visit& visit) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
        for (std::size_t i = node.begin; i < node.end; ++i) visit(order_[i]);
        return;
    }
    // Left holds coordinates <= split, right holds coordinates >= split.
    const double diff = q[node.axis] - node.split;
    const std::size_t first = diff <= 0.0 ? node.left : node.right;
    const std::size_t second = diff <= 0.0 ? node.right : node.left;
    search(first, q, visit);
    if (diff * diff <= visit.bound()) search(second, q, visit);
}

KdTree::Hit KdTree::nearest(const Vec3& q) const {
    if (points_.empty()) fail(Errc::empty_cloud, "nearest neighbour query on an empty cloud");
    struct {
        const PointCloud* pts;
        const Vec3* q;
        Hit best{0, std::numeric_limits<double>::infinity()};
        double bound() const { return best.dist2; }
        void operator()(std::size_t i) {
            const Hit h{i, dist2((*pts)[i], *q)};
            if (before(h, best)) best = h;
        }
    } visit{&points_, &q};
    search(0, q, visit);
    return visit.best;
}

std::vector<KdTree::Hit> KdTree::knn(const Vec3& q, std::size_t k) const {
    if (points_.empty()) fail(Errc::empty_cloud, "nearest neighbour query on an empty cloud");
    k = std::min(k, points_.size());
    auto worse = [](const Hit& a, const Hit& b) { return before(a, b); };
    struct Visitor {
        const PointCloud* pts;
        const Vec3* q;
        std::size_t k;
        std::priority_queue<Hit, std::vector<Hit>, decltype(worse)> heap;
        double bound() const { return heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().dist2; }
        void operator()(std::size_t i) {
            const Hit h{i, dist2((*pts)[i], *q)};
            if (heap.size() < k) {
                heap.push(h);
            } else if (before(h, heap.top())) {
                heap.pop();
                heap.push(h);
            }
        }
    } visit{&points_, &q, k, std::priority_queue<Hit, std::vector<Hit>, decltype(worse)>(worse)};
    if (k > 0) search(0, q, visit);
    std::vector<Hit> out;
    while (!visit.heap.empty()) {
        out.push_back(visit.heap.top());
        visit.heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

// ---- point clouds ----

double median(std::vector<double> values) {
    if (values.empty()) fail(Errc::evaluation, "median of an empty sample");
    const std::size_t n = values.size(), mid = n / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (n % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

namespace {

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> nearest_distances(const PointCloud& from, const PointCloud& to) {
    const KdTree tree(to);
    std::vector<double> d(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) d[i] = std::sqrt(tree.nearest(from[i]).dist2);
    return d;
}

}  // namespace

AccComp acc_comp(const PointCloud& pred, const PointCloud& gt) {
    if (pred.empty() || gt.empty()) fail(Errc::empty_cloud, "acc_comp needs two nonempty clouds");
    const auto acc = nearest_distances(pred, gt);
    const auto comp = nearest_distances(gt, pred);
    return {mean(acc), median(acc), mean(comp), median(comp)};
}

std::vector<Vec3> estimate_normals(const PointCloud& cloud, std::size_t k) {
    if (k < 2 || cloud.size() <= k) {
        fail(Errc::insufficient_points, "normal estimation with k=" + std::to_string(k) + " needs more than k points, got " +
                                            std::to_string(cloud.size()));
    }
    const KdTree tree(cloud);
    std::vector<Vec3> normals(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto hits = tree.knn(cloud[i], k);
        Vec3 mu = Vec3::Zero();
        for (const auto& h : hits) mu += cloud[h.index];
        mu /= static_cast<double>(hits.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& h : hits) {
            const Vec3 a = cloud[h.index] - mu;
            cov += a * a.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        normals[i] = eig.eigenvectors().col(0).normalized();
    }
    return normals;
}

NormalConsistency normal_consistency(const PointCloud& pred, const PointCloud& gt, std::size_t k) {
    const auto np = estimate_normals(pred, k);
    const auto ng = estimate_normals(gt, k);
    const KdTree tree(gt);
    std::vector<double> dots(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        dots[i] = std::min(1.0, std::abs(np[i].dot(ng[tree.nearest(pred[i]).index])));
    }
    return {mean(dots), median(dots)};
}

// ---- depth ----

DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const std::uint8_t> mask, DepthAlign align) {
    if (pred.size() != gt.size() || pred.size() != mask.size()) {
        fail(Errc::shape, "depth_metrics: pred " + std::to_string(pred.size()) + ", gt " + std::to_string(gt.size()) +
                              ", mask " + std::to_string(mask.size()));
    }
    std::vector<double> p, g;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        if (!(gt[i] > 0.0)) fail(Errc::nonpositive_depth, "ground-truth depth must be positive on valid pixels");
        p.push_back(pred[i]);
        g.push_back(gt[i]);
    }
    if (p.empty()) fail(Errc::no_valid_pixels, "depth_metrics: mask selects no pixel");
    if (align == DepthAlign::median) {
        const double mp = median(p);
        if (!(mp > 0.0)) fail(Errc::evaluation, "median alignment needs a positive predicted median depth");
        const double s = median(g) / mp;
        for (double& v : p) v *= s;
    }
    double rel = 0.0;
    std::size_t inliers = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        rel += std::abs(p[i] - g[i]) / g[i];
        if (p[i] > 0.0 && std::max(p[i] / g[i], g[i] / p[i]) < 1.25) ++inliers;
    }
    const double n = static_cast<double>(p.size());
    return {rel / n, 100.0 * static_cast<double>(inliers) / n};
}

// ---- trajectories ----

PoseMetrics pose_metrics(std::span<const Pose> pred, std::span<const Pose> gt) {
    if (pred.size() != gt.size()) {
        fail(Errc::shape, "pose_metrics: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + " poses");
    }
    if (pred.size() < 3) fail(Errc::insufficient_points, "pose_metrics needs at least 3 poses");
    PointCloud src, dst;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        src.push_back(pred[i].t);
        dst.push_back(gt[i].t);
    }
    PoseMetrics out;
    Sim3 sim;
    try {
        sim = umeyama(src, dst, true, true);
    } catch (const Error& e) {
        if (e.code() != Errc::degenerate_configuration) throw;
        out.degenerate = true;
        sim = umeyama(src, dst, false, false);
    }

    const std::size_t n = pred.size();
    std::vector<Mat3> rp(n), rg(n);
    std::vector<Vec3> tp(n), tg(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        rp[i] = sim.r * pred[i].rotation();
        tp[i] = sim.apply(pred[i].t);
        rg[i] = gt[i].rotation();
        tg[i] = gt[i].t;
        sq += (tp[i] - tg[i]).squaredNorm();
    }
    out.ate = std::sqrt(sq / static_cast<double>(n));
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const Vec3 dp = rp[i].transpose() * (tp[i + 1] - tp[i]);
        const Vec3 dg = rg[i].transpose() * (tg[i + 1] - tg[i]);
        out.rpe_trans += (dp - dg).norm();
        out.rpe_rot_deg += rotation_angle(rp[i].transpose() * rp[i + 1], rg[i].transpose() * rg[i + 1]) * 180.0 /
                           std::numbers::pi;
    }
    out.rpe_trans /= static_cast<double>(n - 1);
    out.rpe_rot_deg /= static_cast<double>(n - 1);
    return out;
}

std::vector<double> l2_per_frame(std::span<const Array> pred, std::span<const Array> gt,
                                 std::span<const Array> masks) {
    if (pred.size() != gt.size() || pred.size() != masks.size()) fail(Errc::shape, "l2_per_frame: frame counts differ");
    std::vector<double> out;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        if (pred[f].shape != gt[f].shape || pred[f].rank() != 3 || pred[f].dim(0) != 3) {
            fail(Errc::shape, "l2_per_frame: pred " + shape_str(pred[f].shape) + " vs gt " + shape_str(gt[f].shape));
        }
        const std::size_t plane = pred[f].dim(1) * pred[f].dim(2);
        if (masks[f].shape != Shape{pred[f].dim(1), pred[f].dim(2)}) {
            fail(Errc::shape, "l2_per_frame: mask " + shape_str(masks[f].shape) + " vs pointmap " + shape_str(pred[f].shape));
        }
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            if (masks[f][i] == 0.0) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double d = pred[f][c * plane + i] - gt[f][c * plane + i];
                s += d * d;
            }
            total += std::sqrt(s);
            ++count;
        }
        if (count == 0) fail(Errc::no_valid_pixels, "l2_per_frame: frame " + std::to_string(f) + " has no valid pixel");
        out.push_back(total / static_cast<double>(count));
    }
    return out;
}

std::string report_header(std::size_t frames) {
    std::string h = "scene_id K P D acc_mean acc_med comp_mean comp_med nc_mean nc_med abs_rel delta ate rpe_t rpe_r";
    for (std::size_t i = 1; i <= frames; ++i) h += " l2_" + std::to_string(i);
    return h;
}

std::string format_report_row(const ReportRow& row) {
    auto flag = [](bool b) { return b ? " +" : " -"; };
    std::string s = row.scene_id + flag(row.k) + flag(row.p) + flag(row.d);
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, " %.9g", v);
        s += buf;
    };
    num(row.acc.acc_mean);
    num(row.acc.acc_median);
    num(row.acc.comp_mean);
    num(row.acc.comp_median);
    num(row.nc.nc_mean);
    num(row.nc.nc_median);
    num(row.depth.abs_rel);
    num(row.depth.delta_125);
    num(row.pose.ate);
    num(row.pose.rpe_trans);
    num(row.pose.rpe_rot_deg);
    for (double v : row.l2) num(v);
    return s;
}

}  // namespace gcut3r
