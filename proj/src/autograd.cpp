#include "gcut3r/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "gcut3r/errors.hpp"

namespace gcut3r::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

ConstMatMap as_mat(const Array& a, std::size_t rows, std::size_t cols) {
    return ConstMatMap(a.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap as_mat(Array& a, std::size_t rows, std::size_t cols) {
    return MatMap(a.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    fail(Errc::shape, std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const char* op, const Var& v, std::size_t rank) {
    if (v.shape().size() != rank) {
        fail(Errc::shape, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                              shape_str(v.shape()));
    }
}

/// True when `b` equals `a` or is a trailing suffix of it.
bool broadcastable(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

Var make(Array value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        const bool needs = std::any_of(parents.begin(), parents.end(),
                                       [](const auto& p) { return p->requires_grad; });
        if (needs) {
            node->requires_grad = true;
            node->parents = std::move(parents);
            node->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(node));
}

void accumulate(Node& target, const Array& delta) {
    if (!target.requires_grad) return;
    Array& g = target.grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += delta.data[i];
}

}  // namespace

Array& Node::grad_buffer() {
    if (grad.data.size() != value.data.size()) grad = Array(value.shape, 0.0);
    return grad;
}

Var::Var(Array value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

const Array& Var::grad() const { return node_->grad_buffer(); }

void Var::zero_grad() {
    if (!node_->grad.data.empty()) std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
}

double Var::item() const {
    if (node_->value.size() != 1) {
        fail(Errc::shape, "item() on non-scalar " + shape_str(node_->value.shape));
    }
    return node_->value.data[0];
}

void Var::backward() const {
    if (node_->value.size() != 1) {
        fail(Errc::shape, "backward() needs a scalar, got " + shape_str(node_->value.shape));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order of the reachable graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer().data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Array value) { return Var(std::move(value), false); }
Var zeros(Shape shape) { return constant(Array(std::move(shape), 0.0)); }

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
    if (!broadcastable(a.shape(), b.shape())) shape_error("add", a.shape(), b.shape());
    const std::size_t nb = b.size();
    Array out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i % nb];
    auto pa = a.node(), pb = b.node();
    return make(std::move(out), {pa, pb}, [pa, pb, nb](Node& self) {
        accumulate(*pa, self.grad);
        if (pb->requires_grad) {
            Array& gb = pb->grad_buffer();
            for (std::size_t i = 0; i < self.grad.data.size(); ++i) gb.data[i % nb] += self.grad.data[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!broadcastable(a.shape(), b.shape())) shape_error("sub", a.shape(), b.shape());
    const std::size_t nb = b.size();
    Array out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i % nb];
    auto pa = a.node(), pb = b.node();
    return make(std::move(out), {pa, pb}, [pa, pb, nb](Node& self) {
        accumulate(*pa, self.grad);
        if (pb->requires_grad) {
            Array& gb = pb->grad_buffer();
            for (std::size_t i = 0; i < self.grad.data.size(); ++i) gb.data[i % nb] -= self.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!broadcastable(a.shape(), b.shape())) shape_error("mul", a.shape(), b.shape());
    const std::size_t nb = b.size();
    Array out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i % nb];
    auto pa = a.node(), pb = b.node();
    return make(std::move(out), {pa, pb}, [pa, pb, nb](Node& self) {
        const auto& g = self.grad.data;
        if (pa->requires_grad) {
            Array& ga = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g[i] * pb->value.data[i % nb];
        }
        if (pb->requires_grad) {
            Array& gb = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb.data[i % nb] += g[i] * pa->value.data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Array out = a.value();
    for (double& v : out.data) v *= s;
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa, s](Node& self) {
        Array& ga = pa->grad_buffer();
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += s * self.grad.data[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Array out = a.value();
    for (double& v : out.data) v += s;
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa](Node& self) { accumulate(*pa, self.grad); });
}

Var exp(const Var& a) {
    Array out = a.value();
    for (double& v : out.data) v = std::exp(v);
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa](Node& self) {
        Array& ga = pa->grad_buffer();
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += self.grad.data[i] * self.value.data[i];
    });
}

Var log(const Var& a) {
    Array out = a.value();
    for (double& v : out.data) v = std::log(v);
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa](Node& self) {
        Array& ga = pa->grad_buffer();
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += self.grad.data[i] / pa->value.data[i];
    });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Array out = a.value();
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa](Node& self) {
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        Array& ga = pa->grad_buffer();
        for (std::size_t i = 0; i < ga.data.size(); ++i) {
            const double x = pa->value.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            ga.data[i] += self.grad.data[i] * (cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) shape_error("matmul", a.shape(), b.shape());
    Array out({n, m});
    as_mat(out, n, m).noalias() = as_mat(a.value(), n, k) * as_mat(b.value(), k, m);
    auto pa = a.node(), pb = b.node();
    return make(std::move(out), {pa, pb}, [pa, pb, n, k, m](Node& self) {
        const auto g = as_mat(self.grad, n, m);
        if (pa->requires_grad) as_mat(pa->grad_buffer(), n, k).noalias() += g * as_mat(pb->value, k, m).transpose();
        if (pb->requires_grad) as_mat(pb->grad_buffer(), k, m).noalias() += as_mat(pa->value, n, k).transpose() * g;
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank("linear", x, 2);
    require_rank("linear", w, 2);
    const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
    if (w.shape()[0] != in) shape_error("linear", x.shape(), w.shape());
    if (bias.defined() && bias.shape() != Shape{out_dim}) shape_error("linear bias", w.shape(), bias.shape());
    Array out({n, out_dim});
    auto o = as_mat(out, n, out_dim);
    o.noalias() = as_mat(x.value(), n, in) * as_mat(w.value(), in, out_dim);
    if (bias.defined()) {
        o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data.data(), static_cast<Eigen::Index>(out_dim));
    }
    auto px = x.node(), pw = w.node();
    auto pb = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return make(std::move(out), std::move(parents), [px, pw, pb, n, in, out_dim](Node& self) {
        const auto g = as_mat(self.grad, n, out_dim);
        if (px->requires_grad) as_mat(px->grad_buffer(), n, in).noalias() += g * as_mat(pw->value, in, out_dim).transpose();
        if (pw->requires_grad) as_mat(pw->grad_buffer(), in, out_dim).noalias() += as_mat(px->value, n, in).transpose() * g;
        if (pb && pb->requires_grad) as_mat(pb->grad_buffer(), 1, out_dim) += g.colwise().sum();
    });
}

Var transpose(const Var& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Array out({c, r});
    as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
    auto pa = a.node();
    return make(std::move(out), {pa}, [pa, r, c](Node& self) {
        as_mat(pa->grad_buffer(), r, c) += as_mat(self.grad, c, r).transpose();
    });
}

// ---------------------------------------------------------------------------
// Normalisation

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    if (x.shape().empty()) shape_error("layernorm", x.shape(), gamma.shape());
    const std::size_t c = x.shape().back();
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) shape_error("layernorm", x.shape(), gamma.shape());
    const std::size_t rows = x.size() / c;
    Array out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (row[j] - mu) * is;
            (*xhat)[r * c + j] = h;
            out.data[r * c + j] = h * gv[j] + bv[j];
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return make(std::move(out), {px, pg, pb}, [px, pg, pb, xhat, inv_std, rows, c](Node& self) {
        const auto& g = self.grad.data;
        const auto& h = *xhat;
        if (pg->requires_grad || pb->requires_grad) {
            Array& gg = pg->grad_buffer();
            Array& gb = pb->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    gg.data[j] += g[r * c + j] * h[r * c + j];
                    gb.data[j] += g[r * c + j];
                }
            }
        }
        if (px->requires_grad) {
            Array& gx = px->grad_buffer();
            const auto& gamma_v = pg->value.data;
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double dh = g[r * c + j] * gamma_v[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h[r * c + j];
                }
                mean_dh *= inv_c;
                mean_dh_h *= inv_c;
                for (std::size_t j = 0; j < c; ++j) {
                    const double dh = g[r * c + j] * gamma_v[j];
                    gx.data[r * c + j] += (*inv_std)[r] * (dh - mean_dh - h[r * c + j] * mean_dh_h);
                }
            }
        }
    });
}

Var softmax(const Var& x) {
    if (x.shape().empty()) fail(Errc::shape, "softmax on a rank-0 array");
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    Array out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.value().data.data() + r * c;
        double* o = out.data.data() + r * c;
        const double mx = *std::max_element(in, in + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < c; ++j) o[j] /= s;
    }
    auto px = x.node();
    return make(std::move(out), {px}, [px, rows, c](Node& self) {
        Array& gx = px->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data.data() + r * c;
            const double* g = self.grad.data.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < c; ++j) gx.data[r * c + j] += y[j] * (g[j] - dot);
        }
    });
}

Var row_norm(const Var& x) {
    if (x.shape().empty()) fail(Errc::shape, "row_norm on a rank-0 array");
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Array out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += x.value().data[r * c + j] * x.value().data[r * c + j];
        out.data[r] = std::sqrt(s);
    }
    auto px = x.node();
    return make(std::move(out), {px}, [px, rows, c](Node& self) {
        Array& gx = px->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double n = self.value.data[r];
            if (n == 0.0) continue;
            const double f = self.grad.data[r] / n;
            for (std::size_t j = 0; j < c; ++j) gx.data[r * c + j] += f * px->value.data[r * c + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Structure

Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
    Array out;
    out.shape = std::move(shape);
    out.data = x.value().data;
    auto px = x.node();
    return make(std::move(out), {px}, [px](Node& self) {
        Array& gx = px->grad_buffer();
        for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += self.grad.data[i];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) fail(Errc::shape, "concat_rows of nothing");
    Shape shape = parts[0].shape();
    if (shape.empty()) fail(Errc::shape, "concat_rows on a rank-0 array");
    const Shape tail(shape.begin() + 1, shape.end());
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p.shape().size() != shape.size() || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
            shape_error("concat_rows", shape, p.shape());
        }
        rows += p.shape()[0];
    }
    shape[0] = rows;
    Array out(shape);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        parents.push_back(p.node());
        offsets.push_back(off);
        off += p.size();
    }
    auto ps = parents;
    return make(std::move(out), std::move(parents), [ps, offsets](Node& self) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (!ps[i]->requires_grad) continue;
            Array& g = ps[i]->grad_buffer();
            for (std::size_t j = 0; j < g.data.size(); ++j) g.data[j] += self.grad.data[offsets[i] + j];
        }
    });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
    if (x.shape().empty() || begin > end || end > x.shape()[0]) {
        fail(Errc::shape, "slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t row = x.size() / x.shape()[0];
    Shape shape = x.shape();
    shape[0] = end - begin;
    Array out(shape);
    std::copy(x.value().data.begin() + static_cast<std::ptrdiff_t>(begin * row),
              x.value().data.begin() + static_cast<std::ptrdiff_t>(end * row), out.data.begin());
    auto px = x.node();
    return make(std::move(out), {px}, [px, begin, row](Node& self) {
        Array& g = px->grad_buffer();
        for (std::size_t j = 0; j < self.grad.data.size(); ++j) g.data[begin * row + j] += self.grad.data[j];
    });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
    require_rank("slice_cols", x, 2);
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (begin > end || end > cols) {
        fail(Errc::shape, "slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                              ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t w = end - begin;
    Array out({rows, w});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) out.data[r * w + j] = x.value().data[r * cols + begin + j];
    }
    auto px = x.node();
    return make(std::move(out), {px}, [px, rows, cols, begin, w](Node& self) {
        Array& g = px->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) g.data[r * cols + begin + j] += self.grad.data[r * w + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    auto px = x.node();
    return make(Array({1}, {s}), {px}, [px](Node& self) {
        Array& g = px->grad_buffer();
        const double d = self.grad.data[0];
        for (double& v : g.data) v += d;
    });
}

Var mean(const Var& x) {
    if (x.size() == 0) fail(Errc::shape, "mean of an empty array");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Patches

namespace {

/// out[t * F + f] = in[index[t * F + f]]
std::shared_ptr<std::vector<std::size_t>> patch_index(std::size_t c, std::size_t h, std::size_t w,
                                                      std::size_t p) {
    const std::size_t gh = h / p, gw = w / p, feat = c * p * p;
    auto idx = std::make_shared<std::vector<std::size_t>>(gh * gw * feat);
    for (std::size_t i = 0; i < gh; ++i) {
        for (std::size_t j = 0; j < gw; ++j) {
            const std::size_t t = i * gw + j;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t di = 0; di < p; ++di) {
                    for (std::size_t dj = 0; dj < p; ++dj) {
                        const std::size_t f = (ch * p + di) * p + dj;
                        (*idx)[t * feat + f] = (ch * h + i * p + di) * w + j * p + dj;
                    }
                }
            }
        }
    }
    return idx;
}

void check_patch_geometry(std::size_t h, std::size_t w, std::size_t p) {
    if (p == 0 || h % p != 0 || w % p != 0) {
        fail(Errc::patch_geometry, "raster " + std::to_string(h) + "x" + std::to_string(w) +
                                       " is not divisible by patch size " + std::to_string(p));
    }
}

}  // namespace

Var patchify(const Var& raster, std::size_t patch) {
    require_rank("patchify", raster, 3);
    const std::size_t c = raster.shape()[0], h = raster.shape()[1], w = raster.shape()[2];
    check_patch_geometry(h, w, patch);
    auto idx = patch_index(c, h, w, patch);
    Array out({(h / patch) * (w / patch), c * patch * patch});
    for (std::size_t i = 0; i < idx->size(); ++i) out.data[i] = raster.value().data[(*idx)[i]];
    auto px = raster.node();
    return make(std::move(out), {px}, [px, idx](Node& self) {
        Array& g = px->grad_buffer();
        for (std::size_t i = 0; i < idx->size(); ++i) g.data[(*idx)[i]] += self.grad.data[i];
    });
}

Var unpatchify(const Var& tokens, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t patch) {
    check_patch_geometry(height, width, patch);
    const Shape expected{(height / patch) * (width / patch), channels * patch * patch};
    if (tokens.shape() != expected) shape_error("unpatchify", tokens.shape(), expected);
    auto idx = patch_index(channels, height, width, patch);
    Array out({channels, height, width});
    for (std::size_t i = 0; i < idx->size(); ++i) out.data[(*idx)[i]] = tokens.value().data[i];
    auto px = tokens.node();
    return make(std::move(out), {px}, [px, idx](Node& self) {
        Array& g = px->grad_buffer();
        for (std::size_t i = 0; i < idx->size(); ++i) g.data[i] += self.grad.data[(*idx)[i]];
    });
}

// ---------------------------------------------------------------------------
// Attention

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, Array* weights) {
    require_rank("attention", q, 2);
    require_rank("attention", k, 2);
    require_rank("attention", v, 2);
    const std::size_t n = q.shape()[0], m = k.shape()[0], c = q.shape()[1];
    if (k.shape()[1] != c || v.shape() != k.shape()) shape_error("attention", q.shape(), k.shape());
    if (heads == 0 || c % heads != 0) {
        fail(Errc::shape, "attention: channel count " + std::to_string(c) + " not divisible by " +
                              std::to_string(heads) + " heads");
    }
    const std::size_t d = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    const auto ni = static_cast<Eigen::Index>(n), mi = static_cast<Eigen::Index>(m),
               di = static_cast<Eigen::Index>(d);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(c));

    auto probs = std::make_shared<Array>(Shape{heads, n, m});
    Array out({n, c});
    for (std::size_t h = 0; h < heads; ++h) {
        ConstStridedMap qh(q.value().data.data() + h * d, ni, di, stride);
        ConstStridedMap kh(k.value().data.data() + h * d, mi, di, stride);
        ConstStridedMap vh(v.value().data.data() + h * d, mi, di, stride);
        MatMap p(probs->data.data() + h * n * m, ni, mi);
        p.noalias() = (qh * kh.transpose()) * sc;
        for (Eigen::Index r = 0; r < ni; ++r) {
            const double mx = p.row(r).maxCoeff();
            p.row(r) = (p.row(r).array() - mx).exp();
            p.row(r) /= p.row(r).sum();
        }
        StridedMap oh(out.data.data() + h * d, ni, di, stride);
        oh.noalias() = p * vh;
    }
    if (weights) *weights = *probs;

    auto pq = q.node(), pk = k.node(), pv = v.node();
    return make(std::move(out), {pq, pk, pv}, [pq, pk, pv, probs, heads, n, m, c, d, sc](Node& self) {
        const auto ni = static_cast<Eigen::Index>(n), mi = static_cast<Eigen::Index>(m),
                   di = static_cast<Eigen::Index>(d);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(c));
        RowMat dp(ni, mi), ds(ni, mi);
        for (std::size_t h = 0; h < heads; ++h) {
            ConstStridedMap qh(pq->value.data.data() + h * d, ni, di, stride);
            ConstStridedMap kh(pk->value.data.data() + h * d, mi, di, stride);
            ConstStridedMap vh(pv->value.data.data() + h * d, mi, di, stride);
            ConstStridedMap gh(self.grad.data.data() + h * d, ni, di, stride);
            ConstMatMap p(probs->data.data() + h * n * m, ni, mi);
            dp.noalias() = gh * vh.transpose();
            if (pv->requires_grad) {
                StridedMap gv(pv->grad_buffer().data.data() + h * d, mi, di, stride);
                gv.noalias() += p.transpose() * gh;
            }
            const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
            ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * sc;
            if (pq->requires_grad) {
                StridedMap gq(pq->grad_buffer().data.data() + h * d, ni, di, stride);
                gq.noalias() += ds * kh;
            }
            if (pk->requires_grad) {
                StridedMap gk(pk->grad_buffer().data.data() + h * d, mi, di, stride);
                gk.noalias() += ds.transpose() * qh;
            }
        }
    });
}

}  // namespace gcut3r::ad
