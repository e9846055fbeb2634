#pragma once

// Reverse-mode differentiation over dense Arrays.
//
// Every op returns a Var whose node remembers its parents and a closure that
// propagates the output gradient back into them. Graphs are built eagerly and
// are confined to the thread that builds them. Broadcasting is limited to a
// right-hand operand whose shape is a suffix of the left-hand shape.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "gcut3r/array.hpp"

namespace gcut3r::ad {

struct Node {
    Array value;
    Array grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Array& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Array value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Array& value() const { return node_->value; }
    Array& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    /// Gradient accumulated by backward(); zeros if nothing reached this node.
    const Array& grad() const;
    void zero_grad();
    double item() const;
    const std::shared_ptr<Node>& node() const { return node_; }

    /// Seeds d(self)/d(self) = 1 (self must be a scalar) and runs the tape backwards.
    void backward() const;

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Array value);
Var zeros(Shape shape);

// Elementwise / broadcasting arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var gelu(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Linear algebra on rank-2 arrays.
Var matmul(const Var& a, const Var& b);
/// x[N x in] * w[in x out] + bias[out]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias);
Var transpose(const Var& a);

// Normalisation.
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var softmax(const Var& x);
/// Euclidean norm over the last axis; gradient is zero at the origin.
Var row_norm(const Var& x);

// Structure.
Var reshape(const Var& x, Shape shape);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);

/// c x H x W raster -> (H/p * W/p) x (c*p*p), patches in row-major order,
/// each patch flattened channel-major.
Var patchify(const Var& raster, std::size_t patch);
/// Inverse of patchify.
Var unpatchify(const Var& tokens, std::size_t channels, std::size_t height, std::size_t width,
               std::size_t patch);

/// Multi-head scaled dot-product attention on already-projected q[N x C], k[M x C], v[M x C].
/// When `weights` is non-null it receives the softmax weights, heads x N x M.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
              Array* weights = nullptr);

}  // namespace gcut3r::ad
