#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gcut3r/autograd.hpp"

namespace gcut3r::nn {

using ad::Var;

struct Parameter {
    std::string name;
    Var var;  // leaf with requires_grad; gradient lives on the node
};

/// Owns every trainable leaf of a model under dotted names.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Var add(const std::string& name, Array init);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    std::size_t count() const;
    void zero_grad();

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Normal(0, std) truncated at +-2 std, drawn from a generator keyed on (seed, name) so one
/// parameter's values do not depend on how many others were created before it.
Array trunc_normal(const Shape& shape, double stddev, std::uint64_t seed, const std::string& name);

struct BlockConfig {
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t layers = 4;

    void validate(const std::string& what) const;
};

enum class Init { zero, standard };

class Linear {
public:
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
           Init init = Init::standard, bool bias = true);

    Var operator()(const Var& x) const { return ad::linear(x, weight_, bias_); }
    const Var& weight() const { return weight_; }
    const Var& bias() const { return bias_; }

private:
    Var weight_;
    Var bias_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, std::size_t dim);
    Var operator()(const Var& x) const { return ad::layernorm(x, gamma_, beta_); }

private:
    Var gamma_;
    Var beta_;
};

/// Projections around ad::attention. Self-attention when called with one argument.
/// The key projection has no bias: it would cancel in the softmax.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads);

    Var operator()(const Var& x) const { return (*this)(x, x); }
    Var operator()(const Var& queries, const Var& context, Array* weights = nullptr) const;

private:
    std::size_t heads_ = 1;
    Linear q_, k_, v_, out_;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden);
    Var operator()(const Var& x) const { return fc2_(ad::gelu(fc1_(x))); }

private:
    Linear fc1_, fc2_;
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
class Block {
public:
    Block() = default;
    Block(ParamStore& store, const std::string& name, const BlockConfig& cfg);
    Var operator()(const Var& x) const;

private:
    LayerNorm ln1_, ln2_;
    MultiHeadAttention attn_;
    Mlp mlp_;
};

/// Non-overlapping p x p patches of a c x H x W raster, flattened and mapped to `dim` channels.
class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(ParamStore& store, const std::string& name, std::size_t channels, std::size_t patch,
               std::size_t dim);
    Var operator()(const Var& raster) const;

    std::size_t channels() const { return channels_; }
    std::size_t patch() const { return patch_; }

private:
    std::size_t channels_ = 0;
    std::size_t patch_ = 1;
    Linear proj_;
};

/// Per-token channel mixing W x + b (a 1x1 convolution on the token grid).
class Conv1x1 {
public:
    Conv1x1() = default;
    Conv1x1(ParamStore& store, const std::string& name, std::size_t dim, Init init);
    Var operator()(const Var& tokens) const { return proj_(tokens); }
    const Linear& linear() const { return proj_; }

private:
    Linear proj_;
};

/// Fixed 2D sinusoidal encoding for a gh x gw token grid, (gh*gw) x dim.
Array sincos_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst;  // "name[index]" of the worst coordinate
    /// Smallest nonzero central difference: ulp(|f|) / 2eps.
    double quantum = 0.0;
    /// Relative error after forgiving kRoundoffQuanta quanta of absolute error per coordinate.
    double max_adjusted_error = 0.0;
    std::string worst_adjusted;
};

inline constexpr double kRoundoffQuanta = 16.0;

/// Compares analytic gradients of `f` with central differences (f(x+eps) - f(x-eps)) / 2eps.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator. When
/// `max_per_param` is nonzero only that many coordinates per parameter are probed,
/// chosen by a generator seeded with `seed`.
GradCheckResult grad_check(const std::function<Var()>& f, std::vector<Parameter>& params,
                           double eps = 1e-5, std::size_t max_per_param = 0,
                           std::uint64_t seed = 0);

}  // namespace gcut3r::nn
