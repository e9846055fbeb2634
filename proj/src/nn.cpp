#include "gcut3r/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gcut3r/errors.hpp"
#include "gcut3r/rng.hpp"

namespace gcut3r::nn {

Var ParamStore::add(const std::string& name, Array init) {
    if (index_.count(name)) fail(Errc::config, "duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    params_.push_back({name, Var(std::move(init), true)});
    return params_.back().var;
}

const Var& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Errc::config, "unknown parameter " + name);
    return params_[it->second].var;
}

std::size_t ParamStore::count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

Array trunc_normal(const Shape& shape, double stddev, std::uint64_t seed, const std::string& name) {
    std::mt19937_64 rng(derive_seed(seed, name));
    std::normal_distribution<double> dist(0.0, 1.0);
    Array out(shape);
    for (double& v : out.data) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = z * stddev;
    }
    return out;
}

void BlockConfig::validate(const std::string& what) const {
    if (embed_dim == 0 || heads == 0 || mlp_ratio == 0 || layers == 0) {
        fail(Errc::config, what + ": all block fields must be >= 1");
    }
    if (embed_dim % heads != 0) {
        fail(Errc::config, what + ": embed_dim " + std::to_string(embed_dim) +
                               " is not divisible by heads " + std::to_string(heads));
    }
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Init init,
               bool bias) {
    Array w = init == Init::zero ? Array({in, out}, 0.0)
                                 : trunc_normal({in, out}, 0.02, store.seed(), name + ".weight");
    weight_ = store.add(name + ".weight", std::move(w));
    if (bias) bias_ = store.add(name + ".bias", Array({out}, 0.0));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t dim)
    : gamma_(store.add(name + ".gamma", Array({dim}, 1.0))),
      beta_(store.add(name + ".beta", Array({dim}, 0.0))) {}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t dim,
                                       std::size_t heads)
    : heads_(heads),
      q_(store, name + ".q", dim, dim),
      k_(store, name + ".k", dim, dim, Init::standard, false),  // a key bias shifts every logit of a query equally
      v_(store, name + ".v", dim, dim),
      out_(store, name + ".out", dim, dim) {}

Var MultiHeadAttention::operator()(const Var& queries, const Var& context, Array* weights) const {
    return out_(ad::attention(q_(queries), k_(context), v_(context), heads_, weights));
}

Mlp::Mlp(ParamStore& store, const std::string& name, std::size_t dim, std::size_t hidden)
    : fc1_(store, name + ".fc1", dim, hidden), fc2_(store, name + ".fc2", hidden, dim) {}

Block::Block(ParamStore& store, const std::string& name, const BlockConfig& cfg)
    : ln1_(store, name + ".ln1", cfg.embed_dim),
      ln2_(store, name + ".ln2", cfg.embed_dim),
      attn_(store, name + ".attn", cfg.embed_dim, cfg.heads),
      mlp_(store, name + ".mlp", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio) {}

Var Block::operator()(const Var& x) const {
    Var h = ad::add(x, attn_(ln1_(x)));
    return ad::add(h, mlp_(ln2_(h)));
}

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& name, std::size_t channels,
                       std::size_t patch, std::size_t dim)
    : channels_(channels), patch_(patch), proj_(store, name, channels * patch * patch, dim) {}

Var PatchEmbed::operator()(const Var& raster) const {
    if (raster.shape().size() != 3 || raster.shape()[0] != channels_) {
        fail(Errc::shape, "patch embed expects " + std::to_string(channels_) + " channels, got " +
                              shape_str(raster.shape()));
    }
    return proj_(ad::patchify(raster, patch_));
}

Conv1x1::Conv1x1(ParamStore& store, const std::string& name, std::size_t dim, Init init)
    : proj_(store, name, dim, dim, init) {}

Array sincos_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
    if (dim % 4 != 0) fail(Errc::config, "sincos_2d needs embed_dim divisible by 4");
    const std::size_t quarter = dim / 4;
    Array out({grid_h * grid_w, dim});
    for (std::size_t i = 0; i < grid_h; ++i) {
        for (std::size_t j = 0; j < grid_w; ++j) {
            double* row = out.data.data() + (i * grid_w + j) * dim;
            for (std::size_t f = 0; f < quarter; ++f) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(f) / static_cast<double>(quarter));
                const double y = static_cast<double>(i) * omega, x = static_cast<double>(j) * omega;
                row[f] = std::sin(y);
                row[quarter + f] = std::cos(y);
                row[2 * quarter + f] = std::sin(x);
                row[3 * quarter + f] = std::cos(x);
            }
        }
    }
    return out;
}

GradCheckResult grad_check(const std::function<Var()>& f, std::vector<Parameter>& params, double eps,
                           std::size_t max_per_param, std::uint64_t seed) {
    for (auto& p : params) p.var.zero_grad();
    Var loss = f();
    if (!std::isfinite(loss.item())) fail(Errc::evaluation, "grad_check: objective is not finite");
    loss.backward();

    std::mt19937_64 rng(seed);
    GradCheckResult result;
    const double f0 = std::abs(loss.item());
    result.quantum = (std::nextafter(f0, INFINITY) - f0) / (2.0 * eps);
    for (auto& p : params) {
        const Array analytic = p.var.grad();
        std::vector<std::size_t> coords(p.var.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (max_per_param != 0 && coords.size() > max_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_per_param);
        }
        Array& value = p.var.mutable_value();
        for (std::size_t i : coords) {
            const double saved = value.data[i];
            double fp, fm;
            {
                ad::NoGradGuard guard;
                value.data[i] = saved + eps;
                fp = f().item();
                value.data[i] = saved - eps;
                fm = f().item();
            }
            value.data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                fail(Errc::evaluation, "grad_check: objective not finite near " + p.name);
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic.data[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            ++result.coordinates;
            if (result.worst.empty() || rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = p.name + "[" + std::to_string(i) + "]";
            }
            const double adjusted = std::max(0.0, std::abs(a - numeric) - kRoundoffQuanta * result.quantum) / denom;
            if (result.worst_adjusted.empty() || adjusted > result.max_adjusted_error) {
                result.max_adjusted_error = adjusted;
                result.worst_adjusted = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return result;
}

}  // namespace gcut3r::nn
