#include "gcut3r/array.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "gcut3r/errors.hpp"

namespace gcut3r {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Array::Array(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Array::Array(Shape s, const std::vector<double>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (data.size() != numel(shape)) {
        fail(Errc::shape, "array of shape " + shape_str(shape) + " given " +
                              std::to_string(data.size()) + " values");
    }
}

bool Array::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

double Array::max_abs_diff(const Array& other) const {
    if (shape != other.shape) {
        fail(Errc::shape, "max_abs_diff: " + shape_str(shape) + " vs " + shape_str(other.shape));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) m = std::max(m, std::abs(data[i] - other.data[i]));
    return m;
}

std::string_view errc_name(Errc code) {
    switch (code) {
        case Errc::invalid_intrinsics: return "invalid-intrinsics";
        case Errc::invalid_scale: return "invalid-scale";
        case Errc::invalid_rotation: return "invalid-rotation";
        case Errc::invalid_quaternion: return "invalid-quaternion";
        case Errc::shape: return "shape";
        case Errc::patch_geometry: return "patch-geometry";
        case Errc::degenerate_target: return "degenerate-target";
        case Errc::degenerate_configuration: return "degenerate-configuration";
        case Errc::empty_cloud: return "empty-cloud";
        case Errc::insufficient_points: return "insufficient-points";
        case Errc::no_valid_pixels: return "no-valid-pixels";
        case Errc::nonpositive_depth: return "nonpositive-depth";
        case Errc::empty_view: return "empty-view";
        case Errc::generation: return "generation";
        case Errc::evaluation: return "evaluation";
        case Errc::non_finite_loss: return "non-finite-loss";
        case Errc::config: return "config";
        case Errc::corrupt_checkpoint: return "corrupt-checkpoint";
        case Errc::missing_prior: return "missing-prior";
        case Errc::io: return "io";
        case Errc::malformed_file: return "malformed-file";
        case Errc::usage: return "usage";
    }
    return "unknown";
}

Error::Error(Errc code, const std::string& what)
    : std::runtime_error(std::string(errc_name(code)) + " error: " + what), code_(code) {}

void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace gcut3r
