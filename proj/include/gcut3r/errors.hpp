#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gcut3r {

enum class Errc {
    invalid_intrinsics,
    invalid_scale,
    invalid_rotation,
    invalid_quaternion,
    shape,
    patch_geometry,
    degenerate_target,
    degenerate_configuration,
    empty_cloud,
    insufficient_points,
    no_valid_pixels,
    nonpositive_depth,
    empty_view,
    generation,
    evaluation,
    non_finite_loss,
    config,
    corrupt_checkpoint,
    missing_prior,
    io,
    malformed_file,
    usage,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what);

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& what);

}  // namespace gcut3r
