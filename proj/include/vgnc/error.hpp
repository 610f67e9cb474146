#pragma once

#include <stdexcept>
#include <string>

namespace vgnc {

enum class Errc {
    point_behind_camera,
    degenerate_baseline,
    invalid_essential,
    cheirality_failure,
    degenerate_triangulation,
    insufficient_correspondences,
    estimation_failed,
    precondition,
    shape_mismatch,
    alignment,
    parse,
    missing_file,
    validation,
    unsupported_model,
    io,
};

inline const char* errc_name(Errc code) {
    switch (code) {
    case Errc::point_behind_camera: return "point-behind-camera";
    case Errc::degenerate_baseline: return "degenerate-baseline";
    case Errc::invalid_essential: return "invalid-essential";
    case Errc::cheirality_failure: return "cheirality-failure";
    case Errc::degenerate_triangulation: return "degenerate-triangulation";
    case Errc::insufficient_correspondences: return "insufficient-correspondences";
    case Errc::estimation_failed: return "estimation-failed";
    case Errc::precondition: return "precondition";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::alignment: return "alignment";
    case Errc::parse: return "parse";
    case Errc::missing_file: return "missing-file";
    case Errc::validation: return "validation";
    case Errc::unsupported_model: return "unsupported-model";
    case Errc::io: return "io";
    }
    return "unknown";
}

/// Every failure in the library is reported as an Error carrying a machine-checkable code.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

} // namespace vgnc
