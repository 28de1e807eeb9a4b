#include "residual_lens/error.hpp"

namespace residual_lens {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ZeroMatrix: return "ZeroMatrix";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::DegenerateReference: return "DegenerateReference";
    case ErrorKind::NoOtherMass: return "NoOtherMass";
    case ErrorKind::ConstantSeries: return "ConstantSeries";
    case ErrorKind::BadColumn: return "BadColumn";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::InfeasibleShape: return "InfeasibleShape";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::DimMismatch: return "DimMismatch";
  }
  return "Unknown";
}

}  // namespace residual_lens
