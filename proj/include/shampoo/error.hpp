#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace shampoo {

enum class ErrorCode {
    InvalidArgument,
    NonFinite,
    NoConvergence,
    EpsilonZeroWithSingular,
    MaxIterationsExceeded,
    ShapeMismatch,
    NotYetPreconditioned,
    OutOfRange,
    UnknownKind,
    InvalidGroupSize,
    BufferOverflow,
    DivergedReplicas,
    NonFiniteGradient,
    LabelOutOfRange,
    ConfigInvalid,
    IoError,
    CheckpointInvalid,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (the root-inverse guard in particular) can branch on the kind.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace shampoo
