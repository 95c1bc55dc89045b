#pragma once

#include <stdexcept>
#include <string>

namespace semcal {

enum class ErrorCode {
  invalid_argument,
  invalid_config,
  degenerate_rotation,
  empty_batch,
  non_finite,
  diverged,
  degenerate_scene,
  insufficient_correspondences,
  degenerate_geometry,
  io,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::invalid_config: return "invalid config";
    case ErrorCode::degenerate_rotation: return "degenerate rotation";
    case ErrorCode::empty_batch: return "empty batch";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::degenerate_scene: return "degenerate scene";
    case ErrorCode::insufficient_correspondences: return "insufficient correspondences";
    case ErrorCode::degenerate_geometry: return "degenerate geometry";
    case ErrorCode::io: return "i/o error";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

#define SEMCAL_CHECK(cond, code, msg)              \
  do {                                             \
    if (!(cond)) throw ::semcal::Error((code), (msg)); \
  } while (0)

}  // namespace semcal
