#pragma once

#include <stdexcept>
#include <string>

namespace drtune {

/// Coarse failure category. The CLI maps categories onto exit codes
/// (validation problems -> 1, runtime/numeric problems -> 2).
enum class ErrorKind {
  invalid_argument,
  dimension_mismatch,
  parse,
  io,
  non_convergence,
  config,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  /// True for errors a user can fix before a run starts (bad config,
  /// bad file, bad shapes handed to the API).
  bool is_validation() const {
    return kind_ == ErrorKind::invalid_argument || kind_ == ErrorKind::parse ||
           kind_ == ErrorKind::io || kind_ == ErrorKind::config ||
           kind_ == ErrorKind::dimension_mismatch;
  }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace drtune
