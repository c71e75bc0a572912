#pragma once

#include <stdexcept>
#include <string>

namespace fmcvrp {

// Broad failure classes; the CLI maps them to exit codes.
enum class ErrorKind { validation, divergence, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string& what) {
  return Error(ErrorKind::validation, what);
}

inline Error io_error(const std::string& what) { return Error(ErrorKind::io, what); }

inline Error divergence_error(const std::string& what) { return Error(ErrorKind::divergence, what); }

}  // namespace fmcvrp
