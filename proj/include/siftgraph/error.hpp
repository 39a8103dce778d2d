#pragma once

#include <stdexcept>
#include <string>

namespace siftgraph {

/// Broad failure category; the CLI maps these onto its exit codes.
enum class ErrorKind { usage, io, validation };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string& what) { return {ErrorKind::validation, what}; }
inline Error io_error(const std::string& what) { return {ErrorKind::io, what}; }
inline Error usage_error(const std::string& what) { return {ErrorKind::usage, what}; }

}  // namespace siftgraph
