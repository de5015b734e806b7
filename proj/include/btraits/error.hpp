#pragma once

#include <stdexcept>
#include <string>

namespace btraits {

/// Broad failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind {
  Usage,     // bad flags, missing inputs, invalid config
  Data,      // malformed shards, checkpoints, datasets; invariant violations
  Io,        // filesystem failures
  Endpoint,  // unrecoverable MLLM endpoint failure (auth, exhausted retries)
  Numeric,   // divergence during training
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) { return {ErrorKind::Usage, what}; }
inline Error data_error(const std::string& what) { return {ErrorKind::Data, what}; }
inline Error io_error(const std::string& what) { return {ErrorKind::Io, what}; }

}  // namespace btraits
