#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace somnlp {

/// Base of every error the library throws. `module()` names the subsystem
/// that raised it so the CLI can print module-qualified diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (vocab file, checkpoint, dataset).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// One bad input record; carries the 1-based line number.
class RecordError : public Error {
 public:
  RecordError(std::string module, std::size_t line, const std::string& what)
      : Error(std::move(module), "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FingerprintMismatch : public Error {
 public:
  using Error::Error;
};

/// Loss or parameters became NaN/Inf. `tensor()` names the first offending tensor.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string module, std::string tensor)
      : Error(std::move(module), "non-finite values in " + tensor), tensor_(std::move(tensor)) {}

  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace somnlp
