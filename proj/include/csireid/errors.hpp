#pragma once

#include <stdexcept>
#include <string>

namespace csireid {

// Exit-code categories used by the CLI: 2 = config, 3 = data, 4 = numeric.
class Error : public std::runtime_error {
 public:
  Error(std::string msg, int exit_code)
      : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg, 3) {}
};

class FormatError : public DataError {
 public:
  explicit FormatError(const std::string& msg) : DataError(msg) {}
};

class TruncationError : public DataError {
 public:
  TruncationError(const std::string& msg, std::uint64_t byte_offset)
      : DataError(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::uint64_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::uint64_t byte_offset_;
};

class GeometryError : public DataError {
 public:
  explicit GeometryError(const std::string& msg) : DataError(msg) {}
};

class SymmetryError : public DataError {
 public:
  explicit SymmetryError(const std::string& msg) : DataError(msg) {}
};

class EmptyBatchError : public DataError {
 public:
  explicit EmptyBatchError(const std::string& msg) : DataError(msg) {}
};

class EmptyGalleryError : public DataError {
 public:
  explicit EmptyGalleryError(const std::string& msg) : DataError(msg) {}
};

class InsufficientDataError : public DataError {
 public:
  explicit InsufficientDataError(const std::string& msg) : DataError(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

class ShapeError : public NumericError {
 public:
  explicit ShapeError(const std::string& msg) : NumericError(msg) {}
};

class DegenerateMaskError : public NumericError {
 public:
  explicit DegenerateMaskError(const std::string& msg) : NumericError(msg) {}
};

class NormalizationError : public NumericError {
 public:
  explicit NormalizationError(const std::string& msg) : NumericError(msg) {}
};

}  // namespace csireid
