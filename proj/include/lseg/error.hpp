#pragma once

#include <stdexcept>
#include <string>

namespace lseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or geometry disagreement between operands.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (ranges, counts, modes).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrc {
  bad_magic,
  bad_version,
  bad_dtype,
  truncated,
  size_mismatch,
  io,
};

inline const char* to_string(FormatErrc c) {
  switch (c) {
    case FormatErrc::bad_magic: return "bad magic";
    case FormatErrc::bad_version: return "unsupported version";
    case FormatErrc::bad_dtype: return "bad dtype";
    case FormatErrc::truncated: return "truncated payload";
    case FormatErrc::size_mismatch: return "dims/payload mismatch";
    case FormatErrc::io: return "i/o failure";
  }
  return "unknown";
}

/// Raised by the binary readers; code() tells the failure cases apart.
class FormatError : public Error {
 public:
  FormatError(FormatErrc code, const std::string& where)
      : Error(std::string(to_string(code)) + ": " + where), code_(code) {}
  FormatErrc code() const noexcept { return code_; }

 private:
  FormatErrc code_;
};

}  // namespace lseg
