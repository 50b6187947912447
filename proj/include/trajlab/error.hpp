#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace trajlab {

/// Root of every error the library throws. Each subclass names one failure
/// kind so callers can catch exactly what they handle.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TRAJLAB_DEFINE_ERROR(Name)        \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

// transcript
TRAJLAB_DEFINE_ERROR(MalformedTranscript);
// activations
TRAJLAB_DEFINE_ERROR(FormatError);
TRAJLAB_DEFINE_ERROR(IoError);
// geometry
TRAJLAB_DEFINE_ERROR(InsufficientSamples);
TRAJLAB_DEFINE_ERROR(NumericalFailure);
TRAJLAB_DEFINE_ERROR(DegenerateSpectrum);
TRAJLAB_DEFINE_ERROR(EmptyCluster);
// probes
TRAJLAB_DEFINE_ERROR(ClassTooSmall);
TRAJLAB_DEFINE_ERROR(InvalidArgument);
// codesyntax
TRAJLAB_DEFINE_ERROR(CoverageError);
// scoring
TRAJLAB_DEFINE_ERROR(SchemaError);
TRAJLAB_DEFINE_ERROR(NoJsonFound);
TRAJLAB_DEFINE_ERROR(ZeroVariance);
TRAJLAB_DEFINE_ERROR(LengthMismatch);
TRAJLAB_DEFINE_ERROR(InsufficientData);
// sandbox
TRAJLAB_DEFINE_ERROR(HostError);
// pipeline
TRAJLAB_DEFINE_ERROR(EndpointError);
TRAJLAB_DEFINE_ERROR(RangeError);

#undef TRAJLAB_DEFINE_ERROR

/// Unparseable code. Line is 1-based, column is a 0-based byte offset into
/// the line (the convention of the Python reference parser).
class SyntaxError : public Error {
 public:
  SyntaxError(const std::string& msg, std::size_t line, std::size_t column)
      : Error(msg + " (line " + std::to_string(line) + ", column " + std::to_string(column) + ")"),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

}  // namespace trajlab
