#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace trajlab::detail {

struct PyStatement {
  std::string kind;  // CPython node class name
  std::size_t start = 0;
  std::size_t end = 0;
  /// Expression statement whose value is a call with the same extent.
  bool bare_call = false;
};

struct PyCall {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string callee;  // dotted path or "<dynamic>"
};

struct PyParse {
  std::vector<PyStatement> statements;
  std::vector<PyCall> calls;
};

/// Recognises Python 3.10 source without building a full tree; records the
/// byte extent of every statement and call the way CPython's ast reports
/// them. Throws SyntaxError.
PyParse parse_python(std::string_view source);

}  // namespace trajlab::detail
