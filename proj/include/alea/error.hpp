#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace alea {

enum class ErrorKind {
  kDimension,
  kNumeric,
  kContract,
  kFormat,
  kConfig,
  kCapacity,
  kVocabulary,
  kDataset,
  kTraining,
  kLocality,
  kDependency,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kVocabulary: return "vocabulary";
    case ErrorKind::kDataset: return "dataset";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kLocality: return "locality";
    case ErrorKind::kDependency: return "dependency";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

// Single exception type for the library; the kind decides how callers
// (mostly the CLI) react.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) fail(kind, what);
}

}  // namespace alea
