#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace imdiff {

// Machine-readable failure class; the CLI prints it on stderr and maps it to
// the process exit code.
enum class ErrorCategory { config = 2, io = 3, data = 4, model = 5, numeric = 6 };

constexpr std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::data: return "data";
    case ErrorCategory::model: return "model";
    case ErrorCategory::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace imdiff
