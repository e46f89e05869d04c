#pragma once

#include <stdexcept>
#include <string>

namespace versekit {

// Bad user input: malformed flags, unreadable files, out-of-range settings.
// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure while executing an otherwise valid request: I/O errors mid-run,
// numerical divergence, a download that kept failing. Exit code 2.
class RunError : public std::runtime_error {
public:
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace versekit
