#pragma once

#include <stdexcept>
#include <string>

namespace sola {

/// Base class for every error raised by the library. `kind()` is the
/// machine-readable category reported by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape", w) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error("parameter", w) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error("validation", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct LoadError : Error {
  explicit LoadError(const std::string& w) : Error("load", w) {}
};
struct MetricError : Error {
  explicit MetricError(const std::string& w) : Error("metric", w) {}
};

}  // namespace sola
