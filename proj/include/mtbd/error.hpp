#pragma once

#include <stdexcept>
#include <string>

namespace mtbd {

// Every error carries a short machine-readable kind so the CLI can report
// "error kind=<kind> msg=<text>" on a single line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error("parse", w) {}
};
struct InvariantError : Error {
  explicit InvariantError(const std::string& w) : Error("invariant", w) {}
};
struct TruncationError : Error {
  explicit TruncationError(const std::string& w) : Error("truncation", w) {}
};
struct PlanError : Error {
  explicit PlanError(const std::string& w) : Error("plan", w) {}
};
struct VariantError : Error {
  explicit VariantError(const std::string& w) : Error("variant", w) {}
};
struct TriggerError : Error {
  explicit TriggerError(const std::string& w) : Error("trigger", w) {}
};
struct LoadError : Error {
  explicit LoadError(const std::string& w) : Error("load", w) {}
};
struct TrainError : Error {
  explicit TrainError(const std::string& w) : Error("train", w) {}
};
struct InputError : Error {
  explicit InputError(const std::string& w) : Error("input", w) {}
};

}  // namespace mtbd
