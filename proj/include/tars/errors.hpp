#pragma once

#include <stdexcept>
#include <string>

namespace tars {

// Process exit codes used by the command line tool. Library errors carry the
// code they map to so the CLI can translate them without a lookup table.
enum class ExitCode : int {
  kOk = 0,
  kInput = 2,
  kRefinement = 3,
  kNoCandidates = 4,
  kIntegrity = 5,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

// Argument outside an operation's mathematical domain (NaN, zero vector, p < 1).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

// Bad token ids, over-long sequences, malformed files.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

// Mutually exclusive options supplied together (or neither supplied).
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what, ExitCode::kInput) {}
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what, ExitCode::kInput), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class RefinementError : public Error {
 public:
  RefinementError(const std::string& what, double max_probability)
      : Error(what, ExitCode::kRefinement), max_probability_(max_probability) {}

  // Highest candidate probability observed before giving up.
  double max_probability() const noexcept { return max_probability_; }

 private:
  double max_probability_;
};

class EmptySelectionError : public Error {
 public:
  explicit EmptySelectionError(const std::string& what)
      : Error(what, ExitCode::kNoCandidates) {}
};

// Weights no longer match the checkpoint hash an edit record was made against.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error(what, ExitCode::kIntegrity) {}
};

}  // namespace tars
