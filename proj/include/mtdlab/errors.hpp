#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtdlab {

// Bad caller input: wrong lengths, non-finite values, out-of-range ids.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A statistic is undefined for the given data (zero variance, degenerate control).
class StatisticError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent model / run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary stream. Carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Random generation could not satisfy its constraints.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

// A pipeline stage ran before the stage that produces its inputs.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mtdlab
