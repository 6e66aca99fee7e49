#pragma once

#include <stdexcept>
#include <string>

namespace rul {

/// Invalid user-supplied configuration (generation spec, training config).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data that violates a documented invariant or precondition.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API called in the wrong order (e.g. gradients before a forward pass).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training aborted at runtime: non-finite loss or policy drift.
class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rul
