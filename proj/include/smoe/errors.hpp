// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace smoe {

/// Dimension mismatch between operands (matrix shapes, vector lengths).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration or argument outside an operation's domain.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical failure (non-finite input, non-SPD Gram, singular triangular solve).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LoadErrc {
  BadMagic,
  BadVersion,
  Truncated,
  LengthMismatch,
  BadHeader,
};

/// Checkpoint / container deserialization failure with a machine-checkable code.
class LoadError : public std::runtime_error {
 public:
  LoadError(LoadErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  LoadErrc code() const { return code_; }

 private:
  LoadErrc code_;
};

}  // namespace smoe
