// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace stochbp {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad configuration value (unknown op, unsupported keep-ratio, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index (mask entry, row, class label) outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Object used in the wrong lifecycle state (backward before forward, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Caller broke an API contract (non-scalar loss, mismatched runs, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A kernel produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stochbp
