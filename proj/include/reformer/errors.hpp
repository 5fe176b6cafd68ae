// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace reformer {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or an out-of-range index into a tensor.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (double backward, non-scalar loss, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

// A loss with no contributing rows.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

// Malformed input files, schema violations, inconsistent datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Bad configuration values or call-order violations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace reformer
