// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Error hierarchy shared by every module. Each error carries the name of the
// operation that raised it so CLI messages point at the failing step.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmsae {

class Error : public std::runtime_error {
 public:
  Error(std::string op, const std::string& message)
      : std::runtime_error(op + ": " + message), op_(std::move(op)) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Bad header, zero dimension, unknown enum tag.
class FormatError : public Error {
  using Error::Error;
};

// Payload shorter than its header promises.
class CorruptionError : public Error {
  using Error::Error;
};

// Cross-record disagreement: meta vs vectors, qrels vs task, missing samples.
class ConsistencyError : public Error {
  using Error::Error;
};

class ShapeError : public Error {
  using Error::Error;
};

class IndexError : public Error {
  using Error::Error;
};

// Invalid parameters supplied by the caller.
class ConfigError : public Error {
  using Error::Error;
};

// Non-finite values, degenerate matrices or embeddings.
class NumericError : public Error {
  using Error::Error;
};

class IoError : public Error {
  using Error::Error;
};

// All tokens of a sample were masked out.
class EmptySampleError : public Error {
  using Error::Error;
};

class TrainingAborted : public Error {
 public:
  TrainingAborted(std::string op, const std::string& message, std::size_t steps_completed)
      : Error(std::move(op), message + " (steps completed: " + std::to_string(steps_completed) + ")"),
        steps_completed_(steps_completed) {}

  std::size_t steps_completed() const noexcept { return steps_completed_; }

 private:
  std::size_t steps_completed_;
};

}  // namespace mmsae
