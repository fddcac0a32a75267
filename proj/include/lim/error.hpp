// Copyright (c) 2026 The lim authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace lim {

// Base class for everything thrown by the library. The CLI maps
// ConfigError to exit code 2 and every other Error to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/rank mismatches between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Elementwise domain violations (log of non-positive values, degenerate
// inputs such as zero-norm embeddings or an all-zero impulse response).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed external files: WAV, manifest, checkpoint, trial list.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration keys/values or incompatible command usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures (unreadable/unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
};

// The corpus cannot support the requested operation (too few utterances,
// missing enrollment material, over-requested trial counts).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (e.g. gradients).
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string str(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}

}  // namespace detail

}  // namespace lim
