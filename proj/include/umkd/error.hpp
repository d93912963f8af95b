// Copyright 2026 The UMKD Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace umkd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed arguments: shape or dimension mismatches, out-of-range values.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered in a loss or activation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (schema violations, bad layer wiring).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Failure while reading data from disk.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// A frozen model was mutated, or a parameter set was wired incorrectly.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename E = InputError>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace detail
}  // namespace umkd
