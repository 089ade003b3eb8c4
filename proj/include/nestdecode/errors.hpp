// Copyright 2026 The nestdecode Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace nestdecode {

// All library failures derive from Error so callers (the CLI) can map them to
// exit codes in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class CacheError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class QueryError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };

class CheckpointError : public Error {
 public:
  enum class Kind { io, truncated, bad_magic, version, checksum, config_mismatch };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace nestdecode
