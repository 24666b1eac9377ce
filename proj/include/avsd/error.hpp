// Copyright 2026  The avsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace avsd {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree. The message names the offending op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value that must be finite was not.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file (checkpoint, feature file, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument; maps to exit status 2 in the CLI.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint of the wrong training stage was handed to a consumer.
class StageMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace avsd
