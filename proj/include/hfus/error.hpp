// Copyright 2026 The HFUS Authors. All Rights Reserved.
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

namespace hfus {

// Base class of every error raised by the library. The subclasses let callers
// (and tests) tell the failure categories apart without parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or grid shapes. The message names the offending dimension.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value outside its documented domain (view id, K, probability, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward op, or found in a gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff tape (backward on a detached tensor, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable file.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (PGM, manifest, checkpoint, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Semantically inconsistent data, e.g. two labels within one study.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace hfus
