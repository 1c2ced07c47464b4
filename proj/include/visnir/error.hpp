// Copyright 2026 The visnir-fuse Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
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

namespace visnir {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// File contents do not follow the expected format.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A value violates a documented invariant or precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Numerical failure (singular matrix, divergence, non-finite intermediate).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace visnir
