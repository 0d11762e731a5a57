/* Copyright 2026 The Xpert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xpert {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kZeroVector,
  kNonFinite,
  kDegenerateWord,
  kBackend,
  kProtocol,
  kIo,
  kFormat,
  kChecksum,
  kNotFound,
  kConflict,
  kMismatch,
  kUnavailable,
  kUnschedulable,
};

std::string_view error_code_name(ErrorCode code);

// Every failure raised by the library carries one of the codes above so the
// CLI and the HTTP layer can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised when a backend replies with an {"error":{...}} object.
class BackendError : public Error {
 public:
  BackendError(std::string backend_code, const std::string& message)
      : Error(ErrorCode::kBackend, message), backend_code_(std::move(backend_code)) {}

  const std::string& backend_code() const noexcept { return backend_code_; }

 private:
  std::string backend_code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace xpert
