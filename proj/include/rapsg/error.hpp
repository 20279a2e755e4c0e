// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rapsg {

// Process exit codes used by the CLI. Each exception family below maps onto
// one of these.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kInputFormat = 2,
  kBackend = 3,
  kPartial = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kUsage; }
};

// Bad configuration, CLI usage, or a violated operation precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data.
class InputError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kInputFormat; }
};

// Binary store decoding failure at a known byte offset.
class FormatError : public InputError {
 public:
  enum class Kind { kHeader, kTruncated, kCountMismatch, kDuplicateId, kChecksum, kEmptyId };

  FormatError(Kind kind, std::uint64_t offset, const std::string& what)
      : InputError(what + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

// Summarizer backend failed after exhausting retries, or spoke bad protocol.
class BackendError : public Error {
 public:
  BackendError(std::string request_id, const std::string& what)
      : Error("request " + request_id + ": " + what), request_id_(std::move(request_id)) {}

  const std::string& request_id() const noexcept { return request_id_; }
  ExitCode exit_code() const noexcept override { return ExitCode::kBackend; }

 private:
  std::string request_id_;
};

}  // namespace rapsg
