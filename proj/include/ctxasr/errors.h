// Copyright 2026 The ctxasr Authors
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

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctxasr {

// Base class for every error raised by the library. The CLI maps the
// category() string onto its exit message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* category() const noexcept { return "error"; }
};

#define CTXASR_DEFINE_ERROR(Name, Category)                                \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(what) {}                \
    const char* category() const noexcept override { return Category; }  \
  };

CTXASR_DEFINE_ERROR(DimensionError, "dimension")
CTXASR_DEFINE_ERROR(ContractError, "contract")
CTXASR_DEFINE_ERROR(InvalidMaskError, "invalid-mask")
CTXASR_DEFINE_ERROR(VocabularyError, "vocabulary")
CTXASR_DEFINE_ERROR(InputTooShortError, "input-too-short")
CTXASR_DEFINE_ERROR(InfeasibleAlignmentError, "infeasible-alignment")
CTXASR_DEFINE_ERROR(CheckpointIncompatibleError, "checkpoint-incompatible")
CTXASR_DEFINE_ERROR(RecyclingUnsupportedError, "recycling-unsupported")
CTXASR_DEFINE_ERROR(NumericalError, "numerical")
CTXASR_DEFINE_ERROR(BenchmarkInvalidError, "benchmark-invalid")
CTXASR_DEFINE_ERROR(ConfigError, "config")
CTXASR_DEFINE_ERROR(FileNotFoundError, "file-not-found")

#undef CTXASR_DEFINE_ERROR

// Malformed binary file; carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  const char* category() const noexcept override { return "format"; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Invalid text input; line is 1-based, 0 when not tied to a line.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  const char* category() const noexcept override { return "validation"; }
  int line() const noexcept { return line_; }

 private:
  int line_;
};

}  // namespace ctxasr
