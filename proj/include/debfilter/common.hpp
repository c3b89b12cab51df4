/*
 * Copyright 2026 The DebFilter Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace debfilter {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Number of token slots in a conditioning sequence (sos + 75 words + eos).
inline constexpr int kTokenSlots = 77;
inline constexpr int kMaxContentWords = kTokenSlots - 2;

enum class ErrorCode {
  kEmptyPrompt,
  kPromptTooLong,
  kAmbiguousReadout,
  kInvalidLexicon,
  kShapeMismatch,
  kInvalidTimestep,
  kDegenerateAlphaBar,
  kInvalidSteps,
  kDegenerateAttention,
  kSingularSystem,
  kCaptureMismatch,
  kTokenIndexOutOfSpan,
  kIncompatibleOffsets,
  kProvenanceMismatch,
  kZeroVector,
  kMissingBreakdown,
  kIoError,
  kSchemaVersionMismatch,
  kChecksumMismatch,
  kOutOfRange,
  kEmptyInput,
  kNoDominantSamples,
  kCountMismatch,
  kConfigError,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// 1-based position in the 77-slot conditioning layout; slot 1 is <sos>.
class TokenSlot {
 public:
  constexpr TokenSlot() = default;
  constexpr explicit TokenSlot(int index) : index_(index) {}

  constexpr int index() const noexcept { return index_; }
  constexpr int row() const noexcept { return index_ - 1; }
  constexpr bool valid() const noexcept { return index_ >= 1 && index_ <= kTokenSlots; }

  friend constexpr bool operator==(TokenSlot, TokenSlot) = default;
  friend constexpr auto operator<=>(TokenSlot, TokenSlot) = default;

 private:
  int index_ = 0;
};

}  // namespace debfilter
