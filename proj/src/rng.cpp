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

#include "debfilter/rng.hpp"

#include <cmath>

namespace debfilter {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyPrompt: return "EmptyPrompt";
    case ErrorCode::kPromptTooLong: return "PromptTooLong";
    case ErrorCode::kAmbiguousReadout: return "AmbiguousReadout";
    case ErrorCode::kInvalidLexicon: return "InvalidLexicon";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kInvalidTimestep: return "InvalidTimestep";
    case ErrorCode::kDegenerateAlphaBar: return "DegenerateAlphaBar";
    case ErrorCode::kInvalidSteps: return "InvalidSteps";
    case ErrorCode::kDegenerateAttention: return "DegenerateAttention";
    case ErrorCode::kSingularSystem: return "SingularSystem";
    case ErrorCode::kCaptureMismatch: return "CaptureMismatch";
    case ErrorCode::kTokenIndexOutOfSpan: return "TokenIndexOutOfSpan";
    case ErrorCode::kIncompatibleOffsets: return "IncompatibleOffsets";
    case ErrorCode::kProvenanceMismatch: return "ProvenanceMismatch";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kMissingBreakdown: return "MissingBreakdown";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kSchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::kChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kNoDominantSamples: return "NoDominantSamples";
    case ErrorCode::kCountMismatch: return "CountMismatch";
    case ErrorCode::kConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  return derive_seed({base, fnv1a64(label)});
}

double to_unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

double counter_uniform(std::uint64_t key, std::uint64_t counter) {
  return to_unit_double(derive_seed({key, counter}));
}

// Marsaglia polar method.
double GaussianStream::next() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0.0, v = 0.0, s = 0.0;
  do {
    u = 2.0 * to_unit_double(engine_()) - 1.0;
    v = 2.0 * to_unit_double(engine_()) - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double scale = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * scale;
  has_spare_ = true;
  return u * scale;
}

Vector GaussianStream::vector(Eigen::Index n, double stddev) {
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out[i] = stddev * next();
  return out;
}

Matrix GaussianStream::matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) out(r, c) = stddev * next();
  return out;
}

}  // namespace debfilter
