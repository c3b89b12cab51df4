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

#include "debfilter/attention_stack.hpp"
#include "debfilter/common.hpp"
#include "debfilter/synth_encoder.hpp"
#include "debfilter/value_solver.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace debfilter {

inline constexpr int kOffsetSchemaVersion = 1;

struct PromptTriple {
  std::string source;
  std::string target;
  int token_index = 0;  // slot in the source prompt
  friend bool operator==(const PromptTriple&, const PromptTriple&) = default;
};

struct DirectionLabel {
  std::string from_pole;
  std::string to_pole;
  friend bool operator==(const DirectionLabel&, const DirectionLabel&) = default;
};

// Per-(layer, head) value shift dv = v_hat - v, averaged over the captured steps.
struct HeadShift {
  int layer_index = 0;
  int head_index = 0;
  Vector delta_v;
};

// A debiasing direction in conditioning space plus where it came from.
struct ConceptOffset {
  std::string concept_name;
  Vector delta_c;
  std::vector<PromptTriple> source_prompts;
  int steps_used = 2;
  DirectionLabel direction;
  std::uint64_t encoder_seed = 0;
  std::string model_config_hash;
  std::optional<std::vector<HeadShift>> breakdown;
};

struct OffsetTarget {
  TokenSlot slot;
  int sign = +1;
};

struct ApplicationPolicy {
  std::vector<OffsetTarget> targets;
  double ratio = 1.0;
  std::uint64_t rng_seed = 0;
};

struct OffsetOptions {
  int capture_steps = 2;
  int sampling_steps = 10;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  bool keep_breakdown = true;
};

// Holds the stack, encoder and the factored value Gram so that several
// offsets can be computed without refactoring the normal equations.
class OffsetEstimator {
 public:
  OffsetEstimator(std::shared_ptr<const CAStackSpec> stack, SyntheticEncoder encoder, AttributeLexicon lexicon,
                  std::optional<double> ridge_lambda = std::nullopt);

  const ToyDenoiser& denoiser() const { return denoiser_; }
  const SyntheticEncoder& encoder() const { return encoder_; }
  const AttributeLexicon& lexicon() const { return lexicon_; }
  const ValueGram& gram() const { return gram_; }

  /// Offset that moves row m of the source conditioning towards what the
  /// target prompt produces in every cross-attention layer, estimated over the
  /// first capture_steps sampling steps.
  ConceptOffset compute(const std::string& source_prompt, const std::string& target_prompt, TokenSlot m,
                        const OffsetOptions& options = {}) const;

  // Lower-level entry on raw conditioning matrices; provenance is left empty.
  ConceptOffset compute(const Matrix& source, const Matrix& target, TokenSlot m, const OffsetOptions& options) const;

 private:
  std::shared_ptr<const CAStackSpec> stack_;
  SyntheticEncoder encoder_;
  AttributeLexicon lexicon_;
  ToyDenoiser denoiser_;
  ValueGram gram_;
};

ConceptOffset average_offsets(const std::vector<ConceptOffset>& offsets);
ConceptOffset invert(const ConceptOffset& offset);

struct AppliedEmbedding {
  PromptEmbedding embedding;
  bool applied = false;
};

// Bernoulli(ratio) draw keyed by (rng_seed, sample_index).
bool ratio_draw(double ratio, std::uint64_t rng_seed, std::uint64_t sample_index);

/// Adds sign * delta_c to each target row when the ratio draw succeeds.
/// Rows that are not targeted are left bit-for-bit unchanged.
AppliedEmbedding apply_offset(const PromptEmbedding& c, const ConceptOffset& offset, const ApplicationPolicy& policy,
                              std::uint64_t sample_index, const std::string& model_config_hash);

double offset_cosine(const ConceptOffset& a, const ConceptOffset& b);

using HeadKey = std::pair<int, int>;  // (layer_index, head_index)
std::map<HeadKey, double> value_offset_similarity(const ConceptOffset& a, const ConceptOffset& b);

/// |A[i, m]| * ||W_v^h delta_c|| for each latent token i.
Vector attention_diff_map(const LatentState& z, const PromptEmbedding& c, const ConceptOffset& offset, TokenSlot m,
                          const CALayerSpec& layer, int head);
void write_attention_diff_csv(const Vector& map, const std::filesystem::path& path);

std::string offset_to_json(const ConceptOffset& offset);
ConceptOffset offset_from_json(const std::string& text);
void save_offset(const ConceptOffset& offset, const std::filesystem::path& path);
ConceptOffset load_offset(const std::filesystem::path& path);

}  // namespace debfilter
