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

#include "debfilter/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace debfilter {

using TokenId = std::uint64_t;

inline constexpr std::string_view kSosText = "<sos>";
inline constexpr std::string_view kEosText = "<eos>";

// Inclusive range of slots, 1-based.
struct SlotRange {
  TokenSlot first;
  TokenSlot last;

  bool contains(TokenSlot s) const { return s >= first && s <= last; }
  int size() const { return last.index() - first.index() + 1; }
};

// The 77-slot CLIP-style layout: <sos>, one slot per word, then <eos> to the end.
struct TokenizedPrompt {
  std::array<TokenId, kTokenSlots> slots{};
  std::vector<std::string> words;  // lowercased content words in order

  SlotRange content_span() const {
    return {TokenSlot(2), TokenSlot(1 + static_cast<int>(words.size()))};
  }
  std::string_view token_text(TokenSlot slot) const;
  // Slot of the first occurrence of `word` in the content span.
  std::optional<TokenSlot> find(std::string_view word) const;
  std::string detokenize() const;
};

TokenId token_id(std::string_view word);
TokenId sos_token_id();
TokenId eos_token_id();

/// Lowercases, strips punctuation, and lays the words out in the 77-slot format.
/// Throws EmptyPrompt / PromptTooLong.
TokenizedPrompt tokenize(std::string_view prompt);

enum class Pole { kA, kB };

// Two-pole concept with a known unit direction in embedding space. Words of
// pole A are pushed along +bias_direction, pole B along -bias_direction.
struct AttributeLexicon {
  std::string concept_name;
  std::string pole_a_label;
  std::string pole_b_label;
  std::vector<std::string> pole_a_words;
  std::vector<std::string> pole_b_words;
  // Extra signed loadings (in units of beta) for non-pole words, e.g. an
  // occupation that leans towards pole A.
  std::map<std::string, double> associations;
  Vector bias_direction;

  const std::string& label(Pole p) const { return p == Pole::kA ? pole_a_label : pole_b_label; }
  std::optional<Pole> pole_of_label(std::string_view label) const;
  // Signed loading of a word along bias_direction, before multiplying by beta.
  double loading(std::string_view word) const;
  void validate() const;
};

Vector bias_direction_from_seed(std::uint64_t seed, int dim);
AttributeLexicon load_lexicon(const std::filesystem::path& path, int dim);
AttributeLexicon parse_lexicon(std::string_view json_text, int dim);

struct EncoderConfig {
  int embedding_dim = 1024;
  std::uint64_t seed = 0;
  double beta = 1.0;
};

struct PromptEmbedding {
  Matrix matrix;  // kTokenSlots x embedding_dim
  TokenizedPrompt tokens;

  auto row(TokenSlot slot) { return matrix.row(slot.row()); }
  auto row(TokenSlot slot) const { return matrix.row(slot.row()); }
};

class SyntheticEncoder {
 public:
  explicit SyntheticEncoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  int dim() const { return config_.embedding_dim; }

  // Unit-norm vector derived from (word, seed) alone.
  Vector word_vector(std::string_view word) const;
  const Vector& padding_row() const { return padding_row_; }
  const Vector& sos_row() const { return sos_row_; }

  /// Embeds a tokenized prompt. With a lexicon, pole and associated words get
  /// their beta-scaled shift along the bias direction.
  PromptEmbedding embed(const TokenizedPrompt& tokens, const AttributeLexicon* lexicon) const;
  PromptEmbedding embed(std::string_view prompt, const AttributeLexicon* lexicon) const {
    return embed(tokenize(prompt), lexicon);
  }

  // Every slot holds the padding embedding; used as the unconditional input.
  Matrix null_condition() const;

 private:
  EncoderConfig config_;
  Vector padding_row_;
  Vector sos_row_;
};

struct Readout {
  Pole pole;
  double score;
};

/// Signed projection onto the lexicon direction. Throws AmbiguousReadout when
/// |score| < tie_epsilon.
Readout attribute_readout(const Eigen::Ref<const Vector>& row, const AttributeLexicon& lexicon,
                          double tie_epsilon = 1e-9);

}  // namespace debfilter
