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

#include "debfilter/synth_encoder.hpp"

#include "debfilter/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace debfilter {

namespace {

constexpr std::uint64_t kTokenSalt = 0x746f6b656e696473ULL;

std::vector<std::string> split_words(std::string_view prompt) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char ch : prompt) {
    if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch) && ch != '\'' && ch != '-') {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  // A word made only of apostrophes or hyphens carries no content.
  std::erase_if(words, [](const std::string& w) {
    return std::all_of(w.begin(), w.end(), [](char c) { return c == '\'' || c == '-'; });
  });
  return words;
}

}  // namespace

TokenId token_id(std::string_view word) { return splitmix64(fnv1a64(word) ^ kTokenSalt); }
TokenId sos_token_id() { return token_id(kSosText); }
TokenId eos_token_id() { return token_id(kEosText); }

std::string_view TokenizedPrompt::token_text(TokenSlot slot) const {
  if (!slot.valid()) throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + std::to_string(slot.index()));
  if (slot.index() == 1) return kSosText;
  if (content_span().contains(slot)) return words[slot.index() - 2];
  return kEosText;
}

std::optional<TokenSlot> TokenizedPrompt::find(std::string_view word) const {
  for (std::size_t i = 0; i < words.size(); ++i)
    if (words[i] == word) return TokenSlot(static_cast<int>(i) + 2);
  return std::nullopt;
}

std::string TokenizedPrompt::detokenize() const {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

TokenizedPrompt tokenize(std::string_view prompt) {
  TokenizedPrompt out;
  out.words = split_words(prompt);
  if (out.words.empty()) throw Error(ErrorCode::kEmptyPrompt, "prompt has no content tokens");
  if (out.words.size() > static_cast<std::size_t>(kMaxContentWords))
    throw Error(ErrorCode::kPromptTooLong,
                std::to_string(out.words.size()) + " words, at most " + std::to_string(kMaxContentWords));
  out.slots.fill(eos_token_id());
  out.slots[0] = sos_token_id();
  for (std::size_t i = 0; i < out.words.size(); ++i) out.slots[i + 1] = token_id(out.words[i]);
  return out;
}

std::optional<Pole> AttributeLexicon::pole_of_label(std::string_view label) const {
  if (label == pole_a_label) return Pole::kA;
  if (label == pole_b_label) return Pole::kB;
  return std::nullopt;
}

double AttributeLexicon::loading(std::string_view word) const {
  if (std::find(pole_a_words.begin(), pole_a_words.end(), word) != pole_a_words.end()) return 1.0;
  if (std::find(pole_b_words.begin(), pole_b_words.end(), word) != pole_b_words.end()) return -1.0;
  if (auto it = associations.find(std::string(word)); it != associations.end()) return it->second;
  return 0.0;
}

void AttributeLexicon::validate() const {
  if (pole_a_words.empty() || pole_b_words.empty())
    throw Error(ErrorCode::kInvalidLexicon, "both poles need at least one word");
  std::set<std::string> a(pole_a_words.begin(), pole_a_words.end());
  for (const auto& w : pole_b_words)
    if (a.count(w)) throw Error(ErrorCode::kInvalidLexicon, "word '" + w + "' is in both poles");
  for (const auto& [w, _] : associations)
    if (loading(w) != associations.at(w))
      throw Error(ErrorCode::kInvalidLexicon, "association '" + w + "' shadows a pole word");
  if (pole_a_label.empty() || pole_b_label.empty() || pole_a_label == pole_b_label)
    throw Error(ErrorCode::kInvalidLexicon, "pole labels must be distinct and non-empty");
  if (bias_direction.size() == 0 || !bias_direction.allFinite())
    throw Error(ErrorCode::kInvalidLexicon, "bias direction missing or not finite");
  if (std::abs(bias_direction.norm() - 1.0) > 1e-12)
    throw Error(ErrorCode::kInvalidLexicon, "bias direction is not unit norm");
}

Vector bias_direction_from_seed(std::uint64_t seed, int dim) {
  GaussianStream stream(derive_seed(seed, "bias_direction"));
  Vector v = stream.vector(dim);
  return v / v.norm();
}

AttributeLexicon parse_lexicon(std::string_view json_text, int dim) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidLexicon, e.what());
  }
  AttributeLexicon lex;
  try {
    lex.concept_name = j.at("concept_name").get<std::string>();
    lex.pole_a_words = j.at("pole_a_words").get<std::vector<std::string>>();
    lex.pole_b_words = j.at("pole_b_words").get<std::vector<std::string>>();
    lex.pole_a_label = j.value("pole_a_label", lex.pole_a_words.empty() ? "" : lex.pole_a_words.front());
    lex.pole_b_label = j.value("pole_b_label", lex.pole_b_words.empty() ? "" : lex.pole_b_words.front());
    if (j.contains("associations"))
      lex.associations = j.at("associations").get<std::map<std::string, double>>();
    if (j.contains("bias_direction")) {
      auto values = j.at("bias_direction").get<std::vector<double>>();
      if (static_cast<int>(values.size()) != dim)
        throw Error(ErrorCode::kInvalidLexicon, "bias_direction has " + std::to_string(values.size()) +
                                                    " entries, expected " + std::to_string(dim));
      lex.bias_direction = Eigen::Map<const Vector>(values.data(), dim);
      const double n = lex.bias_direction.norm();
      if (n == 0.0) throw Error(ErrorCode::kInvalidLexicon, "bias_direction is zero");
      lex.bias_direction /= n;
    } else {
      lex.bias_direction = bias_direction_from_seed(j.at("bias_direction_seed").get<std::uint64_t>(), dim);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidLexicon, e.what());
  }
  auto lower = [](std::vector<std::string>& ws) {
    for (auto& w : ws) std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
  };
  lower(lex.pole_a_words);
  lower(lex.pole_b_words);
  lex.validate();
  return lex;
}

AttributeLexicon load_lexicon(const std::filesystem::path& path, int dim) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open lexicon " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_lexicon(buf.str(), dim);
}

SyntheticEncoder::SyntheticEncoder(EncoderConfig config) : config_(config) {
  if (config_.embedding_dim <= 0) throw Error(ErrorCode::kShapeMismatch, "embedding_dim must be positive");
  padding_row_ = word_vector(kEosText);
  sos_row_ = word_vector(kSosText);
}

Vector SyntheticEncoder::word_vector(std::string_view word) const {
  GaussianStream stream(derive_seed({fnv1a64(word), config_.seed}));
  Vector v = stream.vector(config_.embedding_dim);
  return v / v.norm();
}

PromptEmbedding SyntheticEncoder::embed(const TokenizedPrompt& tokens, const AttributeLexicon* lexicon) const {
  if (lexicon && lexicon->bias_direction.size() != config_.embedding_dim)
    throw Error(ErrorCode::kShapeMismatch, "lexicon dimension differs from encoder dimension");
  PromptEmbedding out{Matrix(kTokenSlots, config_.embedding_dim), tokens};
  out.matrix.row(0) = sos_row_.transpose();
  for (std::size_t i = 0; i < tokens.words.size(); ++i) {
    Vector v = word_vector(tokens.words[i]);
    if (lexicon) {
      const double loading = lexicon->loading(tokens.words[i]);
      if (loading != 0.0) v += (loading * config_.beta) * lexicon->bias_direction;
    }
    out.matrix.row(static_cast<Eigen::Index>(i) + 1) = v.transpose();
  }
  for (Eigen::Index r = static_cast<Eigen::Index>(tokens.words.size()) + 1; r < kTokenSlots; ++r)
    out.matrix.row(r) = padding_row_.transpose();
  return out;
}

Matrix SyntheticEncoder::null_condition() const {
  Matrix m(kTokenSlots, config_.embedding_dim);
  for (Eigen::Index r = 0; r < kTokenSlots; ++r) m.row(r) = padding_row_.transpose();
  return m;
}

Readout attribute_readout(const Eigen::Ref<const Vector>& row, const AttributeLexicon& lexicon,
                          double tie_epsilon) {
  if (row.size() != lexicon.bias_direction.size())
    throw Error(ErrorCode::kShapeMismatch, "row dimension differs from lexicon dimension");
  const double score = row.dot(lexicon.bias_direction);
  if (!(std::abs(score) >= tie_epsilon))
    throw Error(ErrorCode::kAmbiguousReadout, "score " + std::to_string(score) + " within tie epsilon");
  return {score > 0 ? Pole::kA : Pole::kB, score};
}

}  // namespace debfilter
