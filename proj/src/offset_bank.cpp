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

#include "debfilter/offset_bank.hpp"

#include "debfilter/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace debfilter {

namespace {

using nlohmann::json;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector to_vector(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kZeroVector, "cosine of a zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Running mean; exact for repeated or cancelling inputs.
class RunningMean {
 public:
  void add(const Vector& x) {
    ++count_;
    if (count_ == 1) {
      mean_ = x;
    } else {
      mean_ += (x - mean_) / static_cast<double>(count_);
    }
  }
  const Vector& mean() const { return mean_; }

 private:
  Vector mean_;
  long count_ = 0;
};

DirectionLabel direction_from(const Vector& delta, const AttributeLexicon& lexicon) {
  if (delta.dot(lexicon.bias_direction) < 0) return {lexicon.pole_a_label, lexicon.pole_b_label};
  return {lexicon.pole_b_label, lexicon.pole_a_label};
}

json offset_payload(const ConceptOffset& o) {
  json j;
  j["schema_version"] = kOffsetSchemaVersion;
  j["concept"] = o.concept_name;
  j["direction_label"] = {{"from", o.direction.from_pole}, {"to", o.direction.to_pole}};
  j["D_c"] = o.delta_c.size();
  j["delta_c"] = to_std(o.delta_c);
  if (o.breakdown) {
    json rows = json::array();
    for (const auto& s : *o.breakdown)
      rows.push_back({{"layer", s.layer_index}, {"head", s.head_index}, {"delta_v", to_std(s.delta_v)}});
    j["breakdown"] = rows;
  }
  json prompts = json::array();
  for (const auto& p : o.source_prompts)
    prompts.push_back({{"source", p.source}, {"target", p.target}, {"token_index", p.token_index}});
  j["source_prompts"] = prompts;
  j["steps_used"] = o.steps_used;
  j["encoder_seed"] = o.encoder_seed;
  j["model_config_hash"] = o.model_config_hash;
  return j;
}

}  // namespace

OffsetEstimator::OffsetEstimator(std::shared_ptr<const CAStackSpec> stack, SyntheticEncoder encoder,
                                 AttributeLexicon lexicon, std::optional<double> ridge_lambda)
    : stack_(std::move(stack)),
      encoder_(std::move(encoder)),
      lexicon_(std::move(lexicon)),
      denoiser_(stack_, encoder_.null_condition()),
      gram_(ValueGram::for_stack(*stack_, ridge_lambda)) {
  if (stack_->embedding_dim != encoder_.dim())
    throw Error(ErrorCode::kShapeMismatch, "encoder and stack embedding dimensions differ");
  lexicon_.validate();
  if (lexicon_.bias_direction.size() != encoder_.dim())
    throw Error(ErrorCode::kShapeMismatch, "lexicon and encoder dimensions differ");
}

ConceptOffset OffsetEstimator::compute(const std::string& source_prompt, const std::string& target_prompt,
                                       TokenSlot m, const OffsetOptions& options) const {
  const PromptEmbedding source = encoder_.embed(source_prompt, &lexicon_);
  const PromptEmbedding target = encoder_.embed(target_prompt, &lexicon_);
  if (!source.tokens.content_span().contains(m))
    throw Error(ErrorCode::kTokenIndexOutOfSpan,
                "slot " + std::to_string(m.index()) + " is outside the content of '" + source_prompt + "'");
  ConceptOffset out = compute(source.matrix, target.matrix, m, options);
  out.concept_name = lexicon_.concept_name;
  out.direction = direction_from(out.delta_c, lexicon_);
  out.source_prompts.push_back({source_prompt, target_prompt, m.index()});
  out.encoder_seed = encoder_.config().seed;
  return out;
}

ConceptOffset OffsetEstimator::compute(const Matrix& source, const Matrix& target, TokenSlot m,
                                       const OffsetOptions& options) const {
  if (!m.valid()) throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + std::to_string(m.index()));
  if (options.capture_steps < 2)
    throw Error(ErrorCode::kInvalidSteps, "offsets need at least two captured steps");
  if (options.sampling_steps < options.capture_steps)
    throw Error(ErrorCode::kInvalidSteps, "fewer sampling steps than captured steps");
  const auto& stack = *stack_;
  const ConditionProjection source_proj = denoiser_.project(source);
  const ConditionProjection target_proj = denoiser_.project(target);

  CaptureRecorder recorder;
  recorder.max_steps = options.capture_steps;
  GenerateOptions gen;
  gen.steps = options.sampling_steps;
  gen.guidance = options.guidance;
  gen.seed = options.seed;
  denoiser_.generate(source_proj, gen, &recorder);

  const Vector original = source.row(m.row()).transpose();
  const std::size_t head_count = static_cast<std::size_t>(stack.total_heads());
  std::vector<RunningMean> shifts(head_count);
  RunningMean unified;

  for (const StepCapture& step : recorder.steps) {
    std::vector<Vector> estimates;
    std::vector<ValueEstimate> kept;
    std::vector<ProjectionRef> kept_projections;
    estimates.reserve(head_count);
    bool any_degenerate = false;
    std::size_t k = 0;
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
      const auto& layer = stack.layers[l];
      const LayerCapture& src = step.layers[l];
      const LayerCapture tgt = run_layer(src.input, layer, target_proj.keys[l], target_proj.values[l]);
      for (int h = 0; h < layer.num_heads; ++h, ++k) {
        const ValueProblem problem = build_value_problem(src, tgt, m, h, layer.head_dim);
        ValueEstimate est;
        try {
          est = solve_value(problem);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kDegenerateAttention) throw;
          any_degenerate = true;
          est.value = problem.original_value;
          shifts[k].add(Vector::Zero(layer.head_dim));
          estimates.push_back(std::move(est.value));
          continue;
        }
        est.layer_index = layer.layer_index;
        est.head_index = h;
        est.token = m;
        shifts[k].add(est.value - problem.original_value);
        estimates.push_back(est.value);
        kept.push_back(std::move(est));
        kept_projections.emplace_back(layer.value_head(h));
      }
    }
    if (!any_degenerate) {
      unified.add(gram_.solve(estimates, &original).embedding);
    } else {
      if (kept.empty()) throw Error(ErrorCode::kDegenerateAttention, "every head ignores the target token");
      UnifiedRegression reg{std::move(kept), std::move(kept_projections), gram_.ridge_lambda(), original};
      unified.add(unify_embedding(reg).embedding);
    }
  }

  ConceptOffset out;
  out.delta_c = unified.mean() - original;
  out.steps_used = options.capture_steps;
  out.model_config_hash = stack.config_hash;
  if (options.keep_breakdown) {
    std::vector<HeadShift> breakdown;
    std::size_t k = 0;
    for (const auto& layer : stack.layers)
      for (int h = 0; h < layer.num_heads; ++h, ++k) breakdown.push_back({layer.layer_index, h, shifts[k].mean()});
    out.breakdown = std::move(breakdown);
  }
  return out;
}

ConceptOffset average_offsets(const std::vector<ConceptOffset>& offsets) {
  if (offsets.empty()) throw Error(ErrorCode::kIncompatibleOffsets, "nothing to average");
  const ConceptOffset& first = offsets.front();
  for (const auto& o : offsets) {
    if (o.delta_c.size() != first.delta_c.size())
      throw Error(ErrorCode::kIncompatibleOffsets, "offsets have different dimensions");
    if (o.concept_name != first.concept_name)
      throw Error(ErrorCode::kIncompatibleOffsets, "concepts differ: " + o.concept_name + " vs " + first.concept_name);
    if (o.encoder_seed != first.encoder_seed) throw Error(ErrorCode::kIncompatibleOffsets, "encoder seeds differ");
    if (o.model_config_hash != first.model_config_hash)
      throw Error(ErrorCode::kIncompatibleOffsets, "offsets come from different models");
  }
  ConceptOffset out = first;
  out.source_prompts.clear();
  RunningMean mean;
  for (const auto& o : offsets) {
    mean.add(o.delta_c);
    out.source_prompts.insert(out.source_prompts.end(), o.source_prompts.begin(), o.source_prompts.end());
  }
  out.delta_c = mean.mean();

  const bool all_breakdowns = std::all_of(offsets.begin(), offsets.end(), [&](const ConceptOffset& o) {
    if (!o.breakdown || o.breakdown->size() != first.breakdown->size()) return false;
    for (std::size_t k = 0; k < o.breakdown->size(); ++k) {
      const auto& a = (*o.breakdown)[k];
      const auto& b = (*first.breakdown)[k];
      if (a.layer_index != b.layer_index || a.head_index != b.head_index || a.delta_v.size() != b.delta_v.size())
        return false;
    }
    return true;
  });
  if (first.breakdown && all_breakdowns) {
    for (std::size_t k = 0; k < first.breakdown->size(); ++k) {
      RunningMean m;
      for (const auto& o : offsets) m.add((*o.breakdown)[k].delta_v);
      (*out.breakdown)[k].delta_v = m.mean();
    }
  } else {
    out.breakdown.reset();
  }
  return out;
}

ConceptOffset invert(const ConceptOffset& offset) {
  ConceptOffset out = offset;
  out.delta_c = -offset.delta_c;
  std::swap(out.direction.from_pole, out.direction.to_pole);
  if (out.breakdown)
    for (auto& s : *out.breakdown) s.delta_v = -s.delta_v;
  return out;
}

bool ratio_draw(double ratio, std::uint64_t rng_seed, std::uint64_t sample_index) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::kOutOfRange, "ratio must lie in [0, 1]");
  return counter_uniform(rng_seed, sample_index) < ratio;
}

AppliedEmbedding apply_offset(const PromptEmbedding& c, const ConceptOffset& offset, const ApplicationPolicy& policy,
                              std::uint64_t sample_index, const std::string& model_config_hash) {
  if (offset.model_config_hash != model_config_hash)
    throw Error(ErrorCode::kProvenanceMismatch,
                "offset built for model " + offset.model_config_hash + ", stack is " + model_config_hash);
  if (offset.delta_c.size() != c.matrix.cols())
    throw Error(ErrorCode::kShapeMismatch, "offset dimension differs from embedding dimension");
  const SlotRange span = c.tokens.content_span();
  for (const auto& t : policy.targets) {
    if (!span.contains(t.slot))
      throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + std::to_string(t.slot.index()) + " outside content");
    if (t.sign != 1 && t.sign != -1) throw Error(ErrorCode::kOutOfRange, "target sign must be +1 or -1");
  }
  AppliedEmbedding out{c, ratio_draw(policy.ratio, policy.rng_seed, sample_index)};
  if (!out.applied) return out;
  for (const auto& t : policy.targets) {
    auto row = out.embedding.row(t.slot);
    if (t.sign > 0) {
      row += offset.delta_c.transpose();
    } else {
      row -= offset.delta_c.transpose();
    }
  }
  return out;
}

double offset_cosine(const ConceptOffset& a, const ConceptOffset& b) {
  if (a.delta_c.size() != b.delta_c.size()) throw Error(ErrorCode::kShapeMismatch, "offset dimensions differ");
  return cosine(a.delta_c, b.delta_c);
}

std::map<HeadKey, double> value_offset_similarity(const ConceptOffset& a, const ConceptOffset& b) {
  if (!a.breakdown || !b.breakdown)
    throw Error(ErrorCode::kMissingBreakdown, "per-head breakdown is required for value similarity");
  std::map<HeadKey, const Vector*> other;
  for (const auto& s : *b.breakdown) other[{s.layer_index, s.head_index}] = &s.delta_v;
  std::map<HeadKey, double> out;
  for (const auto& s : *a.breakdown) {
    const HeadKey key{s.layer_index, s.head_index};
    auto it = other.find(key);
    if (it == other.end())
      throw Error(ErrorCode::kMissingBreakdown,
                  "layer " + std::to_string(key.first) + " head " + std::to_string(key.second) + " missing");
    if (s.delta_v.size() != it->second->size()) throw Error(ErrorCode::kShapeMismatch, "head dimensions differ");
    const double na = s.delta_v.norm(), nb = it->second->norm();
    out[key] = (na == 0.0 || nb == 0.0) ? std::numeric_limits<double>::quiet_NaN()
                                         : std::clamp(s.delta_v.dot(*it->second) / (na * nb), -1.0, 1.0);
  }
  return out;
}

Vector attention_diff_map(const LatentState& z, const PromptEmbedding& c, const ConceptOffset& offset, TokenSlot m,
                          const CALayerSpec& layer, int head) {
  if (offset.delta_c.size() != layer.value.cols())
    throw Error(ErrorCode::kShapeMismatch, "offset dimension differs from layer input dimension");
  if (!m.valid()) throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + std::to_string(m.index()));
  const Matrix attn = attention_weights(z.z, c.matrix, layer, head);
  const double shift = (layer.value_head(head) * offset.delta_c).norm();
  return attn.col(m.row()).cwiseAbs() * shift;
}

void write_attention_diff_csv(const Vector& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << "latent_index,magnitude\n";
  char buf[64];
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g\n", static_cast<long>(i), map[i]);
    out << buf;
  }
}

std::string offset_to_json(const ConceptOffset& offset) {
  json j = offset_payload(offset);
  j["checksum"] = hex64(fnv1a64(j.dump()));
  return j.dump(2);
}

ConceptOffset offset_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoError, std::string("offset file is not JSON: ") + e.what());
  }
  try {
    if (j.at("schema_version").get<int>() != kOffsetSchemaVersion)
      throw Error(ErrorCode::kSchemaVersionMismatch,
                  "schema " + j.at("schema_version").dump() + ", expected " + std::to_string(kOffsetSchemaVersion));
    const std::string stored = j.at("checksum").get<std::string>();
    json payload = j;
    payload.erase("checksum");
    if (hex64(fnv1a64(payload.dump())) != stored) throw Error(ErrorCode::kChecksumMismatch, "offset file corrupted");

    ConceptOffset o;
    o.concept_name = j.at("concept").get<std::string>();
    o.direction = {j.at("direction_label").at("from").get<std::string>(),
                   j.at("direction_label").at("to").get<std::string>()};
    o.delta_c = to_vector(j.at("delta_c"));
    if (o.delta_c.size() != j.at("D_c").get<Eigen::Index>())
      throw Error(ErrorCode::kShapeMismatch, "delta_c length differs from D_c");
    if (!o.delta_c.allFinite()) throw Error(ErrorCode::kShapeMismatch, "delta_c is not finite");
    if (j.contains("breakdown")) {
      std::vector<HeadShift> rows;
      for (const auto& r : j.at("breakdown"))
        rows.push_back({r.at("layer").get<int>(), r.at("head").get<int>(), to_vector(r.at("delta_v"))});
      o.breakdown = std::move(rows);
    }
    for (const auto& p : j.at("source_prompts"))
      o.source_prompts.push_back(
          {p.at("source").get<std::string>(), p.at("target").get<std::string>(), p.at("token_index").get<int>()});
    o.steps_used = j.at("steps_used").get<int>();
    o.encoder_seed = j.at("encoder_seed").get<std::uint64_t>();
    o.model_config_hash = j.at("model_config_hash").get<std::string>();
    return o;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoError, std::string("malformed offset file: ") + e.what());
  }
}

void save_offset(const ConceptOffset& offset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  out << offset_to_json(offset) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "write failed for " + path.string());
}

ConceptOffset load_offset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return offset_from_json(buf.str());
}

}  // namespace debfilter
