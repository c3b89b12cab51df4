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
#include "debfilter/synth_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace debfilter {

// Linear-in-t cumulative signal schedule: alpha_bar(0) = alpha_bar_first,
// alpha_bar(num_timesteps - 1) = alpha_bar_last.
struct Schedule {
  int num_timesteps = 1000;
  double alpha_bar_first = 0.9999;
  double alpha_bar_last = 0.0047;

  double alpha_bar(int t) const;
  void validate() const;
};

struct LayerShape {
  int num_heads = 0;
  int head_dim = 64;
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

inline constexpr std::string_view kDefaultTopologyName = "sd21-default";

// The 16 cross-attention sites of the SD 2.1 denoising U-Net.
std::vector<LayerShape> sd21_topology();

struct ModelConfig {
  std::string topology_name = std::string(kDefaultTopologyName);
  std::vector<LayerShape> topology = sd21_topology();
  int latent_dim = 64;
  int embedding_dim = 1024;
  int latent_token_count = 64;
  std::uint64_t init_seed = 0;
  Schedule schedule;
  double key_gain = 1.0;
  double output_gain = 1.0;

  void validate() const;
  // Key-sorted JSON with every field spelled out; hashing input for provenance.
  std::string canonical_json() const;
  std::string hash() const;
};

ModelConfig parse_model_config(std::string_view json_text);
ModelConfig load_model_config(const std::filesystem::path& path);

// One cross-attention layer. Per-head projections are stacked row blocks of
// head_dim rows each; head h owns rows [h*head_dim, (h+1)*head_dim).
struct CALayerSpec {
  int layer_index = 0;  // 1-based
  int num_heads = 0;
  int head_dim = 0;
  Matrix query;   // (num_heads*head_dim) x latent_dim
  Matrix key;     // (num_heads*head_dim) x embedding_dim
  Matrix value;   // (num_heads*head_dim) x embedding_dim
  Matrix output;  // latent_dim x (num_heads*head_dim)

  int value_dim() const { return num_heads * head_dim; }
  auto query_head(int h) const { return query.middleRows(h * head_dim, head_dim); }
  auto key_head(int h) const { return key.middleRows(h * head_dim, head_dim); }
  auto value_head(int h) const { return value.middleRows(h * head_dim, head_dim); }
  void validate(int latent_dim, int embedding_dim) const;
};

struct CAStackSpec {
  std::vector<CALayerSpec> layers;
  int latent_token_count = 0;
  int latent_dim = 0;
  int embedding_dim = 0;
  std::uint64_t init_seed = 0;
  Schedule schedule;
  std::string config_hash;

  static CAStackSpec build(const ModelConfig& config);
  int total_heads() const;
  std::vector<LayerShape> topology() const;
};

struct LatentState {
  Matrix z;  // latent_token_count x latent_dim
  int t = 0;
  double alpha_bar = 1.0;
};

struct AttentionOptions {
  // Restricts the softmax to these slots; others get zero weight.
  std::optional<SlotRange> window;
};

// Keys and values of one conditioning matrix for every layer,
// each kTokenSlots x value_dim. They do not depend on the latent.
struct ConditionProjection {
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
};

ConditionProjection project_condition(const CAStackSpec& stack, const Matrix& condition);

/// Softmax over the 77 token slots of (W_q z)(W_k c)^T / sqrt(head_dim).
/// Returns latent_token_count x kTokenSlots.
Matrix attention_weights(const Matrix& z, const Matrix& condition, const CALayerSpec& layer, int head,
                         const AttentionOptions& options = {});

struct HeadOutput {
  Matrix attention;  // latent_token_count x kTokenSlots
  Matrix values;     // kTokenSlots x head_dim
  Matrix output;     // latent_token_count x head_dim
};

std::vector<HeadOutput> cross_attention_forward(const Matrix& z, const Matrix& condition, const CALayerSpec& layer,
                                                const AttentionOptions& options = {});

// Everything the value solver needs from one layer at one latent state.
struct LayerCapture {
  int layer_index = 0;
  Matrix input;                   // layer input, latent_token_count x latent_dim
  std::vector<Matrix> attention;  // per head, latent_token_count x kTokenSlots
  Matrix values;                  // kTokenSlots x value_dim
  Matrix output;                  // latent_token_count x value_dim (concatenated heads)
};

// Runs one layer against an already projected conditioning.
LayerCapture run_layer(const Matrix& input, const CALayerSpec& layer, const Matrix& keys, const Matrix& values,
                       const AttentionOptions& options = {}, const std::vector<Matrix>* frozen_attention = nullptr);

struct EpsilonOptions {
  AttentionOptions attention;
  // layer -> head -> attention map; replaces the softmax when set.
  const std::vector<std::vector<Matrix>>* frozen_attention = nullptr;
  std::vector<LayerCapture>* capture = nullptr;
};

Matrix cfg_combine(const Matrix& eps_cond, const Matrix& eps_uncond, double guidance);

Matrix noise_sample(int rows, int cols, std::uint64_t seed);
LatentState noise_latent(const Matrix& z0, int t, const Schedule& schedule, std::uint64_t noise_seed);
Matrix score_from_epsilon(const Matrix& eps, double alpha_bar);

// DDIM timesteps from num_timesteps-1 down to 0.
std::vector<int> ddim_timesteps(const Schedule& schedule, int steps);

struct StepCapture {
  int step = 0;  // 0-based sampling step
  LatentState state;
  std::vector<LayerCapture> layers;
};

struct CaptureRecorder {
  int max_steps = 2;
  std::vector<StepCapture> steps;
};

struct GenerateOptions {
  int steps = 10;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  // When set, steps outside [filter_first_step, filter_last_step] use this
  // conditioning instead of the one passed to generate().
  const ConditionProjection* unfiltered = nullptr;
  int filter_first_step = 0;
  int filter_last_step = -1;  // -1: through the last step
};

struct Trajectory {
  std::vector<LatentState> states;  // latent entering each sampling step
  Matrix final_latent;              // z_0 estimate after the last step
};

// Toy epsilon-predictor: the stack of cross-attention layers chained through a
// residual stream. The prediction is the sum of all residual updates, so it is
// linear in the cross-attention outputs. The unconditional branch conditions
// on the all-padding embedding.
class ToyDenoiser {
 public:
  ToyDenoiser(std::shared_ptr<const CAStackSpec> stack, Matrix null_condition);

  const CAStackSpec& stack() const { return *stack_; }
  const Matrix& null_condition() const { return null_condition_; }
  const ConditionProjection& null_projection() const { return null_projection_; }

  ConditionProjection project(const Matrix& condition) const { return project_condition(*stack_, condition); }

  // condition == nullptr selects the unconditional branch.
  Matrix epsilon(const Matrix& z, const Matrix* condition, const EpsilonOptions& options = {}) const;
  Matrix epsilon(const Matrix& z, const ConditionProjection& projection, const EpsilonOptions& options = {}) const;

  Trajectory generate(const ConditionProjection& condition, const GenerateOptions& options,
                      CaptureRecorder* recorder = nullptr) const;
  Trajectory generate(const Matrix& condition, const GenerateOptions& options,
                      CaptureRecorder* recorder = nullptr) const {
    return generate(project(condition), options, recorder);
  }

 private:
  std::shared_ptr<const CAStackSpec> stack_;
  Matrix null_condition_;
  ConditionProjection null_projection_;
};

}  // namespace debfilter
