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

#include "debfilter/attention_stack.hpp"

#include "debfilter/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace debfilter {

namespace {

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols)
    throw Error(ErrorCode::kShapeMismatch, std::string(what) + " is " + std::to_string(m.rows()) + "x" +
                                               std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                                               "x" + std::to_string(cols));
}

// Row-wise softmax in place, optionally restricted to a column window.
void softmax_rows(Matrix& logits, const std::optional<SlotRange>& window) {
  const Eigen::Index first = window ? window->first.row() : 0;
  const Eigen::Index count = window ? window->size() : logits.cols();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto active = logits.row(i).segment(first, count);
    const double peak = active.maxCoeff();
    active = (active.array() - peak).exp();
    active /= active.sum();
    if (window) {
      logits.row(i).head(first).setZero();
      logits.row(i).tail(logits.cols() - first - count).setZero();
    }
  }
}

void check_window(const std::optional<SlotRange>& window) {
  if (window && (!window->first.valid() || !window->last.valid() || window->last < window->first))
    throw Error(ErrorCode::kShapeMismatch, "attention window outside the 77-slot layout");
}

Matrix head_attention(const Matrix& queries, const Matrix& keys, int head_dim, const AttentionOptions& options) {
  Matrix logits = queries * keys.transpose();
  logits /= std::sqrt(static_cast<double>(head_dim));
  softmax_rows(logits, options.window);
  return logits;
}

constexpr std::uint64_t kQueryKind = 1, kKeyKind = 2, kValueKind = 3, kOutputKind = 4;

}  // namespace

double Schedule::alpha_bar(int t) const {
  if (t < 0 || t >= num_timesteps)
    throw Error(ErrorCode::kInvalidTimestep,
                "t=" + std::to_string(t) + " outside [0, " + std::to_string(num_timesteps) + ")");
  if (num_timesteps == 1) return alpha_bar_first;
  const double frac = static_cast<double>(t) / static_cast<double>(num_timesteps - 1);
  return alpha_bar_first + (alpha_bar_last - alpha_bar_first) * frac;
}

void Schedule::validate() const {
  if (num_timesteps < 2) throw Error(ErrorCode::kConfigError, "schedule needs at least 2 timesteps");
  if (!(alpha_bar_first <= 1.0 && alpha_bar_last > 0.0 && alpha_bar_first > alpha_bar_last))
    throw Error(ErrorCode::kConfigError, "schedule needs 1 >= alpha_bar_first > alpha_bar_last > 0");
}

std::vector<LayerShape> sd21_topology() {
  const int heads[] = {5, 5, 10, 10, 20, 20, 20, 20, 20, 20, 10, 10, 10, 5, 5, 5};
  std::vector<LayerShape> out;
  for (int h : heads) out.push_back({h, 64});
  return out;
}

void ModelConfig::validate() const {
  if (topology.empty()) throw Error(ErrorCode::kConfigError, "topology has no layers");
  for (const auto& s : topology)
    if (s.num_heads <= 0 || s.head_dim <= 0) throw Error(ErrorCode::kConfigError, "non-positive head shape");
  if (latent_dim <= 0 || embedding_dim <= 0 || latent_token_count <= 0)
    throw Error(ErrorCode::kConfigError, "dimensions must be positive");
  if (!(key_gain >= 0.0) || !(output_gain >= 0.0)) throw Error(ErrorCode::kConfigError, "gains must be >= 0");
  schedule.validate();
}

std::string ModelConfig::canonical_json() const {
  nlohmann::json j;
  nlohmann::json topo = nlohmann::json::array();
  for (const auto& s : topology) topo.push_back({{"head_dim", s.head_dim}, {"num_heads", s.num_heads}});
  j["topology"] = topo;
  j["latent_dim"] = latent_dim;
  j["embedding_dim"] = embedding_dim;
  j["latent_token_count"] = latent_token_count;
  j["init_seed"] = init_seed;
  j["key_gain"] = key_gain;
  j["output_gain"] = output_gain;
  j["schedule"] = {{"num_timesteps", schedule.num_timesteps},
                   {"alpha_bar_first", schedule.alpha_bar_first},
                   {"alpha_bar_last", schedule.alpha_bar_last}};
  return j.dump();
}

std::string ModelConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_json())));
  return buf;
}

ModelConfig parse_model_config(std::string_view json_text) {
  ModelConfig cfg;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.contains("topology")) {
      const auto& t = j.at("topology");
      if (t.is_string()) {
        if (t.get<std::string>() != kDefaultTopologyName)
          throw Error(ErrorCode::kConfigError, "unknown topology alias '" + t.get<std::string>() + "'");
      } else {
        cfg.topology_name = "custom";
        cfg.topology.clear();
        for (const auto& layer : t)
          cfg.topology.push_back({layer.at("num_heads").get<int>(), layer.value("head_dim", 64)});
      }
    }
    cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
    cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
    cfg.latent_token_count = j.value("latent_token_count", cfg.latent_token_count);
    cfg.init_seed = j.value("init_seed", cfg.init_seed);
    cfg.key_gain = j.value("key_gain", cfg.key_gain);
    cfg.output_gain = j.value("output_gain", cfg.output_gain);
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      cfg.schedule.num_timesteps = s.value("num_timesteps", cfg.schedule.num_timesteps);
      cfg.schedule.alpha_bar_first = s.value("alpha_bar_first", cfg.schedule.alpha_bar_first);
      cfg.schedule.alpha_bar_last = s.value("alpha_bar_last", cfg.schedule.alpha_bar_last);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigError, std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfigError, "cannot open model config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model_config(buf.str());
}

void CALayerSpec::validate(int latent_dim, int embedding_dim) const {
  require_shape(query, value_dim(), latent_dim, "W_q");
  require_shape(key, value_dim(), embedding_dim, "W_k");
  require_shape(value, value_dim(), embedding_dim, "W_v");
  require_shape(output, latent_dim, value_dim(), "W_out");
  if (!query.allFinite() || !key.allFinite() || !value.allFinite() || !output.allFinite())
    throw Error(ErrorCode::kShapeMismatch, "layer " + std::to_string(layer_index) + " has non-finite weights");
}

CAStackSpec CAStackSpec::build(const ModelConfig& config) {
  config.validate();
  CAStackSpec stack;
  stack.latent_token_count = config.latent_token_count;
  stack.latent_dim = config.latent_dim;
  stack.embedding_dim = config.embedding_dim;
  stack.init_seed = config.init_seed;
  stack.schedule = config.schedule;
  stack.config_hash = config.hash();
  const double q_std = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
  const double v_std = 1.0 / std::sqrt(static_cast<double>(config.embedding_dim));
  for (std::size_t l = 0; l < config.topology.size(); ++l) {
    const auto& shape = config.topology[l];
    CALayerSpec layer;
    layer.layer_index = static_cast<int>(l) + 1;
    layer.num_heads = shape.num_heads;
    layer.head_dim = shape.head_dim;
    const int vd = layer.value_dim();
    auto stream = [&](std::uint64_t kind) { return GaussianStream(derive_seed({config.init_seed, l, kind})); };
    layer.query = stream(kQueryKind).matrix(vd, config.latent_dim, q_std);
    layer.key = stream(kKeyKind).matrix(vd, config.embedding_dim, config.key_gain);
    layer.value = stream(kValueKind).matrix(vd, config.embedding_dim, v_std);
    layer.output = stream(kOutputKind).matrix(config.latent_dim, vd, config.output_gain / std::sqrt(double(vd)));
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

int CAStackSpec::total_heads() const {
  int n = 0;
  for (const auto& l : layers) n += l.num_heads;
  return n;
}

std::vector<LayerShape> CAStackSpec::topology() const {
  std::vector<LayerShape> out;
  for (const auto& l : layers) out.push_back({l.num_heads, l.head_dim});
  return out;
}

ConditionProjection project_condition(const CAStackSpec& stack, const Matrix& condition) {
  require_shape(condition, kTokenSlots, stack.embedding_dim, "conditioning");
  ConditionProjection out;
  out.keys.reserve(stack.layers.size());
  out.values.reserve(stack.layers.size());
  for (const auto& layer : stack.layers) {
    out.keys.push_back(condition * layer.key.transpose());
    out.values.push_back(condition * layer.value.transpose());
  }
  return out;
}

Matrix attention_weights(const Matrix& z, const Matrix& condition, const CALayerSpec& layer, int head,
                         const AttentionOptions& options) {
  if (head < 0 || head >= layer.num_heads) throw Error(ErrorCode::kShapeMismatch, "head index out of range");
  require_shape(z, z.rows(), layer.query.cols(), "latent");
  require_shape(condition, kTokenSlots, layer.key.cols(), "conditioning");
  check_window(options.window);
  const Matrix queries = z * layer.query_head(head).transpose();
  const Matrix keys = condition * layer.key_head(head).transpose();
  return head_attention(queries, keys, layer.head_dim, options);
}

std::vector<HeadOutput> cross_attention_forward(const Matrix& z, const Matrix& condition, const CALayerSpec& layer,
                                                const AttentionOptions& options) {
  require_shape(z, z.rows(), layer.query.cols(), "latent");
  require_shape(condition, kTokenSlots, layer.key.cols(), "conditioning");
  check_window(options.window);
  std::vector<HeadOutput> out;
  out.reserve(layer.num_heads);
  for (int h = 0; h < layer.num_heads; ++h) {
    HeadOutput head;
    const Matrix queries = z * layer.query_head(h).transpose();
    const Matrix keys = condition * layer.key_head(h).transpose();
    head.attention = head_attention(queries, keys, layer.head_dim, options);
    head.values = condition * layer.value_head(h).transpose();
    head.output = head.attention * head.values;
    out.push_back(std::move(head));
  }
  return out;
}

LayerCapture run_layer(const Matrix& input, const CALayerSpec& layer, const Matrix& keys, const Matrix& values,
                       const AttentionOptions& options, const std::vector<Matrix>* frozen_attention) {
  require_shape(input, input.rows(), layer.query.cols(), "layer input");
  require_shape(keys, kTokenSlots, layer.value_dim(), "projected keys");
  require_shape(values, kTokenSlots, layer.value_dim(), "projected values");
  check_window(options.window);
  if (frozen_attention && static_cast<int>(frozen_attention->size()) != layer.num_heads)
    throw Error(ErrorCode::kShapeMismatch, "frozen attention has wrong head count");
  LayerCapture cap;
  cap.layer_index = layer.layer_index;
  cap.input = input;
  cap.values = values;
  cap.output.resize(input.rows(), layer.value_dim());
  cap.attention.reserve(layer.num_heads);
  const Matrix queries = input * layer.query.transpose();
  const int hd = layer.head_dim;
  for (int h = 0; h < layer.num_heads; ++h) {
    Matrix a;
    if (frozen_attention) {
      a = (*frozen_attention)[h];
      require_shape(a, input.rows(), kTokenSlots, "frozen attention map");
    } else {
      a = head_attention(queries.middleCols(h * hd, hd), keys.middleCols(h * hd, hd), hd, options);
    }
    cap.output.middleCols(h * hd, hd).noalias() = a * values.middleCols(h * hd, hd);
    cap.attention.push_back(std::move(a));
  }
  return cap;
}

Matrix cfg_combine(const Matrix& eps_cond, const Matrix& eps_uncond, double guidance) {
  if (eps_cond.rows() != eps_uncond.rows() || eps_cond.cols() != eps_uncond.cols())
    throw Error(ErrorCode::kShapeMismatch, "conditional and unconditional predictions differ in shape");
  return (1.0 + guidance) * eps_cond - guidance * eps_uncond;
}

Matrix noise_sample(int rows, int cols, std::uint64_t seed) {
  return GaussianStream(derive_seed(seed, "noise")).matrix(rows, cols);
}

LatentState noise_latent(const Matrix& z0, int t, const Schedule& schedule, std::uint64_t noise_seed) {
  const double ab = schedule.alpha_bar(t);
  const Matrix eps = noise_sample(static_cast<int>(z0.rows()), static_cast<int>(z0.cols()), noise_seed);
  LatentState out;
  out.t = t;
  out.alpha_bar = ab;
  out.z = std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
  return out;
}

Matrix score_from_epsilon(const Matrix& eps, double alpha_bar) {
  if (!(alpha_bar < 1.0)) throw Error(ErrorCode::kDegenerateAlphaBar, "alpha_bar must be < 1");
  return -eps / std::sqrt(1.0 - alpha_bar);
}

std::vector<int> ddim_timesteps(const Schedule& schedule, int steps) {
  if (steps < 2) throw Error(ErrorCode::kInvalidSteps, "need at least 2 sampling steps, got " + std::to_string(steps));
  const int last = schedule.num_timesteps - 1;
  if (steps > schedule.num_timesteps)
    throw Error(ErrorCode::kInvalidSteps, "more sampling steps than schedule timesteps");
  std::vector<int> out;
  out.reserve(steps);
  for (int k = 0; k < steps; ++k) {
    const long long done = static_cast<long long>(k) * last / (steps - 1);
    out.push_back(last - static_cast<int>(done));
  }
  return out;
}

ToyDenoiser::ToyDenoiser(std::shared_ptr<const CAStackSpec> stack, Matrix null_condition)
    : stack_(std::move(stack)), null_condition_(std::move(null_condition)) {
  null_projection_ = project_condition(*stack_, null_condition_);
}

Matrix ToyDenoiser::epsilon(const Matrix& z, const Matrix* condition, const EpsilonOptions& options) const {
  if (!condition) return epsilon(z, null_projection_, options);
  return epsilon(z, project(*condition), options);
}

Matrix ToyDenoiser::epsilon(const Matrix& z, const ConditionProjection& projection,
                            const EpsilonOptions& options) const {
  const auto& stack = *stack_;
  require_shape(z, stack.latent_token_count, stack.latent_dim, "latent");
  if (projection.keys.size() != stack.layers.size())
    throw Error(ErrorCode::kShapeMismatch, "projection built for a different stack");
  if (options.frozen_attention && options.frozen_attention->size() != stack.layers.size())
    throw Error(ErrorCode::kShapeMismatch, "frozen attention has wrong layer count");
  Matrix residual = z;
  Matrix eps = Matrix::Zero(z.rows(), z.cols());
  if (!options.capture && !options.frozen_attention) {
    check_window(options.attention.window);
    Matrix out, update;
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
      const auto& layer = stack.layers[l];
      const int hd = layer.head_dim;
      const Matrix queries = residual * layer.query.transpose();
      out.resize(residual.rows(), layer.value_dim());
      for (int h = 0; h < layer.num_heads; ++h) {
        const Matrix a = head_attention(queries.middleCols(h * hd, hd), projection.keys[l].middleCols(h * hd, hd), hd,
                                        options.attention);
        out.middleCols(h * hd, hd).noalias() = a * projection.values[l].middleCols(h * hd, hd);
      }
      update.noalias() = out * layer.output.transpose();
      residual += update;
      eps += update;
    }
    return eps;
  }
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto& layer = stack.layers[l];
    LayerCapture cap = run_layer(residual, layer, projection.keys[l], projection.values[l], options.attention,
                                 options.frozen_attention ? &(*options.frozen_attention)[l] : nullptr);
    const Matrix update = cap.output * layer.output.transpose();
    residual += update;
    eps += update;
    if (options.capture) options.capture->push_back(std::move(cap));
  }
  return eps;
}

Trajectory ToyDenoiser::generate(const ConditionProjection& condition, const GenerateOptions& options,
                                 CaptureRecorder* recorder) const {
  const auto& stack = *stack_;
  const std::vector<int> timesteps = ddim_timesteps(stack.schedule, options.steps);
  Trajectory traj;
  Matrix z = noise_sample(stack.latent_token_count, stack.latent_dim, derive_seed(options.seed, "z_T"));
  const int last_filtered = options.filter_last_step < 0 ? options.steps - 1 : options.filter_last_step;
  for (int k = 0; k < options.steps; ++k) {
    const int t = timesteps[k];
    const double ab = stack.schedule.alpha_bar(t);
    traj.states.push_back({z, t, ab});

    const bool filtered = k >= options.filter_first_step && k <= last_filtered;
    const ConditionProjection& cond = (!filtered && options.unfiltered) ? *options.unfiltered : condition;

    EpsilonOptions eo;
    StepCapture* step_capture = nullptr;
    if (recorder && k < recorder->max_steps) {
      recorder->steps.push_back({k, {z, t, ab}, {}});
      step_capture = &recorder->steps.back();
      eo.capture = &step_capture->layers;
    }
    const Matrix eps_cond = epsilon(z, cond, eo);
    const Matrix eps_uncond = epsilon(z, null_projection_);
    const Matrix eps = cfg_combine(eps_cond, eps_uncond, options.guidance);

    const Matrix z0_pred = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (k + 1 < options.steps) {
      const double ab_next = stack.schedule.alpha_bar(timesteps[k + 1]);
      z = std::sqrt(ab_next) * z0_pred + std::sqrt(1.0 - ab_next) * eps;
    } else {
      traj.final_latent = z0_pred;
    }
  }
  return traj;
}

}  // namespace debfilter
