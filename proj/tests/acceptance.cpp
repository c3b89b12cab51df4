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

// End-to-end acceptance checks. Prints one PASS/FAIL line per check and exits
// non-zero if any check fails.

#include "debfilter/cli.hpp"
#include "debfilter/fairness_metrics.hpp"
#include "debfilter/offset_bank.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace fs = std::filesystem;
using namespace debfilter;
using debfilter::testing::data_dir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "debfilter_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != kExitOk) std::fprintf(stderr, "cli failed (%d): %s\n", code, err.str().c_str());
  return code;
}

Outcome solver_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const ValueProblem p = debfilter::testing::random_value_problem(64, 64, 7000 + seed);
    const double closed = value_objective(p, solve_value(p).value);
    const double oracle = value_objective(p, debfilter::testing::descent_oracle(p));
    worst = std::max(worst, std::abs(closed - oracle) / std::max(std::abs(oracle), 1e-300));
  }
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-8 && elapsed < 5.0,
          "max relative objective gap " + fmt("%.2e", worst) + ", " + fmt("%.2f", elapsed) + " s"};
}

Outcome exact_recovery() {
  double value_err = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ValueProblem p = debfilter::testing::random_value_problem(64, 64, seed);
    const Vector planted = GaussianStream(seed + 900).vector(64, 2.0);
    p.residual_targets = p.coefficients * planted.transpose();
    value_err = std::max(value_err, (solve_value(p).value - planted).cwiseAbs().maxCoeff());
  }
  // Every head of the default stack, consistent estimates of one planted c.
  const auto stack = debfilter::testing::make_stack(ModelConfig{});
  std::vector<ProjectionRef> projections;
  for (const auto& layer : stack->layers)
    for (int h = 0; h < layer.num_heads; ++h) projections.emplace_back(layer.value_head(h));
  const Vector planted = GaussianStream(31).vector(stack->embedding_dim, 0.05);
  std::vector<Vector> values;
  for (const auto& w : projections) values.push_back(w * planted);
  const UnifiedResult r = ValueGram(projections, 0.0).solve(values);
  const double c_err = (r.embedding - planted).cwiseAbs().maxCoeff();
  return {value_err <= 1e-10 && c_err <= 1e-8 && r.normal_residual <= 1e-8,
          "value error " + fmt("%.2e", value_err) + ", embedding error " + fmt("%.2e", c_err) +
              ", normal residual " + fmt("%.2e", r.normal_residual)};
}

Outcome substitution_fidelity() {
  ModelConfig cfg = debfilter::testing::small_config(64, 32, 32);
  const auto stack = debfilter::testing::make_stack(cfg);
  const SyntheticEncoder enc({cfg.embedding_dim, 1, 1.0});
  const auto lex = debfilter::testing::gender_lexicon(cfg.embedding_dim);
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"a photo of a doctor", "a photo of a female doctor"},
      {"a farmer in a field", "a woman farmer in a field"},
      {"a portrait of a nurse", "a portrait of a male nurse"},
      {"an engineer at work", "a female engineer at work"},
      {"a person who works as a ceo", "a female person who works as a ceo"}};
  double worst_gain = -INFINITY;
  int instances = 0;
  for (std::uint64_t k = 0; k < 50; ++k) {
    const auto& [src_text, tgt_text] = pairs[k % pairs.size()];
    const PromptEmbedding src = enc.embed(src_text, &lex), tgt = enc.embed(tgt_text, &lex);
    const auto& layer = stack->layers[k % stack->layers.size()];
    const int head = static_cast<int>(k / 3 % layer.num_heads);
    const TokenSlot m(2 + static_cast<int>(k % src.tokens.words.size()));
    const Matrix z = GaussianStream(k).matrix(cfg.latent_token_count, cfg.latent_dim, 1.0 + 0.1 * k);
    const auto sp = project_condition(*stack, src.matrix), tp = project_condition(*stack, tgt.matrix);
    const std::size_t l = static_cast<std::size_t>(layer.layer_index - 1);
    const LayerCapture s = run_layer(z, layer, sp.keys[l], sp.values[l]);
    const LayerCapture t = run_layer(z, layer, tp.keys[l], tp.values[l]);
    const ValueEstimate est = solve_value(build_value_problem(s, t, m, head, layer.head_dim));
    Matrix v = s.values.middleCols(head * layer.head_dim, layer.head_dim);
    const Matrix target = t.output.middleCols(head * layer.head_dim, layer.head_dim);
    const double before = (s.attention[head] * v - target).norm();
    v.row(m.row()) = est.value.transpose();
    const double after = (s.attention[head] * v - target).norm();
    worst_gain = std::max(worst_gain, after - before);
    ++instances;
  }
  return {worst_gain <= 1e-10, std::to_string(instances) + " instances, max increase " + fmt("%.2e", worst_gain)};
}

Outcome offset_algebra() {
  ConceptOffset o;
  o.concept_name = "gender";
  o.delta_c = GaussianStream(5).vector(1024, 0.05);
  o.direction = {"male", "female"};
  o.model_config_hash = ModelConfig{}.hash();
  o.breakdown = std::vector<HeadShift>{{1, 0, GaussianStream(6).vector(64)}};
  const SyntheticEncoder enc({1024, 0, 1.0});
  const PromptEmbedding c = enc.embed("a doctor talks to a nurse", nullptr);
  const ApplicationPolicy there{{{TokenSlot(3), +1}, {TokenSlot(7), -1}}, 1.0, 1};
  const ApplicationPolicy back{{{TokenSlot(3), -1}, {TokenSlot(7), +1}}, 1.0, 1};
  const PromptEmbedding moved = apply_offset(c, o, there, 0, o.model_config_hash).embedding;
  const double round_trip =
      (apply_offset(moved, o, back, 0, o.model_config_hash).embedding.matrix - c.matrix).cwiseAbs().maxCoeff();
  const bool cancels = average_offsets({o, invert(o)}).delta_c == Vector::Zero(1024);
  const ConceptOffset twice = invert(invert(o));
  const bool involution = twice.delta_c == o.delta_c && twice.direction == o.direction &&
                          (*twice.breakdown)[0].delta_v == (*o.breakdown)[0].delta_v;
  const fs::path path = fs::temp_directory_path() / "debfilter_acceptance_offset.json";
  save_offset(o, path);
  const ConceptOffset loaded = load_offset(path);
  fs::remove(path);
  const bool persisted = loaded.delta_c == o.delta_c && (*loaded.breakdown)[0].delta_v == (*o.breakdown)[0].delta_v &&
                         loaded.model_config_hash == o.model_config_hash;
  return {round_trip <= 1e-12 && cancels && involution && persisted,
          "round trip " + fmt("%.1e", round_trip) + ", cancel " + (cancels ? "exact" : "inexact") + ", involution " +
              (involution ? "bitwise" : "broken") + ", save/load " + (persisted ? "bit-exact" : "lossy")};
}

// Offsets on the default stack, shared by the ratio and consistency checks.
struct StackOffsets {
  std::vector<ConceptOffset> per_prompt;
  fs::path averaged_path;
};

StackOffsets compute_stack_offsets(const fs::path& dir) {
  const ModelConfig cfg;
  const auto stack = debfilter::testing::make_stack(cfg);
  const SyntheticEncoder enc({cfg.embedding_dim, 0, 1.0});
  const OffsetEstimator est(stack, enc, load_lexicon(data_dir() / "gender_lexicon.json", cfg.embedding_dim));
  OffsetOptions opts;
  opts.seed = derive_seed(0, "compute");
  StackOffsets out;
  for (const auto& row : read_offset_prompts((data_dir() / "offset_prompts.csv").string())) {
    const TokenSlot m = resolve_token(tokenize(row.source), row.token);
    out.per_prompt.push_back(est.compute(row.source, row.target, m, opts));
  }
  out.averaged_path = dir / "offset.json";
  save_offset(average_offsets(out.per_prompt), out.averaged_path);
  return out;
}

Outcome ratio_law(const StackOffsets& offsets, const fs::path& dir) {
  const fs::path prompts = dir / "ratio_prompts.csv";
  std::ofstream(prompts) << "occupation,prompt,targets\ndoctor,a photo of a doctor,doctor\n";
  const fs::path prompts_farmer = dir / "ratio_prompts_farmer.csv";
  std::ofstream(prompts_farmer) << "occupation,prompt,targets\nfarmer,a photo of a farmer,farmer\n";
  const std::string lexicon = (data_dir() / "gender_lexicon.json").string();
  auto generate = [&](const fs::path& list, const std::string& ratio, const fs::path& out, double& elapsed) {
    const auto t0 = std::chrono::steady_clock::now();
    const int code = cli({"generate", "--lexicon", lexicon, "--prompts", list.string(), "--offset",
                          offsets.averaged_path.string(), "--ratio", ratio, "--n", "120", "--seed", "2024", "--out",
                          out.string()});
    elapsed = seconds_since(t0);
    return code == kExitOk;
  };
  double t_half = 0.0, t_two_thirds = 0.0;
  if (!generate(prompts, "0.5", dir / "half.jsonl", t_half)) return {false, "generate failed"};
  if (!generate(prompts_farmer, "0.6666666666666666", dir / "two_thirds.jsonl", t_two_thirds))
    return {false, "generate failed"};
  const FairnessReport half = build_report(read_manifest(dir / "half.jsonl"), "male", "female", 120);
  const FairnessReport thirds = build_report(read_manifest(dir / "two_thirds.jsonl"), "male", "female", 120);
  const bool fully_male = half.rows[0].f_p_before == 0.0 && thirds.rows[0].f_p_before == 0.0;
  const double ts = half.rows[0].transition.value_or(-1.0);
  const double fp = thirds.rows[0].f_p_after;
  return {fully_male && std::abs(ts - 0.5) <= 0.10 && std::abs(fp - 200.0 / 3.0) <= 5.0 && t_half < 60.0 &&
              t_two_thirds < 60.0,
          "TS(p=0.5) " + fmt("%.3f", ts) + ", F_p(p=2/3) " + fmt("%.2f", fp) + ", baseline " +
              (fully_male ? "fully male" : "mixed") + ", " + fmt("%.1f", t_half) + " s / " +
              fmt("%.1f", t_two_thirds) + " s per occupation"};
}

Outcome metric_goldens() {
  const double dp = delta_p(80.85);
  const auto records = read_manifest(data_dir() / "surgeon_manifest.jsonl");
  const double ts = transition_score(records, "male");
  const double balanced = skew({{60, 60}, {60, 60}}, 120);
  const double lopsided = skew({{100, 20}}, 120);
  return {std::abs(dp - 0.617) <= 5e-4 && std::abs(ts - 0.402) <= 1e-3 && balanced == 50.0 &&
              std::abs(lopsided - 83.33) <= 1e-2,
          "delta_p(80.85) " + fmt("%.4f", dp) + ", TS " + fmt("%.4f", ts) + ", skew " + fmt("%.0f", balanced) + " / " +
              fmt("%.2f", lopsided)};
}

Outcome cross_prompt_consistency(const StackOffsets& offsets) {
  // One offset per occupation prompt.
  std::vector<const ConceptOffset*> occupations;
  for (const auto& o : offsets.per_prompt) occupations.push_back(&o);
  double min_cos = INFINITY, min_head_share = INFINITY;
  for (std::size_t a = 0; a < occupations.size(); ++a) {
    for (std::size_t b = a + 1; b < occupations.size(); ++b) {
      min_cos = std::min(min_cos, offset_cosine(*occupations[a], *occupations[b]));
      const auto table = value_offset_similarity(*occupations[a], *occupations[b]);
      int above = 0, total = 0;
      for (const auto& [key, c] : table) {
        if (std::isnan(c)) continue;
        ++total;
        above += c > 0.7;
      }
      min_head_share = std::min(min_head_share, static_cast<double>(above) / std::max(total, 1));
    }
  }
  return {occupations.size() >= 3 && min_cos > 0.7 && min_head_share > 0.5,
          std::to_string(occupations.size()) + " occupations, min offset cosine " + fmt("%.3f", min_cos) +
              ", min share of heads above 0.7 " + fmt("%.3f", min_head_share)};
}

Outcome topology() {
  const std::vector<int> heads{5, 5, 10, 10, 20, 20, 20, 20, 20, 20, 10, 10, 10, 5, 5, 5};
  const CAStackSpec stack = CAStackSpec::build(ModelConfig{});
  bool ok = stack.layers.size() == heads.size();
  for (std::size_t l = 0; ok && l < heads.size(); ++l) {
    const auto& layer = stack.layers[l];
    ok = layer.num_heads == heads[l] && layer.head_dim == 64 && layer.value_dim() == heads[l] * 64 &&
         layer.value.rows() == heads[l] * 64 && layer.value.cols() == 1024 && layer.layer_index == int(l) + 1;
  }
  return {ok, std::to_string(stack.layers.size()) + " layers, " + std::to_string(stack.total_heads()) + " heads"};
}

Outcome locality_and_determinism(const fs::path& dir) {
  const SyntheticEncoder enc({64, 0, 1.0});
  const PromptEmbedding c = enc.embed("a doctor and a nurse and a pilot", nullptr);
  ConceptOffset o;
  o.delta_c = GaussianStream(1).vector(64);
  o.model_config_hash = "h";
  const ApplicationPolicy policy{{{TokenSlot(3), +1}, {TokenSlot(6), -1}}, 1.0, 0};
  const Matrix moved = apply_offset(c, o, policy, 0, "h").embedding.matrix;
  bool local = true;
  for (int r = 0; r < kTokenSlots; ++r)
    if (r != 2 && r != 5) local = local && moved.row(r) == c.matrix.row(r);
  local = local && moved.row(2) != c.matrix.row(2) && moved.row(5) != c.matrix.row(5);

  const std::string model = (data_dir() / "model_small.json").string();
  const std::string lexicon = (data_dir() / "gender_lexicon.json").string();
  const fs::path prompts = dir / "pipeline_prompts.csv";
  std::ofstream(prompts) << "occupation,prompt,targets\ndoctor,a photo of a doctor,doctor\n"
                            "pair,a doctor and a nurse,doctor:+1;nurse:-1\n";
  std::vector<std::string> manifests;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = dir / ("pipeline_" + std::to_string(run));
    fs::create_directories(out);
    if (cli({"compute", "--model", model, "--lexicon", lexicon, "--prompts",
             (data_dir() / "offset_prompts.csv").string(), "--steps", "4", "--seed", "3", "--out",
             (out / "offset.json").string()}) != kExitOk ||
        cli({"generate", "--model", model, "--lexicon", lexicon, "--prompts", prompts.string(), "--offset",
             (out / "offset.json").string(), "--ratio", "0.5", "--n", "40", "--steps", "4", "--seed", "3", "--out",
             (out / "manifest.jsonl").string()}) != kExitOk)
      return {false, "pipeline run failed"};
    manifests.push_back(slurp(out / "manifest.jsonl"));
  }
  const bool identical = !manifests[0].empty() && manifests[0] == manifests[1];
  return {local && identical, std::string("untargeted rows ") + (local ? "bit-identical" : "modified") +
                                  ", manifests " + (identical ? "byte-identical" : "differ")};
}

}  // namespace

int main() {
  const fs::path dir = work_dir();
  int failures = 0;
  auto report = [&](const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s  %-28s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };

  report("solver oracle equivalence", solver_oracle);
  report("exact recovery", exact_recovery);
  report("substitution fidelity", substitution_fidelity);
  report("offset algebra", offset_algebra);

  std::optional<StackOffsets> offsets;
  std::string offsets_error;
  try {
    offsets = compute_stack_offsets(dir);
  } catch (const std::exception& e) {
    offsets_error = e.what();
  }
  report("ratio law", [&]() -> Outcome {
    if (!offsets) return {false, "offset computation failed: " + offsets_error};
    return ratio_law(*offsets, dir);
  });
  report("metric golden values", metric_goldens);
  report("cross-prompt consistency", [&]() -> Outcome {
    if (!offsets) return {false, "offset computation failed: " + offsets_error};
    return cross_prompt_consistency(*offsets);
  });
  report("topology conformance", topology);
  report("locality and determinism", [&] { return locality_and_determinism(dir); });

  fs::remove_all(dir);
  std::printf("%d of 9 checks failed\n", failures);
  return failures == 0 ? 0 : 1;
}
