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

#include "debfilter/cli.hpp"

#include "debfilter/attention_stack.hpp"
#include "debfilter/fairness_metrics.hpp"
#include "debfilter/rng.hpp"
#include "debfilter/synth_encoder.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace debfilter {

namespace fs = std::filesystem;

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const std::string& path) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::kConfigError, path + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfigError, "cannot open " + path);
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty() || line.front() == '#') continue;
    if (t.header.empty()) {
      t.header = split(line, ',');
      continue;
    }
    auto fields = split(line, ',');
    if (fields.size() != t.header.size())
      throw Error(ErrorCode::kConfigError, path + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                                               std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw Error(ErrorCode::kConfigError, path + ": empty prompt list");
  return t;
}

std::string default_out_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? env : ".";
}

// --out may name a file or a directory; directories get `file_name` appended.
fs::path output_file(const std::string& out, const std::string& file_name) {
  fs::path p = out.empty() ? fs::path(default_out_dir()) : fs::path(out);
  if (fs::is_directory(p) || (!out.empty() && out.back() == '/') || out.empty()) {
    fs::create_directories(p);
    return p / file_name;
  }
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

fs::path output_dir(const std::string& out) {
  fs::path p = out.empty() ? fs::path(default_out_dir()) : fs::path(out);
  fs::create_directories(p);
  return p;
}

struct ModelOptions {
  std::string model_path;
  std::string lexicon_path;
  std::uint64_t encoder_seed = 0;
  double beta = 1.0;
};

ModelConfig load_config(const ModelOptions& o) {
  return o.model_path.empty() ? ModelConfig{} : load_model_config(o.model_path);
}

AttributeLexicon load_required_lexicon(const ModelOptions& o, int dim) {
  if (o.lexicon_path.empty()) throw Error(ErrorCode::kConfigError, "--lexicon is required");
  return load_lexicon(o.lexicon_path, dim);
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void print_cosine_table(const std::vector<ConceptOffset>& offsets, const std::vector<std::string>& names,
                        std::ostream& out) {
  out << std::left << std::setw(12) << "cosine";
  for (const auto& n : names) out << std::setw(12) << n;
  out << '\n';
  for (std::size_t a = 0; a < offsets.size(); ++a) {
    out << std::setw(12) << names[a];
    for (std::size_t b = 0; b < offsets.size(); ++b) out << std::setw(12) << fmt(offset_cosine(offsets[a], offsets[b]), "%.4f");
    out << '\n';
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  f << text;
}

// --- compute ---------------------------------------------------------------

struct ComputeArgs {
  ModelOptions model;
  std::string prompts;
  std::string out;
  int steps = 10;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  std::optional<double> ridge;
};

int cmd_compute(const ComputeArgs& a, std::ostream& out) {
  const auto rows = read_offset_prompts(a.prompts);
  const ModelConfig cfg = load_config(a.model);
  auto stack = std::make_shared<const CAStackSpec>(CAStackSpec::build(cfg));
  SyntheticEncoder encoder({cfg.embedding_dim, a.model.encoder_seed, a.model.beta});
  OffsetEstimator estimator(stack, encoder, load_required_lexicon(a.model, cfg.embedding_dim), a.ridge);

  OffsetOptions opts;
  opts.sampling_steps = a.steps;
  opts.guidance = a.guidance;
  // Every prompt pair sees the same initial latent.
  opts.seed = derive_seed(a.seed, "compute");

  std::vector<ConceptOffset> offsets;
  std::vector<std::string> names;
  for (const auto& row : rows) {
    const TokenizedPrompt tokens = tokenize(row.source);
    const TokenSlot m = resolve_token(tokens, row.token);
    offsets.push_back(estimator.compute(row.source, row.target, m, opts));
    names.push_back(std::string(tokens.token_text(m)));
    out << "offset " << offsets.size() << " [" << names.back() << " @ slot " << m.index()
        << "] norm=" << fmt(offsets.back().delta_c.norm()) << '\n';
  }
  print_cosine_table(offsets, names, out);
  const ConceptOffset averaged = average_offsets(offsets);
  const fs::path path = output_file(a.out, "offset.json");
  save_offset(averaged, path);
  out << "averaged offset (" << averaged.direction.from_pole << " -> " << averaged.direction.to_pole
      << ") norm=" << fmt(averaged.delta_c.norm()) << " written to " << path.string() << '\n';
  return kExitOk;
}

// --- average / invert ------------------------------------------------------

int cmd_average(const std::vector<std::string>& inputs, const std::string& out_path, std::ostream& out) {
  std::vector<ConceptOffset> offsets;
  for (const auto& p : inputs) offsets.push_back(load_offset(p));
  const ConceptOffset averaged = average_offsets(offsets);
  const fs::path path = output_file(out_path, "offset_average.json");
  save_offset(averaged, path);
  out << "averaged " << offsets.size() << " offsets, norm=" << fmt(averaged.delta_c.norm()) << " -> " << path.string()
      << '\n';
  return kExitOk;
}

int cmd_invert(const std::string& input, const std::string& out_path, std::ostream& out) {
  const ConceptOffset inverted = invert(load_offset(input));
  const fs::path path = output_file(out_path, "offset_inverted.json");
  save_offset(inverted, path);
  out << "inverted offset (" << inverted.direction.from_pole << " -> " << inverted.direction.to_pole << ") -> "
      << path.string() << '\n';
  return kExitOk;
}

// --- generate --------------------------------------------------------------

struct GenerateArgs {
  ModelOptions model;
  std::string prompts;
  std::string offset;
  std::string out;
  double ratio = 0.5;
  int n = 120;
  int steps = 10;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  std::string active_steps;
  unsigned threads = 0;
};

std::pair<int, int> parse_step_range(const std::string& s) {
  if (s.empty()) return {0, -1};
  const auto parts = split(s, ':');
  try {
    if (parts.size() == 2) return {std::stoi(parts[0]), parts[1].empty() ? -1 : std::stoi(parts[1])};
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kConfigError, "--active-steps expects FIRST:LAST, got '" + s + "'");
}

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  if (a.n < 1) throw Error(ErrorCode::kConfigError, "--n must be >= 1");
  if (a.steps < 2) throw Error(ErrorCode::kConfigError, "--steps must be >= 2");
  if (!(a.ratio >= 0.0 && a.ratio <= 1.0)) throw Error(ErrorCode::kConfigError, "--ratio must lie in [0, 1]");
  const auto rows = read_generation_prompts(a.prompts);
  const ModelConfig cfg = load_config(a.model);
  const AttributeLexicon lexicon = load_required_lexicon(a.model, cfg.embedding_dim);
  std::optional<ConceptOffset> offset;
  if (!a.offset.empty()) {
    offset = load_offset(a.offset);
    // Fail before any sample runs.
    if (offset->model_config_hash != cfg.hash())
      throw Error(ErrorCode::kProvenanceMismatch,
                  "offset built for model " + offset->model_config_hash + ", config hashes to " + cfg.hash());
    if (offset->encoder_seed != a.model.encoder_seed)
      throw Error(ErrorCode::kProvenanceMismatch, "offset built with a different encoder seed");
  }
  const auto [first_step, last_step] = parse_step_range(a.active_steps);

  auto stack = std::make_shared<const CAStackSpec>(CAStackSpec::build(cfg));
  SyntheticEncoder encoder({cfg.embedding_dim, a.model.encoder_seed, a.model.beta});
  ToyDenoiser denoiser(stack, encoder.null_condition());

  const fs::path path = output_file(a.out, "manifest.jsonl");
  std::ofstream manifest(path);
  if (!manifest) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  const unsigned threads = a.threads ? a.threads : std::max(1u, std::thread::hardware_concurrency());

  for (const auto& row : rows) {
    const PromptEmbedding base = encoder.embed(row.prompt, &lexicon);
    ApplicationPolicy policy;
    policy.ratio = offset ? a.ratio : 0.0;
    policy.rng_seed = derive_seed(a.seed, "generate/ratio/" + row.occupation);
    for (const auto& [word, sign] : row.targets) policy.targets.push_back({resolve_token(base.tokens, word), sign});
    if (policy.targets.empty()) throw Error(ErrorCode::kConfigError, "no targets for occupation " + row.occupation);
    const TokenSlot probe = policy.targets.front().slot;
    const Readout before = attribute_readout(base.row(probe).transpose(), lexicon);

    // Only two conditionings occur per occupation: filtered or not.
    const ConditionProjection base_proj = denoiser.project(base.matrix);
    std::optional<PromptEmbedding> filtered;
    std::optional<ConditionProjection> filtered_proj;
    std::optional<Readout> after_filtered;
    if (offset) {
      ApplicationPolicy always = policy;
      always.ratio = 1.0;
      filtered = apply_offset(base, *offset, always, 0, stack->config_hash).embedding;
      filtered_proj = denoiser.project(filtered->matrix);
      after_filtered = attribute_readout(filtered->row(probe).transpose(), lexicon);
    }
    const std::uint64_t sample_seed_base = derive_seed(a.seed, "generate/sample/" + row.occupation);

    auto run_sample = [&](int i) {
      GenerationRecord rec;
      rec.occupation = row.occupation;
      rec.sample_index = i;
      rec.label_before = lexicon.label(before.pole);
      const bool applied = offset && apply_offset(base, *offset, policy, static_cast<std::uint64_t>(i),
                                                  stack->config_hash).applied;
      rec.applied = applied;
      rec.label_after = applied ? lexicon.label(after_filtered->pole) : rec.label_before;
      GenerateOptions gen;
      gen.steps = a.steps;
      gen.guidance = a.guidance;
      gen.seed = derive_seed({sample_seed_base, static_cast<std::uint64_t>(i)});
      gen.filter_first_step = first_step;
      gen.filter_last_step = last_step;
      gen.unfiltered = applied ? &base_proj : nullptr;
      const Trajectory traj = denoiser.generate(applied ? *filtered_proj : base_proj, gen);
      rec.latent_norm = traj.final_latent.norm();
      return rec;
    };

    // Samples are computed in parallel batches and written in index order.
    std::size_t applied_count = 0;
    for (int start = 0; start < a.n; start += static_cast<int>(threads)) {
      const int stop = std::min(a.n, start + static_cast<int>(threads));
      std::vector<std::future<GenerationRecord>> batch;
      for (int i = start; i < stop; ++i)
        batch.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred, run_sample, i));
      for (auto& f : batch) {
        const GenerationRecord rec = f.get();
        applied_count += rec.applied;
        manifest << record_to_jsonl(rec) << '\n';
      }
    }
    out << row.occupation << ": " << a.n << " samples, " << applied_count << " filtered, baseline label "
        << lexicon.label(before.pole) << '\n';
  }
  out << "manifest written to " << path.string() << '\n';
  return kExitOk;
}

// --- metrics ---------------------------------------------------------------

struct MetricsArgs {
  std::vector<std::string> manifests;
  std::string poles;
  ModelOptions model;
  long generations = 0;
  std::string out;
};

int cmd_metrics(const MetricsArgs& a, std::ostream& out) {
  if (a.manifests.empty() || a.manifests.size() > 2)
    throw Error(ErrorCode::kConfigError, "--manifest takes one manifest or a baseline and a filtered manifest");
  std::string pole_a, pole_b;
  if (!a.poles.empty()) {
    const auto p = split(a.poles, ',');
    if (p.size() != 2) throw Error(ErrorCode::kConfigError, "--poles expects A,B");
    pole_a = p[0];
    pole_b = p[1];
  } else {
    const AttributeLexicon lex = load_required_lexicon(a.model, load_config(a.model).embedding_dim);
    pole_a = lex.pole_a_label;
    pole_b = lex.pole_b_label;
  }
  const FairnessReport report =
      a.manifests.size() == 1
          ? build_report(read_manifest(a.manifests[0]), pole_a, pole_b, a.generations)
          : compare_runs(read_manifest(a.manifests[0]), read_manifest(a.manifests[1]), pole_a, pole_b, a.generations);
  const fs::path dir = output_dir(a.out);
  write_text(dir / "report.json", report.to_json() + "\n");
  write_text(dir / "report.txt", report.to_table());
  out << report.to_table();
  return kExitOk;
}

// --- analyze ---------------------------------------------------------------

struct AnalyzeArgs {
  std::vector<std::string> offsets;
  ModelOptions model;
  std::string prompt;
  std::string token;
  int layer = 7;
  int head = 0;
  std::string diff_steps = "0,1";
  int steps = 10;
  double guidance = 7.5;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  if (a.offsets.empty()) throw Error(ErrorCode::kConfigError, "--offset is required");
  std::vector<ConceptOffset> offsets;
  for (const auto& p : a.offsets) offsets.push_back(load_offset(p));
  for (const auto& o : offsets)
    if (o.model_config_hash != offsets.front().model_config_hash)
      throw Error(ErrorCode::kProvenanceMismatch, "offsets come from different models");
  const fs::path dir = output_dir(a.out);

  std::vector<std::string> names;
  for (std::size_t k = 0; k < offsets.size(); ++k) names.push_back("o" + std::to_string(k + 1));
  {
    std::ofstream f(dir / "offset_cosines.csv");
    f << "a,b,cosine\n";
    for (std::size_t x = 0; x < offsets.size(); ++x)
      for (std::size_t y = 0; y < offsets.size(); ++y)
        f << names[x] << ',' << names[y] << ',' << fmt(offset_cosine(offsets[x], offsets[y]), "%.17g") << '\n';
  }
  print_cosine_table(offsets, names, out);

  if (offsets.size() >= 2) {
    std::ofstream f(dir / "value_cosines.csv");
    f << "a,b,layer,head,cosine\n";
    for (std::size_t x = 0; x < offsets.size(); ++x) {
      for (std::size_t y = x + 1; y < offsets.size(); ++y) {
        const auto table = value_offset_similarity(offsets[x], offsets[y]);
        long above = 0, total = 0;
        for (const auto& [key, c] : table) {
          f << names[x] << ',' << names[y] << ',' << key.first << ',' << key.second << ',' << fmt(c, "%.17g") << '\n';
          if (!std::isnan(c)) {
            ++total;
            above += c > 0.7;
          }
        }
        out << names[x] << " vs " << names[y] << ": " << above << "/" << total << " heads with cosine > 0.7\n";
      }
    }
  }

  if (!a.prompt.empty()) {
    const ModelConfig cfg = load_config(a.model);
    if (cfg.hash() != offsets.front().model_config_hash)
      throw Error(ErrorCode::kProvenanceMismatch, "offset does not match --model");
    auto stack = std::make_shared<const CAStackSpec>(CAStackSpec::build(cfg));
    if (a.layer < 1 || a.layer > static_cast<int>(stack->layers.size()))
      throw Error(ErrorCode::kConfigError, "--layer out of range");
    const CALayerSpec& layer = stack->layers[a.layer - 1];
    if (a.head < 0 || a.head >= layer.num_heads) throw Error(ErrorCode::kConfigError, "--head out of range");
    SyntheticEncoder encoder({cfg.embedding_dim, a.model.encoder_seed, a.model.beta});
    const AttributeLexicon lexicon = load_required_lexicon(a.model, cfg.embedding_dim);
    const PromptEmbedding c = encoder.embed(a.prompt, &lexicon);
    const TokenSlot m = resolve_token(c.tokens, a.token);
    ToyDenoiser denoiser(stack, encoder.null_condition());

    std::vector<int> wanted;
    for (const auto& s : split(a.diff_steps, ',')) wanted.push_back(std::stoi(s));
    CaptureRecorder recorder;
    recorder.max_steps = wanted.empty() ? 0 : *std::max_element(wanted.begin(), wanted.end()) + 1;
    GenerateOptions gen;
    gen.steps = std::max(a.steps, recorder.max_steps);
    gen.guidance = a.guidance;
    gen.seed = a.seed;
    denoiser.generate(c.matrix, gen, &recorder);
    for (int s : wanted) {
      if (s < 0 || s >= static_cast<int>(recorder.steps.size()))
        throw Error(ErrorCode::kConfigError, "--diff-steps entry out of range");
      const StepCapture& step = recorder.steps[s];
      LatentState input{step.layers[a.layer - 1].input, step.state.t, step.state.alpha_bar};
      const Vector map = attention_diff_map(input, c, offsets.front(), m, layer, a.head);
      const fs::path p = dir / ("attn_diff_step" + std::to_string(s) + "_L" + std::to_string(a.layer) + "_H" +
                                std::to_string(a.head) + ".csv");
      write_attention_diff_csv(map, p);
      out << "attention diff map (step " << s << ", max " << fmt(map.maxCoeff(), "%.4g") << ") -> " << p.string()
          << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kProvenanceMismatch:
    case ErrorCode::kIncompatibleOffsets:
      return kExitProvenance;
    case ErrorCode::kDegenerateAttention:
    case ErrorCode::kSingularSystem:
    case ErrorCode::kZeroVector:
    case ErrorCode::kDegenerateAlphaBar:
    case ErrorCode::kAmbiguousReadout:
      return kExitNumerical;
    default:
      return kExitConfig;
  }
}

std::vector<OffsetPromptRow> read_offset_prompts(const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::size_t s = t.column("source", path), g = t.column("target", path), k = t.column("token", path);
  std::vector<OffsetPromptRow> out;
  for (const auto& r : t.rows) out.push_back({r[s], r[g], r[k]});
  if (out.empty()) throw Error(ErrorCode::kConfigError, path + ": no prompt rows");
  return out;
}

std::vector<GenerationPromptRow> read_generation_prompts(const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::size_t o = t.column("occupation", path), p = t.column("prompt", path), g = t.column("targets", path);
  std::vector<GenerationPromptRow> out;
  for (const auto& r : t.rows) {
    GenerationPromptRow row{r[o], r[p], {}};
    for (const auto& item : split(r[g], ';')) {
      if (item.empty()) continue;
      const auto parts = split(item, ':');
      int sign = +1;
      if (parts.size() == 2) {
        if (parts[1] == "+1" || parts[1] == "1" || parts[1] == "+") {
          sign = +1;
        } else if (parts[1] == "-1" || parts[1] == "-") {
          sign = -1;
        } else {
          throw Error(ErrorCode::kConfigError, path + ": bad sign in target '" + item + "'");
        }
      } else if (parts.size() != 1) {
        throw Error(ErrorCode::kConfigError, path + ": bad target '" + item + "'");
      }
      row.targets.emplace_back(parts[0], sign);
    }
    out.push_back(std::move(row));
  }
  if (out.empty()) throw Error(ErrorCode::kConfigError, path + ": no prompt rows");
  return out;
}

TokenSlot resolve_token(const TokenizedPrompt& tokens, const std::string& token) {
  if (!token.empty() && std::all_of(token.begin(), token.end(), [](unsigned char c) { return std::isdigit(c); })) {
    const TokenSlot slot(std::stoi(token));
    if (!tokens.content_span().contains(slot))
      throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + token + " outside '" + tokens.detokenize() + "'");
    return slot;
  }
  std::string lowered = token;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char c) { return std::tolower(c); });
  if (auto slot = tokens.find(lowered)) return *slot;
  throw Error(ErrorCode::kTokenIndexOutOfSpan, "'" + token + "' does not occur in '" + tokens.detokenize() + "'");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Guidance-offset debiasing on a synthetic cross-attention diffusion stack", "debfilter"};
  app.require_subcommand(1);

  auto add_model = [](CLI::App* sub, ModelOptions& m) {
    sub->add_option("--model", m.model_path, "Model config JSON (default: sd21-default topology)");
    sub->add_option("--lexicon", m.lexicon_path, "Attribute lexicon JSON");
    sub->add_option("--encoder-seed", m.encoder_seed, "Synthetic encoder seed");
    sub->add_option("--beta", m.beta, "Attribute injection strength");
  };

  ComputeArgs compute;
  auto* c = app.add_subcommand("compute", "Compute and average offsets over a prompt list");
  add_model(c, compute.model);
  c->add_option("--prompts", compute.prompts, "CSV with columns source,target,token")->required();
  c->add_option("--steps", compute.steps, "Sampling steps (the first two are captured)")->check(CLI::Range(2, 1000));
  c->add_option("--w", compute.guidance, "Classifier-free guidance weight");
  c->add_option("--seed", compute.seed, "Master seed");
  c->add_option("--ridge", compute.ridge, "Ridge lambda for the unified regression");
  c->add_option("--out", compute.out, "Output offset file or directory");

  std::vector<std::string> average_inputs;
  std::string average_out;
  auto* avg = app.add_subcommand("average", "Average offset files");
  avg->add_option("--offset", average_inputs, "Offset files")->required();
  avg->add_option("--out", average_out, "Output offset file or directory");

  std::string invert_input, invert_out;
  auto* inv = app.add_subcommand("invert", "Negate an offset");
  inv->add_option("--offset", invert_input, "Offset file")->required();
  inv->add_option("--out", invert_out, "Output offset file or directory");

  GenerateArgs generate;
  auto* g = app.add_subcommand("generate", "Ratio-controlled batch generation with attribute labelling");
  add_model(g, generate.model);
  g->add_option("--prompts", generate.prompts, "CSV with columns occupation,prompt,targets")->required();
  g->add_option("--offset", generate.offset, "Offset file (omit for a baseline run)");
  g->add_option("--ratio", generate.ratio, "Fraction of samples that receive the offset");
  g->add_option("--n", generate.n, "Samples per occupation");
  g->add_option("--steps", generate.steps, "Sampling steps");
  g->add_option("--w", generate.guidance, "Classifier-free guidance weight");
  g->add_option("--seed", generate.seed, "Master seed");
  g->add_option("--active-steps", generate.active_steps, "FIRST:LAST sampling steps that use the offset");
  g->add_option("--threads", generate.threads, "Worker threads (0: hardware concurrency)");
  g->add_option("--out", generate.out, "Manifest file or directory");

  MetricsArgs metrics;
  auto* mt = app.add_subcommand("metrics", "Fairness report from one or two manifests");
  add_model(mt, metrics.model);
  mt->add_option("--manifest", metrics.manifests, "Manifest (or baseline then filtered manifest)")->required();
  mt->add_option("--poles", metrics.poles, "Pole labels A,B (default: from --lexicon)");
  mt->add_option("--generations", metrics.generations, "Generations per prompt C (default: inferred)");
  mt->add_option("--out", metrics.out, "Report directory");

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "Offset similarity tables and attention-difference maps");
  add_model(an, analyze.model);
  an->add_option("--offset", analyze.offsets, "Offset files")->required();
  an->add_option("--prompt", analyze.prompt, "Prompt for attention-difference maps");
  an->add_option("--token", analyze.token, "Target word or slot in --prompt");
  an->add_option("--layer", analyze.layer, "Cross-attention layer (1-based)");
  an->add_option("--head", analyze.head, "Head (0-based)");
  an->add_option("--diff-steps", analyze.diff_steps, "Comma-separated sampling steps (0-based)");
  an->add_option("--steps", analyze.steps, "Sampling steps");
  an->add_option("--w", analyze.guidance, "Classifier-free guidance weight");
  an->add_option("--seed", analyze.seed, "Sampling seed");
  an->add_option("--out", analyze.out, "Output directory");

  std::vector<std::string> argv_storage{"debfilter"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_storage) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (c->parsed()) return cmd_compute(compute, out);
    if (avg->parsed()) return cmd_average(average_inputs, average_out, out);
    if (inv->parsed()) return cmd_invert(invert_input, invert_out, out);
    if (g->parsed()) return cmd_generate(generate, out);
    if (mt->parsed()) return cmd_metrics(metrics, out);
    if (an->parsed()) {
      if (!analyze.prompt.empty() && analyze.token.empty())
        throw Error(ErrorCode::kConfigError, "--prompt needs --token");
      return cmd_analyze(analyze, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace debfilter
