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
#include <optional>
#include <string>
#include <vector>

namespace debfilter {

struct GenerationRecord {
  std::string occupation;
  std::int64_t sample_index = 0;
  std::string label_before;
  std::string label_after;
  bool applied = false;
  std::optional<double> latent_norm;  // carried through from generation, not used by the metrics
};

// |F_p - 50| / 50 for F_p in percent.
double delta_p(double f_p);
double aggregate_delta(const std::vector<double>& deltas);

/// #(dominant -> other) / #(originally dominant).
/// Throws NoDominantSamples when no record starts at the dominant label.
double transition_score(const std::vector<GenerationRecord>& records, const std::string& dominant_label);

struct PoleCounts {
  long pole_a = 0;
  long pole_b = 0;
};

/// 100 * mean over occupations of max(N_a, N_b) / C.
double skew(const std::vector<PoleCounts>& counts, long generations_per_prompt);

struct OccupationRow {
  std::string occupation;
  long count = 0;
  // confusion[before][after], index 0 = pole A, 1 = pole B
  long confusion[2][2] = {{0, 0}, {0, 0}};
  long applied = 0;
  double f_p_before = 0.0;  // percent pole B
  double f_p_after = 0.0;
  double delta_before = 0.0;
  double delta_after = 0.0;
  std::string dominant_label;
  std::optional<double> transition;
};

struct FairnessReport {
  std::string pole_a_label;
  std::string pole_b_label;
  long generations_per_prompt = 0;
  std::vector<OccupationRow> rows;  // sorted by occupation
  double delta_before = 0.0;
  double delta_after = 0.0;
  double skew_before = 0.0;
  double skew_after = 0.0;
  long record_count = 0;

  std::string to_json() const;
  std::string to_table() const;
};

FairnessReport build_report(const std::vector<GenerationRecord>& records, const AttributeLexicon& lexicon,
                            long generations_per_prompt);
FairnessReport build_report(const std::vector<GenerationRecord>& records, const std::string& pole_a_label,
                            const std::string& pole_b_label, long generations_per_prompt);

// Baseline run against filtered run: Δ_org from the baseline's final labels,
// Δ_deb and TS from the filtered run.
FairnessReport compare_runs(const std::vector<GenerationRecord>& baseline,
                            const std::vector<GenerationRecord>& filtered, const std::string& pole_a_label,
                            const std::string& pole_b_label, long generations_per_prompt);

std::string record_to_jsonl(const GenerationRecord& record);
std::vector<GenerationRecord> read_manifest(const std::filesystem::path& path);
std::vector<GenerationRecord> parse_manifest_jsonl(const std::string& text);
std::vector<GenerationRecord> parse_manifest_csv(const std::string& text);

}  // namespace debfilter
