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

#include "debfilter/fairness_metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace debfilter {

namespace {

using nlohmann::json;

int pole_index(const std::string& label, const std::string& a, const std::string& b) {
  if (label == a) return 0;
  if (label == b) return 1;
  throw Error(ErrorCode::kOutOfRange, "label '" + label + "' is neither '" + a + "' nor '" + b + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    field.erase(0, field.find_first_not_of(" \t\r"));
    field.erase(field.find_last_not_of(" \t\r") + 1);
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "0" || s == "False" || s == "FALSE") return false;
  throw Error(ErrorCode::kConfigError, "cannot read '" + s + "' as a boolean");
}

long infer_generations(const std::map<std::string, std::vector<const GenerationRecord*>>& groups) {
  long c = -1;
  for (const auto& [name, recs] : groups) {
    const long n = static_cast<long>(recs.size());
    if (c >= 0 && n != c)
      throw Error(ErrorCode::kCountMismatch, "occupation '" + name + "' has " + std::to_string(n) +
                                                 " generations, others have " + std::to_string(c));
    c = n;
  }
  return c;
}

}  // namespace

double delta_p(double f_p) {
  if (!(f_p >= 0.0 && f_p <= 100.0)) throw Error(ErrorCode::kOutOfRange, "F_p must lie in [0, 100]");
  return std::abs(f_p - 50.0) / 50.0;
}

double aggregate_delta(const std::vector<double>& deltas) {
  if (deltas.empty()) throw Error(ErrorCode::kEmptyInput, "no occupations to aggregate");
  double sum = 0.0;
  for (double d : deltas) sum += d;
  return sum / static_cast<double>(deltas.size());
}

double transition_score(const std::vector<GenerationRecord>& records, const std::string& dominant_label) {
  long dominant = 0, moved = 0;
  for (const auto& r : records) {
    if (r.label_before != dominant_label) continue;
    ++dominant;
    if (r.label_after != dominant_label) ++moved;
  }
  if (dominant == 0) throw Error(ErrorCode::kNoDominantSamples, "no sample started as '" + dominant_label + "'");
  return static_cast<double>(moved) / static_cast<double>(dominant);
}

double skew(const std::vector<PoleCounts>& counts, long generations_per_prompt) {
  if (counts.empty()) throw Error(ErrorCode::kEmptyInput, "no occupations");
  if (generations_per_prompt <= 0) throw Error(ErrorCode::kCountMismatch, "generations per prompt must be > 0");
  double sum = 0.0;
  for (const auto& c : counts) {
    if (c.pole_a < 0 || c.pole_b < 0 || c.pole_a + c.pole_b != generations_per_prompt)
      throw Error(ErrorCode::kCountMismatch, std::to_string(c.pole_a) + " + " + std::to_string(c.pole_b) +
                                                 " != " + std::to_string(generations_per_prompt));
    sum += static_cast<double>(std::max(c.pole_a, c.pole_b)) / static_cast<double>(generations_per_prompt);
  }
  return 100.0 * sum / static_cast<double>(counts.size());
}

FairnessReport build_report(const std::vector<GenerationRecord>& records, const AttributeLexicon& lexicon,
                            long generations_per_prompt) {
  return build_report(records, lexicon.pole_a_label, lexicon.pole_b_label, generations_per_prompt);
}

FairnessReport build_report(const std::vector<GenerationRecord>& records, const std::string& pole_a_label,
                            const std::string& pole_b_label, long generations_per_prompt) {
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "no generation records");
  std::map<std::string, std::vector<const GenerationRecord*>> groups;
  for (const auto& r : records) groups[r.occupation].push_back(&r);
  const long c = generations_per_prompt > 0 ? generations_per_prompt : infer_generations(groups);

  FairnessReport report;
  report.pole_a_label = pole_a_label;
  report.pole_b_label = pole_b_label;
  report.generations_per_prompt = c;
  report.record_count = static_cast<long>(records.size());
  std::vector<double> before, after;
  std::vector<PoleCounts> counts_before, counts_after;
  for (const auto& [name, recs] : groups) {
    OccupationRow row;
    row.occupation = name;
    row.count = static_cast<long>(recs.size());
    std::vector<GenerationRecord> local;
    for (const auto* r : recs) {
      const int b = pole_index(r->label_before, pole_a_label, pole_b_label);
      const int a = pole_index(r->label_after, pole_a_label, pole_b_label);
      ++row.confusion[b][a];
      if (r->applied) ++row.applied;
      local.push_back(*r);
    }
    const long before_b = row.confusion[1][0] + row.confusion[1][1];
    const long after_b = row.confusion[0][1] + row.confusion[1][1];
    row.f_p_before = 100.0 * static_cast<double>(before_b) / static_cast<double>(row.count);
    row.f_p_after = 100.0 * static_cast<double>(after_b) / static_cast<double>(row.count);
    row.delta_before = delta_p(row.f_p_before);
    row.delta_after = delta_p(row.f_p_after);
    row.dominant_label = before_b > row.count - before_b ? pole_b_label : pole_a_label;
    try {
      row.transition = transition_score(local, row.dominant_label);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoDominantSamples) throw;
    }
    before.push_back(row.delta_before);
    after.push_back(row.delta_after);
    counts_before.push_back({row.count - before_b, before_b});
    counts_after.push_back({row.count - after_b, after_b});
    report.rows.push_back(std::move(row));
  }
  report.delta_before = aggregate_delta(before);
  report.delta_after = aggregate_delta(after);
  report.skew_before = skew(counts_before, c);
  report.skew_after = skew(counts_after, c);
  return report;
}

FairnessReport compare_runs(const std::vector<GenerationRecord>& baseline,
                            const std::vector<GenerationRecord>& filtered, const std::string& pole_a_label,
                            const std::string& pole_b_label, long generations_per_prompt) {
  // The baseline's final labels play the role of "before".
  std::vector<GenerationRecord> base = baseline;
  for (auto& r : base) r.label_before = r.label_after;
  const FairnessReport org = build_report(base, pole_a_label, pole_b_label, generations_per_prompt);
  FairnessReport out = build_report(filtered, pole_a_label, pole_b_label, generations_per_prompt);
  if (org.rows.size() != out.rows.size())
    throw Error(ErrorCode::kCountMismatch, "baseline and filtered runs cover different occupations");
  std::vector<double> before;
  for (std::size_t k = 0; k < out.rows.size(); ++k) {
    if (org.rows[k].occupation != out.rows[k].occupation)
      throw Error(ErrorCode::kCountMismatch, "occupation '" + org.rows[k].occupation + "' missing from filtered run");
    out.rows[k].f_p_before = org.rows[k].f_p_after;
    out.rows[k].delta_before = org.rows[k].delta_after;
    before.push_back(out.rows[k].delta_before);
  }
  out.delta_before = aggregate_delta(before);
  out.skew_before = org.skew_after;
  return out;
}

std::string FairnessReport::to_json() const {
  json j;
  j["pole_a"] = pole_a_label;
  j["pole_b"] = pole_b_label;
  j["generations_per_prompt"] = generations_per_prompt;
  j["record_count"] = record_count;
  j["delta_org"] = delta_before;
  j["delta_deb"] = delta_after;
  j["skew_org"] = skew_before;
  j["skew_deb"] = skew_after;
  json table = json::array();
  for (const auto& r : rows) {
    json row;
    row["occupation"] = r.occupation;
    row["count"] = r.count;
    row["applied"] = r.applied;
    row["F_p_org"] = r.f_p_before;
    row["F_p_deb"] = r.f_p_after;
    row["delta_org"] = r.delta_before;
    row["delta_deb"] = r.delta_after;
    row["dominant"] = r.dominant_label;
    row["TS"] = r.transition ? json(*r.transition) : json(nullptr);
    row["confusion"] = {{r.confusion[0][0], r.confusion[0][1]}, {r.confusion[1][0], r.confusion[1][1]}};
    table.push_back(row);
  }
  j["occupations"] = table;
  return j.dump(2);
}

std::string FairnessReport::to_table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-24s %9s %9s %6s\n", "Occupation", "Delta_org", "Delta_deb", "TS");
  out += buf;
  for (const auto& r : rows) {
    char ts[16];
    if (r.transition) {
      std::snprintf(ts, sizeof ts, "%6.2f", *r.transition);
    } else {
      std::snprintf(ts, sizeof ts, "%6s", "-");
    }
    std::snprintf(buf, sizeof buf, "%-24s %9.3f %9.3f %s\n", r.occupation.c_str(), r.delta_before, r.delta_after, ts);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-24s %9.3f %9.3f\n", "Delta (mean)", delta_before, delta_after);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-24s %9.2f %9.2f\n", "Skew", skew_before, skew_after);
  out += buf;
  return out;
}

std::string record_to_jsonl(const GenerationRecord& record) {
  json j;
  j["occupation"] = record.occupation;
  j["sample_index"] = record.sample_index;
  j["label_before"] = record.label_before;
  j["label_after"] = record.label_after;
  j["applied"] = record.applied;
  if (record.latent_norm) j["latent_norm"] = *record.latent_norm;
  return j.dump();
}

std::vector<GenerationRecord> parse_manifest_jsonl(const std::string& text) {
  std::vector<GenerationRecord> out;
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      GenerationRecord r;
      r.occupation = j.at("occupation").get<std::string>();
      r.sample_index = j.at("sample_index").get<std::int64_t>();
      r.label_before = j.at("label_before").get<std::string>();
      r.label_after = j.at("label_after").get<std::string>();
      r.applied = j.at("applied").get<bool>();
      if (j.contains("latent_norm")) r.latent_norm = j.at("latent_norm").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfigError, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<GenerationRecord> parse_manifest_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kConfigError, "empty CSV manifest");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::kConfigError, "CSV manifest lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t occ = column("occupation"), idx = column("sample_index"), before = column("label_before"),
                    after = column("label_after"), applied = column("applied");
  std::vector<GenerationRecord> out;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw Error(ErrorCode::kConfigError, "CSV manifest line " + std::to_string(line_no) + " has " +
                                               std::to_string(f.size()) + " fields");
    GenerationRecord r;
    r.occupation = f[occ];
    try {
      r.sample_index = std::stoll(f[idx]);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfigError, "bad sample_index on line " + std::to_string(line_no));
    }
    r.label_before = f[before];
    r.label_after = f[after];
    r.applied = parse_bool(f[applied]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GenerationRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  if (path.extension() == ".csv") return parse_manifest_csv(buf.str());
  return parse_manifest_jsonl(buf.str());
}

}  // namespace debfilter
