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

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <functional>

namespace debfilter {
namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kConfigError;
}

std::vector<GenerationRecord> occupation(const std::string& name, int male_kept, int male_flipped, int female_kept,
                                         int female_flipped = 0) {
  std::vector<GenerationRecord> out;
  auto add = [&](int n, const char* before, const char* after, bool applied) {
    for (int k = 0; k < n; ++k)
      out.push_back({name, static_cast<std::int64_t>(out.size()), before, after, applied, std::nullopt});
  };
  add(male_kept, "male", "male", false);
  add(male_flipped, "male", "female", true);
  add(female_kept, "female", "female", false);
  add(female_flipped, "female", "male", true);
  return out;
}

TEST(DeltaP, Anchors) {
  EXPECT_EQ(delta_p(50.0), 0.0);
  EXPECT_NEAR(delta_p(80.85), 0.617, 5e-4);
  EXPECT_EQ(delta_p(100.0), 1.0);
  EXPECT_EQ(delta_p(0.0), 1.0);
  EXPECT_EQ(code_of([] { delta_p(-0.1); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(code_of([] { delta_p(100.5); }), ErrorCode::kOutOfRange);
}

TEST(DeltaP, Symmetric) {
  for (int k = 0; k <= 1000; ++k) {
    const double f = k * 0.1;
    EXPECT_DOUBLE_EQ(delta_p(f), delta_p(100.0 - f)) << f;
  }
}

TEST(AggregateDelta, Anchors) {
  EXPECT_EQ(aggregate_delta({0, 0, 0}), 0.0);
  EXPECT_EQ(aggregate_delta({1.0}), 1.0);
  EXPECT_NEAR(aggregate_delta({0.617, 0.250}), 0.4335, 1e-15);
  EXPECT_EQ(code_of([] { aggregate_delta({}); }), ErrorCode::kEmptyInput);
}

TEST(TransitionScore, SurgeonCounts) {
  const auto recs = occupation("surgeon", 64, 43, 13);
  EXPECT_NEAR(transition_score(recs, "male"), 43.0 / 107.0, 1e-15);
  EXPECT_NEAR(transition_score(recs, "male"), 0.402, 1e-3);
  EXPECT_EQ(transition_score(occupation("x", 0, 20, 5), "male"), 1.0);
  EXPECT_EQ(transition_score(occupation("x", 20, 0, 5, 5), "male"), 0.0);
  EXPECT_EQ(code_of([] { transition_score(occupation("x", 0, 0, 5), "male"); }), ErrorCode::kNoDominantSamples);
}

TEST(TransitionScore, RatioExpectation) {
  // 80.85% male, half of them filtered and flipped.
  const double expected = (80.85 / 100.0 * 50.0) / 80.85;
  EXPECT_NEAR(expected, 0.5, 1e-15);
}

TEST(Skew, Anchors) {
  EXPECT_EQ(skew({{60, 60}, {60, 60}, {60, 60}}, 120), 50.0);
  EXPECT_EQ(skew({{120, 0}, {0, 120}}, 120), 100.0);
  EXPECT_NEAR(skew({{100, 20}}, 120), 83.33, 1e-2);
  EXPECT_EQ(skew({{100, 20}}, 120), skew({{20, 100}}, 120));
  EXPECT_EQ(code_of([] { skew({{100, 10}}, 120); }), ErrorCode::kCountMismatch);
  EXPECT_EQ(code_of([] { skew({}, 120); }), ErrorCode::kEmptyInput);
}

TEST(Report, SurgeonFixture) {
  const auto recs = read_manifest(testing::data_dir() / "surgeon_manifest.jsonl");
  ASSERT_EQ(recs.size(), 120u);
  const FairnessReport r = build_report(recs, "male", "female", 120);
  ASSERT_EQ(r.rows.size(), 1u);
  const OccupationRow& row = r.rows[0];
  EXPECT_EQ(row.confusion[0][0], 64);
  EXPECT_EQ(row.confusion[0][1], 43);
  EXPECT_EQ(row.confusion[1][0], 0);
  EXPECT_EQ(row.confusion[1][1], 13);
  EXPECT_EQ(row.dominant_label, "male");
  ASSERT_TRUE(row.transition.has_value());
  EXPECT_NEAR(*row.transition, 0.402, 1e-3);
  EXPECT_NEAR(row.f_p_after, 100.0 * 56.0 / 120.0, 1e-12);
  EXPECT_EQ(row.delta_after, delta_p(row.f_p_after));
  long cells = 0;
  for (auto& line : row.confusion)
    for (long v : line) cells += v;
  EXPECT_EQ(cells, r.record_count);

  const auto csv = read_manifest(testing::data_dir() / "surgeon_manifest.csv");
  const FairnessReport from_csv = build_report(csv, "male", "female", 120);
  EXPECT_EQ(from_csv.to_json(), r.to_json());
}

TEST(Report, AllFemaleAndEmpty) {
  const FairnessReport r = build_report(occupation("nurse", 0, 0, 30), "male", "female", 30);
  EXPECT_EQ(r.rows[0].f_p_after, 100.0);
  EXPECT_EQ(r.rows[0].delta_after, 1.0);
  EXPECT_EQ(code_of([] { build_report({}, "male", "female", 10); }), ErrorCode::kEmptyInput);
}

TEST(Report, BalancedSkewAndPoleSwap) {
  auto recs = occupation("a", 30, 30, 60);
  auto more = occupation("b", 60, 0, 60);
  recs.insert(recs.end(), more.begin(), more.end());
  const FairnessReport r = build_report(recs, "male", "female", 120);
  EXPECT_EQ(r.skew_before, 50.0);
  std::vector<GenerationRecord> swapped = recs;
  for (auto& rec : swapped) {
    rec.label_before = rec.label_before == "male" ? "female" : "male";
    rec.label_after = rec.label_after == "male" ? "female" : "male";
  }
  const FairnessReport s = build_report(swapped, "male", "female", 120);
  EXPECT_EQ(s.skew_before, r.skew_before);
  EXPECT_EQ(s.skew_after, r.skew_after);
}

TEST(Report, RatioTwoThirdsFromFullyMaleBaseline) {
  // 80 of 120 filtered and flipped.
  const FairnessReport r = build_report(occupation("farmer", 40, 80, 0), "male", "female", 120);
  EXPECT_NEAR(r.rows[0].f_p_after, 66.67, 1e-2);
}

TEST(Report, DominantPoleFollowsBaselineMajority) {
  const FairnessReport r = build_report(occupation("a", 10, 0, 10), "male", "female", 20);
  EXPECT_EQ(r.rows[0].dominant_label, "male");
  EXPECT_EQ(nlohmann::json::parse(r.to_json()).at("occupations").at(0).at("TS"), 0.0);
  const FairnessReport f = build_report(occupation("b", 2, 0, 5, 3), "male", "female", 10);
  EXPECT_EQ(f.rows[0].dominant_label, "female");
  EXPECT_NEAR(*f.rows[0].transition, 3.0 / 8.0, 1e-15);
}

TEST(Report, TableHasTableColumns) {
  const FairnessReport r = build_report(occupation("surgeon", 64, 43, 13), "male", "female", 120);
  const std::string table = r.to_table();
  for (const char* col : {"Occupation", "Delta_org", "Delta_deb", "TS", "Skew", "surgeon"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
}

TEST(CompareRuns, SideBySide) {
  const auto baseline = occupation("doctor", 97, 0, 23);
  const auto filtered = occupation("doctor", 50, 47, 23);
  const FairnessReport r = compare_runs(baseline, filtered, "male", "female", 120);
  EXPECT_NEAR(r.rows[0].delta_before, delta_p(100.0 * 23 / 120), 1e-15);
  EXPECT_NEAR(r.rows[0].delta_after, delta_p(100.0 * 70 / 120), 1e-15);
  EXPECT_NEAR(*r.rows[0].transition, 47.0 / 97.0, 1e-15);
}

TEST(Manifest, JsonlRoundTripAndErrors) {
  GenerationRecord rec{"ceo", 7, "male", "female", true, 12.5};
  const auto parsed = parse_manifest_jsonl(record_to_jsonl(rec) + "\n\n");
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_EQ(parsed[0].occupation, "ceo");
  EXPECT_EQ(parsed[0].sample_index, 7);
  EXPECT_EQ(parsed[0].label_after, "female");
  EXPECT_TRUE(parsed[0].applied);
  EXPECT_EQ(parsed[0].latent_norm, 12.5);
  EXPECT_THROW(parse_manifest_jsonl(R"({"occupation":"x"})"), Error);
  EXPECT_THROW(parse_manifest_jsonl("not json"), Error);
  EXPECT_THROW(parse_manifest_csv("occupation,sample_index,label_before,applied\nx,1,male,true\n"), Error);
  EXPECT_THROW(build_report({{"x", 0, "male", "robot", false, std::nullopt}}, "male", "female", 1), Error);
}

}  // namespace
}  // namespace debfilter
