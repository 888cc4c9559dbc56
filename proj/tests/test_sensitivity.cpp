/* Copyright 2026 The lobit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "lobit/sensitivity.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "lobit/bitpack.hpp"
#include "lobit/error.hpp"
#include "lobit/metrics.hpp"

namespace lobit::sensitivity {
namespace {

SensitivityRecord rec(const std::string& layer, int bits, double mse, std::size_t params,
                      double drop = 0.0) {
  return {layer, bits, mse, metrics::psnr_from_mse(mse), drop, params};
}

void add_layer(std::vector<SensitivityRecord>& out, const std::string& name, std::size_t params,
               std::vector<double> mse, double drop3 = 0.0) {
  for (int b = 1; b <= 3; ++b) out.push_back(rec(name, b, mse[b - 1], params, b == 3 ? drop3 : 0.0));
}

PlannerConfig threshold(double s_o, double eta = 0.0) {
  PlannerConfig c;
  c.eta = eta;
  c.s_threshold = s_o;
  return c;
}

// Average bits by direct summation over the recipe.
double summed_bits(const PrecisionRecipe& r, const std::map<std::string, std::size_t>& sizes) {
  double num = 0.0, den = 0.0;
  for (const auto& [name, n] : sizes) {
    den += static_cast<double>(n);
    const auto it = r.layers.find(name);
    const int b = it != r.layers.end() ? it->second : 8;
    const double per = it != r.layers.end() && r.balanced ? std::log2(std::pow(2.0, b) + 1.0) : b;
    num += per * static_cast<double>(n);
  }
  return num / den;
}

TEST(Score, SizeAwareFormula) {
  EXPECT_DOUBLE_EQ(sensitivity_score(0.5, 1000, 0.3), 0.5 * std::pow(1000.0, -0.3));
  EXPECT_EQ(sensitivity_score(0.5, 1000, 0.0), 0.5);
  EXPECT_THROW(sensitivity_score(0.5, 0, 0.3), Error);
}

TEST(Planner, ThresholdRuleAndDefault) {
  std::vector<SensitivityRecord> r;
  add_layer(r, "A", 100, {0.5, 0.2, 0.05});
  add_layer(r, "B", 100, {0.05, 0.04, 0.03});
  add_layer(r, "C", 100, {0.9, 0.8, 0.7});
  const PlanResult p = plan_precision(r, threshold(0.1));
  EXPECT_EQ(p.recipe.layers.at("A"), 3);
  EXPECT_EQ(p.recipe.layers.at("B"), 1);
  EXPECT_EQ(p.recipe.layers.at("C"), 4);
  EXPECT_TRUE(p.recipe.balanced);
}

TEST(Planner, StrictThresholdComparison) {
  std::vector<SensitivityRecord> r;
  add_layer(r, "A", 100, {0.1, 0.1, 0.05});
  EXPECT_EQ(plan_precision(r, threshold(0.1)).recipe.layers.at("A"), 3);
}

TEST(Planner, EtaFavoursLargeLayers) {
  std::vector<SensitivityRecord> r;
  add_layer(r, "small", 10, {0.2, 0.1, 0.01});
  add_layer(r, "large", 100000, {0.2, 0.1, 0.01});
  // 1e5^-0.3 = 0.0316 and 10^-0.3 = 0.501: large scores 0.0063 at 1 bit,
  // small scores 0.100, 0.0501, 0.0050.
  const PlanResult p = plan_precision(r, threshold(0.05, 0.3));
  EXPECT_EQ(p.recipe.layers.at("large"), 1);
  EXPECT_EQ(p.recipe.layers.at("small"), 3);
}

TEST(Planner, CumulativePercentileBumpsAndCap) {
  std::vector<SensitivityRecord> r;
  for (int i = 0; i < 50; ++i) {
    const double m = i == 49 ? 0.9 : 0.01;  // layer 49 falls back to the default
    add_layer(r, "L" + std::to_string(i), 100, {m, m, m}, static_cast<double>(i));
  }
  PlannerConfig c = threshold(0.1);
  c.default_bits = 6;
  const PlanResult p = plan_precision(r, c);
  // Percentiles of 0..49: p90 = 44.1, p95 = 46.55, p98 = 48.02.
  for (int i = 0; i <= 44; ++i) EXPECT_EQ(p.recipe.layers.at("L" + std::to_string(i)), 1) << i;
  EXPECT_EQ(p.recipe.layers.at("L45"), 2);
  EXPECT_EQ(p.recipe.layers.at("L46"), 2);
  EXPECT_EQ(p.recipe.layers.at("L47"), 3);
  EXPECT_EQ(p.recipe.layers.at("L48"), 3);
  EXPECT_EQ(p.base_bits.at("L49"), 6);
  EXPECT_EQ(p.recipe.layers.at("L49"), 8);
}

TEST(Planner, MonotoneInThreshold) {
  metrics::Rng rng(7);
  std::vector<SensitivityRecord> r;
  for (int i = 0; i < 15; ++i) {
    const double m1 = 0.5 * rng.uniform();
    const double m2 = m1 * rng.uniform();
    const double m3 = m2 * rng.uniform();
    add_layer(r, "L" + std::to_string(i), 100 + rng.below(5000), {m1, m2, m3}, rng.uniform());
  }
  std::map<std::string, int> prev;
  double prev_avg = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 50; ++k) {
    const double s_o = std::pow(10.0, -5.0 + 5.0 * k / 49.0);
    const PlanResult p = plan_precision(r, threshold(s_o, 0.3));
    EXPECT_LE(p.average_bits, prev_avg);
    for (const auto& [name, b] : p.recipe.layers)
      if (!prev.empty()) EXPECT_LE(b, prev.at(name));
    prev = p.recipe.layers;
    prev_avg = p.average_bits;
  }
}

TEST(Planner, TargetAverageBitsWithinTolerance) {
  metrics::Rng rng(3);
  std::vector<SensitivityRecord> r;
  std::map<std::string, std::size_t> sizes;
  for (int i = 0; i < 60; ++i) {
    const std::string name = "L" + std::to_string(i);
    const double m1 = rng.uniform();
    add_layer(r, name, 1000, {m1, m1 * 0.3, m1 * 0.1});
    sizes[name] = 1000;
  }
  LayerLayout layout;
  layout.fixed8 = {{"in", 20}, {"out", 20}};
  sizes.insert(layout.fixed8.begin(), layout.fixed8.end());
  for (double target : {1.8, 2.0, 2.5}) {
    PlannerConfig c;
    c.target_avg_bits = target;
    const PlanResult p = plan_precision(r, c, layout);
    EXPECT_NEAR(p.average_bits, target, 0.02) << target;
    EXPECT_NEAR(summed_bits(p.recipe, sizes), p.average_bits, 1e-9);
  }
}

TEST(Planner, ModeValidation) {
  std::vector<SensitivityRecord> r;
  add_layer(r, "A", 100, {0.5, 0.2, 0.05});
  PlannerConfig both = threshold(0.1);
  both.target_avg_bits = 2.0;
  EXPECT_THROW(plan_precision(r, both), Error);
  PlannerConfig neither;
  EXPECT_THROW(plan_precision(r, neither), Error);
}

TEST(Planner, IncompleteGridListsCells) {
  std::vector<SensitivityRecord> r;
  add_layer(r, "A", 100, {0.5, 0.2, 0.05});
  r.push_back(rec("B", 1, 0.1, 100));
  try {
    plan_precision(r, threshold(0.1));
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("B@2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("B@3"), std::string::npos) << msg;
  }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 90), 9.0);
  EXPECT_EQ(percentile({4, 1, 3}, 100), 4.0);
}

TEST(Correlation, SelfAndOracle) {
  std::vector<SensitivityRecord> r;
  const std::vector<double> m1{0.1, 0.4, 0.2}, m2{0.05, 0.3, 0.1}, m3{0.01, 0.2, 0.07};
  const std::vector<double> drop{0.0, 0.25, 0.125};
  for (int i = 0; i < 3; ++i) {
    const std::string name = "L" + std::to_string(i);
    r.push_back({name, 1, m1[i], metrics::psnr_from_mse(m1[i]), m1[i], 10});
    r.push_back({name, 2, m2[i], metrics::psnr_from_mse(m2[i]), drop[i], 10});
    r.push_back({name, 3, m3[i], metrics::psnr_from_mse(m3[i]), 0.0, 10});
  }
  const CorrelationReport rep = correlation_report(r);
  bool saw_self = false, saw_bits = false, saw_null = false;
  for (const Correlation& c : rep.entries) {
    if (c.group == "metrics" && c.fixed == "bits=1" && c.a == "mse" && c.b == "alignment_drop") {
      ASSERT_TRUE(c.value);
      EXPECT_NEAR(*c.value, 1.0, 1e-12);
      saw_self = true;
    }
    if (c.group == "bits" && c.fixed == "mse" && c.a == "bits=1" && c.b == "bits=2") {
      ASSERT_TRUE(c.value);
      EXPECT_NEAR(*c.value, std::fabs(metrics::pearson(m1, m2)), 1e-12);
      saw_bits = true;
    }
    if (c.fixed == "bits=3" && c.b == "alignment_drop") {
      EXPECT_FALSE(c.value);
      saw_null = true;
    }
    if (c.group == "metrics" && c.a == "mse" && c.b == "psnr") {
      ASSERT_TRUE(c.value);
      EXPECT_GT(*c.value, 0.8);
    }
  }
  EXPECT_TRUE(saw_self && saw_bits && saw_null);
  EXPECT_EQ(rep.entries.size(), 9u + 9u);
}

TEST(Json, RecordsRoundtripWithInfinitePsnr) {
  std::vector<SensitivityRecord> r;
  r.push_back({"a", 1, 0.0, metrics::kPsnrIdentical, 0.0, 5});
  r.push_back({"b", 2, 0.125, metrics::psnr_from_mse(0.125), -0.25, 7});
  const std::string text = records_to_json(r);
  EXPECT_NE(text.find("null"), std::string::npos);
  EXPECT_EQ(records_from_json(text), r);
}

toydiff::DenoiserConfig tiny() {
  toydiff::DenoiserConfig cfg;
  cfg.hidden = 8;
  cfg.blocks = 1;
  cfg.temb_dim = 4;
  cfg.cond_dim = 4;
  cfg.classes = 4;
  return cfg;
}

PlannerConfig scan_config() {
  PlannerConfig c;
  c.target_avg_bits = 2.0;
  c.qat_iters = 3;
  c.qat_batch = 8;
  c.eval_samples = 8;
  c.sample_steps = 5;
  c.seed = 42;
  return c;
}

TEST(Scan, CandidateDeterministicAndEightBitNearLossless) {
  const toydiff::Denoiser teacher(tiny(), 1);
  toydiff::ToyDataset data;
  data.classes = 4;
  const toydiff::NoiseSchedule s = toydiff::make_schedule();
  const PlannerConfig c = scan_config();
  const std::string layer = "blocks.0.fc1";
  const SensitivityRecord a = scan_candidate(teacher, layer, 2, c, data, s);
  const SensitivityRecord b = scan_candidate(teacher, layer, 2, c, data, s);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.params, teacher.layer(layer).param_count());
  EXPECT_GE(a.mse, 0.0);
  EXPECT_LT(scan_candidate(teacher, layer, 8, c, data, s).mse, 1e-4);
  EXPECT_THROW(scan_candidate(teacher, "nope", 2, c, data, s), Error);
}

TEST(Scan, FullGridAndParallelMatchesSerial) {
  const toydiff::Denoiser teacher(tiny(), 2);
  toydiff::ToyDataset data;
  data.classes = 4;
  const toydiff::NoiseSchedule s = toydiff::make_schedule();
  const PlannerConfig c = scan_config();
  const auto layers = teacher.quantizable_layers();
  const ScanResult serial = run_scan(teacher, layers, c, data, s, 1);
  const ScanResult parallel = run_scan(teacher, layers, c, data, s, 4);
  EXPECT_EQ(serial.records.size(), layers.size() * 3);
  EXPECT_EQ(serial.records, parallel.records);
  EXPECT_EQ(records_to_json(serial.records), records_to_json(parallel.records));
  EXPECT_EQ(report_to_json(serial.report), report_to_json(parallel.report));
}

TEST(Scan, SeedsDifferPerCandidate) {
  EXPECT_NE(candidate_seed(0, 1, 2), candidate_seed(0, 2, 1));
  EXPECT_NE(candidate_seed(0, 1, 2), candidate_seed(1, 1, 2));
  EXPECT_EQ(candidate_seed(5, 3, 3), candidate_seed(5, 3, 3));
}

}  // namespace
}  // namespace lobit::sensitivity
