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

#ifndef LOBIT_SENSITIVITY_HPP_
#define LOBIT_SENSITIVITY_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lobit/qat_train.hpp"
#include "lobit/recipe.hpp"
#include "lobit/toydiff.hpp"

namespace lobit::sensitivity {

using qat::alignment_score;

struct SensitivityRecord {
  std::string layer;
  int bits = 0;
  double mse = 0.0;
  double psnr = 0.0;
  double alignment_drop = 0.0;
  std::size_t params = 0;

  bool operator==(const SensitivityRecord&) const = default;
};

struct PlannerConfig {
  double eta = 0.3;
  // Exactly one of these must be set.
  std::optional<double> s_threshold;
  std::optional<double> target_avg_bits;
  std::vector<double> bump_percentiles{90.0, 95.0, 98.0};
  int default_bits = 4;
  std::vector<int> scan_bits{1, 2, 3};

  // Per-candidate QAT.
  int qat_iters = 100;
  double qat_lr = 1e-4;
  int qat_batch = 64;
  bool train_all_layers = false;

  // Per-candidate evaluation.
  int eval_samples = 100;
  double guidance = 7.5;
  int sample_steps = 50;
  std::uint64_t seed = 0;
};

void validate(const PlannerConfig& cfg);

// S = M * N^-eta.
double sensitivity_score(double mse, std::size_t params, double eta);

// Seed shared by a candidate's student and teacher generations.
std::uint64_t candidate_seed(std::uint64_t base_seed, int layer_index, int bits);

// Quantizes one layer to balanced `bits`, runs noise distillation on that
// layer's parameters, and compares generations with the teacher's.
SensitivityRecord scan_candidate(const toydiff::Denoiser& teacher, const std::string& layer,
                                 int bits, const PlannerConfig& cfg,
                                 const toydiff::ToyDataset& data,
                                 const toydiff::NoiseSchedule& sched);

// Throws listing every (layer, bits) cell absent from `records`.
void check_grid(const std::vector<SensitivityRecord>& records,
                const std::vector<std::string>& layers, const std::vector<int>& bits);

struct Correlation {
  std::string group;  // "metrics" (fixed bits) or "bits" (fixed metric)
  std::string fixed;  // e.g. "bits=1" or "mse"
  std::string a, b;
  std::optional<double> value;  // |pearson|; empty when a column is constant
};

struct CorrelationReport {
  std::vector<Correlation> entries;
};

CorrelationReport correlation_report(const std::vector<SensitivityRecord>& records,
                                     const std::vector<int>& bits = {1, 2, 3});

// Layers outside the planned set and the weight counts used for pricing.
struct LayerLayout {
  std::map<std::string, std::size_t> fixed8;
  std::vector<std::string> excluded;
};

struct PlanResult {
  PrecisionRecipe recipe;
  double s_threshold = 0.0;
  double average_bits = 0.0;
  std::map<std::string, int> base_bits;  // before percentile bumps
};

// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double p);

// Weight-only average bits of a recipe, time features not counted.
double price_recipe(const PrecisionRecipe& recipe, const std::vector<SensitivityRecord>& records,
                    const LayerLayout& layout);

// Records for layers in layout.fixed8 are ignored.
PlanResult plan_precision(const std::vector<SensitivityRecord>& records, const PlannerConfig& cfg,
                          const LayerLayout& layout = {});

struct ScanResult {
  std::vector<SensitivityRecord> records;
  CorrelationReport report;
};

// Every (layer, bits) candidate, ordered by layer then bits. Output is
// identical for any `jobs` value.
ScanResult run_scan(const toydiff::Denoiser& teacher, const std::vector<std::string>& layers,
                    const PlannerConfig& cfg, const toydiff::ToyDataset& data,
                    const toydiff::NoiseSchedule& sched, int jobs = 1);

std::string records_to_json(const std::vector<SensitivityRecord>& records);
std::vector<SensitivityRecord> records_from_json(const std::string& text);
std::string report_to_json(const CorrelationReport& report);

}  // namespace lobit::sensitivity

#endif  // LOBIT_SENSITIVITY_HPP_
