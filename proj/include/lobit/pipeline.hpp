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

#ifndef LOBIT_PIPELINE_HPP_
#define LOBIT_PIPELINE_HPP_

#include <filesystem>
#include <functional>
#include <string>

#include "lobit/bitpack.hpp"
#include "lobit/config.hpp"

namespace lobit::pipeline {

// Artifact names inside the output directory.
inline constexpr const char* kTeacher = "teacher.bft";
inline constexpr const char* kTeacherMetrics = "teacher_metrics.csv";
inline constexpr const char* kScanRecords = "scan_records.json";
inline constexpr const char* kScanReport = "scan_report.json";
inline constexpr const char* kRecipe = "recipe.json";
inline constexpr const char* kStage1 = "student_stage1.bfs";
inline constexpr const char* kQatMetrics = "qat_metrics.csv";
inline constexpr const char* kStage2 = "student_stage2.bfs";
inline constexpr const char* kFinetuneMetrics = "finetune_metrics.csv";
inline constexpr const char* kPacked = "model.bfq";
inline constexpr const char* kSamples = "samples.csv";
inline constexpr const char* kEval = "eval.csv";

// Progress lines; silent when empty.
using Logger = std::function<void(const std::string&)>;

struct Context {
  RunConfig cfg;
  std::filesystem::path out;
  Logger log;
};

// Seeds for each pipeline purpose, all derived from cfg.seed.
std::uint64_t purpose_seed(const RunConfig& cfg, const char* purpose, std::uint64_t index = 0);

void train_teacher(const Context& ctx);
void scan(const Context& ctx);
void plan(const Context& ctx);
void qat(const Context& ctx);
void finetune(const Context& ctx);
void pack(const Context& ctx);
void sample(const Context& ctx);
void eval(const Context& ctx);

// Runs every command in order.
void run_all(const Context& ctx);

// Command name to function; throws kConfig for an unknown name.
void run_command(const std::string& name, const Context& ctx);

// Deployable model rebuilt from a packed file: dequantized weights, FP32
// tensors, and the cached time-feature table in place of time projections.
struct Deployed {
  toydiff::Denoiser model;
  toydiff::TimeFeatureTable features;
};

bitpack::PackedModel pack_student(const qat::StudentState& student, const RunConfig& cfg);
Deployed load_deployed(const bitpack::PackedModel& packed, const RunConfig& cfg);

// Guidance scales swept by the eval command: 2.5, 3.5, ..., 9.5.
std::vector<double> eval_guidance_scales();

}  // namespace lobit::pipeline

#endif  // LOBIT_PIPELINE_HPP_
