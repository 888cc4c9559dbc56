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

#ifndef LOBIT_CONFIG_HPP_
#define LOBIT_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <string>

#include "lobit/qat_train.hpp"
#include "lobit/sensitivity.hpp"
#include "lobit/toydiff.hpp"

namespace lobit {

// Teacher training: noise prediction with uniform timesteps.
struct TeacherConfig {
  int iters = 5000;
  double lr = 1e-3;
  double lr_end = 1e-5;
  int batch = 64;
  double p_drop = 0.1;
  int eval_every = 500;
};

struct SamplerConfig {
  int steps = 50;
  double guidance = 7.5;
  int sample_count = 512;  // cmd sample and the teacher alignment check
  int eval_samples = 256;  // training-time and cmd eval references
};

struct RunConfig {
  toydiff::ToyDataset data;
  toydiff::DenoiserConfig model;
  int schedule_steps = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  SamplerConfig sampler;
  TeacherConfig teacher;
  qat::TrainConfig train;
  int alt_opt_iters = quant::kAltOptDefaultIters;
  sensitivity::PlannerConfig planner;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out = "out";
};

// INI text with sections data, model, schedule, sampler, teacher, train,
// planner, run. Every key is required; unknown keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_text(const RunConfig& cfg);

// Sets one "section.key" entry from its text form.
void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

void validate(const RunConfig& cfg);

toydiff::NoiseSchedule make_schedule(const RunConfig& cfg);

}  // namespace lobit

#endif  // LOBIT_CONFIG_HPP_
