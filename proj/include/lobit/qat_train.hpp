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

#ifndef LOBIT_QAT_TRAIN_HPP_
#define LOBIT_QAT_TRAIN_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lobit/metrics.hpp"
#include "lobit/recipe.hpp"
#include "lobit/toydiff.hpp"

namespace lobit::qat {

using toydiff::Denoiser;
using toydiff::Gradients;
using toydiff::Mat;

enum class LossNorm { kL2, kL1 };

struct TrainConfig {
  double lr = 1e-5;
  // When positive, lr decays linearly to lr_end over each stage; otherwise constant.
  double lr_end = 0.0;
  int batch = 64;
  int iters_stage1 = 0;
  int iters_stage2 = 0;
  double lambda = 0.01;
  double p_drop = 0.1;
  double beta_alpha = 3.0;
  double beta_beta = 1.0;
  std::uint64_t seed = 0;

  LossNorm norm = LossNorm::kL2;
  bool lsq_grad_scale = true;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int eval_every = 100;
  int eval_samples = 256;
  double eval_guidance = 7.5;
  int sample_steps = 50;
};

void validate(const TrainConfig& cfg);

// Beta(alpha, beta) variate: inverse CDF when either parameter is 1, Johnk's
// rejection method otherwise.
double sample_beta(double alpha, double beta, metrics::Rng& rng);
// t = min(floor(u * T), T - 1), u ~ Beta(alpha, beta).
int beta_timestep_sample(const TrainConfig& cfg, metrics::Rng& rng, int total_steps);

struct Batch {
  Mat x;
  Mat eps;
  Mat z;
  std::vector<int> t;
  std::vector<int> cls;  // after condition dropping
  int dropped = 0;
};

// Draws data, Beta timesteps, noise, and drops the condition to the null
// class with probability p_drop. The same batch feeds teacher and student.
Batch make_batch(const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                 const TrainConfig& cfg, int null_class, metrics::Rng& rng);

struct LossResult {
  double loss = 0.0;
  double loss_noise = 0.0;
  double loss_feat = 0.0;
  Gradients grads;
};

// Elementwise mean of norm(a - b) and its gradient with respect to b.
double match_loss(const Mat& target, const Mat& pred, LossNorm norm, Mat* grad_pred);

// Noise distillation plus lambda * sum over blocks of feature distillation.
LossResult stage1_loss(const Denoiser& teacher, const Denoiser& student, const Batch& batch,
                       const TrainConfig& cfg);
LossResult stage1_loss(const Denoiser& teacher, const Denoiser& student,
                       const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                       const TrainConfig& cfg, metrics::Rng& rng);

// Noise prediction against the injected eps.
LossResult stage2_loss(const Denoiser& student, const Batch& batch, const TrainConfig& cfg);
LossResult stage2_loss(const Denoiser& student, const toydiff::ToyDataset& data,
                       const toydiff::NoiseSchedule& sched, const TrainConfig& cfg,
                       metrics::Rng& rng);

// Which parameters receive updates; an empty layer set means all layers.
struct ParamFilter {
  std::set<std::string> layers;
  bool class_table = true;

  bool trains(const std::string& layer) const { return layers.empty() || layers.contains(layer); }
};

// AdamW with decoupled weight decay on weight matrices; moments kept FP32.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const Denoiser& model);

  void step(Denoiser& model, const Gradients& grads, const TrainConfig& cfg,
            const ParamFilter& filter = {});
  std::int64_t steps() const { return t_; }

  struct Moments {
    std::vector<float> m, v;
  };
  // One entry per parameter tensor: per layer weight, bias, scale; then class table.
  std::vector<Moments>& moments() { return moments_; }
  const std::vector<Moments>& moments() const { return moments_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::int64_t t_ = 0;
  std::vector<Moments> moments_;
};

// Quantized student: latent weights, per-layer affines, optimizer moments.
struct StudentState {
  Denoiser model;
  AdamW optimizer;
  PrecisionRecipe recipe;
};

// Attaches quantization per recipe: planned layers balanced with alternating
// optimization scale init, fixed8 layers unbalanced 8-bit with Min-Max init.
StudentState make_student(const Denoiser& teacher, const PrecisionRecipe& recipe,
                          int alt_opt_iters = quant::kAltOptDefaultIters);

void save_student(const StudentState& s, const std::filesystem::path& path);
StudentState load_student(const toydiff::DenoiserConfig& cfg, const PrecisionRecipe& recipe,
                          const std::filesystem::path& path);

// Reference generations from the teacher, reused across evaluations.
struct EvalReference {
  std::vector<int> cls;
  std::uint64_t seed = 0;
  double guidance = 7.5;
  int steps = 50;
  Mat teacher_samples;
  double teacher_alignment = 0.0;
};

EvalReference make_reference(const Denoiser& teacher, const toydiff::ToyDataset& data,
                             const toydiff::NoiseSchedule& sched, int n, double guidance,
                             int steps, std::uint64_t seed);

struct EvalResult {
  double mse = 0.0;
  double psnr = 0.0;
  double alignment = 0.0;
};

EvalResult evaluate(const Denoiser& model, const EvalReference& ref,
                    const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched);

// Fraction of samples whose nearest mode is their conditioning class.
double alignment_score(const Mat& samples, const std::vector<int>& cls,
                       const toydiff::ToyDataset& data);

struct LogRow {
  int stage = 0;
  int iter = 0;
  double loss_noise = 0.0;
  double loss_feat = 0.0;
  double eval_mse = 0.0;
  double eval_alignment = 0.0;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& r);

struct TrainHooks {
  // Called after each optimizer step with (stage, iter, batch).
  std::function<void(int, int, const Batch&)> on_batch;
  std::function<void(const LogRow&)> on_log;
};

// Stage-I for iters_stage1, then Stage-II for iters_stage2. Optimizer moments
// carry across the stage boundary. Throws ErrorKind::kNumeric on a NaN loss.
std::vector<LogRow> train(const Denoiser& teacher, StudentState& student,
                          const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                          const TrainConfig& cfg, const EvalReference* ref = nullptr,
                          const TrainHooks& hooks = {});

// Runs only one stage (1 or 2) for `iters` iterations.
std::vector<LogRow> train_stage(int stage, const Denoiser* teacher, StudentState& student,
                                const toydiff::ToyDataset& data,
                                const toydiff::NoiseSchedule& sched, const TrainConfig& cfg,
                                int iters, const EvalReference* ref = nullptr,
                                const ParamFilter& filter = {}, const TrainHooks& hooks = {});

// Per-step mean of (1 - abar_t)/abar_t * ||eps_teacher - eps_student||^2 over
// the evaluation pairs, sharing z_t between the two models.
std::vector<double> profile_timestep_error(const Denoiser& teacher, const Denoiser& student,
                                           const Mat& x, const std::vector<int>& cls,
                                           const std::vector<int>& t_grid,
                                           const toydiff::NoiseSchedule& sched,
                                           std::uint64_t seed);

}  // namespace lobit::qat

#endif  // LOBIT_QAT_TRAIN_HPP_
