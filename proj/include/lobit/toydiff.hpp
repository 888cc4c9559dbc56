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

#ifndef LOBIT_TOYDIFF_HPP_
#define LOBIT_TOYDIFF_HPP_

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lobit/metrics.hpp"
#include "lobit/quantizer.hpp"

namespace lobit::toydiff {

// Batches are column-major: one column per sample.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Noise schedule and forward process

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
};

// Scaled-linear betas: beta_t = (sqrt(b0) + t/(T-1) * (sqrt(b1) - sqrt(b0)))^2.
NoiseSchedule make_schedule(int steps = 1000, double beta_start = 0.00085,
                            double beta_end = 0.012);

// z = sqrt(alpha_bar) * x + sqrt(1 - alpha_bar) * eps, column by column with
// each column's own alpha_bar.
Mat forward_diffuse(const Mat& x, std::span<const double> alpha_bars, const Mat& eps);
Mat forward_diffuse(const Mat& x, const std::vector<int>& t, const Mat& eps,
                    const NoiseSchedule& sched);

// Sinusoidal embedding: d/2 frequencies f_k = 10000^(-k/(d/2)), laid out as
// [sin(t f_0) .. sin(t f_{d/2-1}), cos(t f_0) .. cos(t f_{d/2-1})].
Vec time_embedding(int t, int dim);

// ---------------------------------------------------------------------------
// Dataset

struct ToyDataset {
  int classes = 8;
  double radius = 0.75;
  double sigma = 0.05;

  Eigen::Vector2d mode(int c) const;
  // Samples `n` points with uniformly drawn classes; values clamped to [-1, 1].
  void sample(metrics::Rng& rng, int n, Mat& x, std::vector<int>& cls) const;
  int nearest_mode(double x, double y) const;
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  int data_dim = 2;
  int hidden = 128;
  int blocks = 6;
  int temb_dim = 64;
  int cond_dim = 64;
  int classes = 8;

  bool operator==(const DenoiserConfig&) const = default;
};

struct LayerQuant {
  quant::QuantSpec spec;
  quant::ChannelAffine affine;
};

// out x in linear layer. `weight` holds the latent FP weights; forward passes
// always read `deployed`, which is weight itself or fake_quantize(weight).
struct Linear {
  WeightTensor weight;
  std::vector<double> bias;
  std::optional<LayerQuant> quant;
  std::vector<double> deployed;

  const std::string& name() const { return weight.name; }
  int out_features() const { return static_cast<int>(weight.shape[0]); }
  int in_features() const { return static_cast<int>(weight.shape[1]); }
  std::size_t param_count() const { return weight.values.size(); }
  void refresh();
};

enum class LayerRole { kInput, kCondition, kTimeProjection, kHidden, kOutput };

struct LayerGrad {
  std::vector<double> weight;    // latent weights (STE-mapped when quantized)
  std::vector<double> deployed;  // dL/d(deployed weight)
  std::vector<double> bias;
  std::vector<double> scale;     // empty unless quantized
};

struct Gradients {
  std::vector<LayerGrad> layers;  // parallel to Denoiser::layers()
  std::vector<double> class_table;

  void add(const Gradients& other);
  void scale_by(double f);
};

class Denoiser;

// Intermediates recorded by forward() for the matching backward() call.
struct Tape {
  const Denoiser* owner = nullptr;
  std::uint64_t generation = 0;
  bool has_time_embedding = false;
  Mat z;
  std::vector<int> cls;
  Mat cond;                     // cond_dim x B class embeddings
  Mat temb;                     // temb_dim x B (when timesteps were given)
  std::vector<Mat> block_in;    // hidden state after adding the time feature
  std::vector<Mat> a1, y1, a2;  // per-block branch intermediates
  Mat h_final;
};

struct ForwardResult {
  Mat eps;
  std::vector<Mat> activations;  // residual stream after each block
  Tape tape;
};

class TimeFeatureTable;

class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  int null_class() const { return cfg_.classes; }

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }
  Linear& layer(const std::string& name);
  const Linear& layer(const std::string& name) const;
  int layer_index(const std::string& name) const;
  LayerRole role(int index) const { return roles_.at(index); }
  WeightTensor& class_table() { return class_table_; }
  const WeightTensor& class_table() const { return class_table_; }

  // Layers that may carry a low-bit quantization (all but time projections).
  std::vector<std::string> quantizable_layers() const;
  std::vector<std::string> time_projection_layers() const;
  std::string input_layer() const { return layers_.front().name(); }
  std::string output_layer() const { return layers_.back().name(); }

  // Recomputes deployed weights; call after any parameter change.
  void refresh();
  std::uint64_t generation() const { return generation_; }

  // F_{i,t} = r_i(emb_t) for one block and step.
  Vec time_feature(int block, int t) const;

  // Training path: per-sample timesteps, time features computed in batch.
  ForwardResult forward(const Mat& z, std::span<const int> t, std::span<const int> cls) const;
  // Sampling path: one shared step; features come from `cache` when given,
  // otherwise from time_feature().
  ForwardResult forward_at(const Mat& z, int t, std::span<const int> cls,
                           const TimeFeatureTable* cache = nullptr) const;
  // Generic path: per-block hidden x B feature matrices supplied by the caller.
  ForwardResult forward_features(const Mat& z, const std::vector<Mat>& features,
                                 std::span<const int> cls) const;

  // grad_acts may be empty (no feature loss) or hold one matrix per block.
  Gradients backward(const Tape& tape, const Mat& grad_eps, const std::vector<Mat>& grad_acts,
                     bool lsq_grad_scale = true) const;

  Gradients zero_gradients() const;

 private:
  ForwardResult run(const Mat& z, const std::vector<Mat>& features, std::span<const int> cls,
                    Mat temb) const;

  DenoiserConfig cfg_;
  std::vector<Linear> layers_;
  std::vector<LayerRole> roles_;
  std::map<std::string, int> index_;
  WeightTensor class_table_;
  std::uint64_t generation_ = 0;

  int in_idx_ = 0, cond_idx_ = 0, out_idx_ = 0;
  std::vector<int> tproj_idx_, fc1_idx_, fc2_idx_;
};

// ---------------------------------------------------------------------------
// Time-feature caching

class TimeFeatureTable {
 public:
  TimeFeatureTable() = default;
  TimeFeatureTable(std::vector<int> steps, std::vector<std::vector<Vec>> features);

  const std::vector<int>& steps() const { return steps_; }
  // features()[k][i] is F_{i, steps[k]}.
  const std::vector<std::vector<Vec>>& features() const { return features_; }
  const Vec& at(int block, int t) const;
  bool contains(int t) const { return index_.contains(t); }
  std::size_t scalar_count() const;

 private:
  std::vector<int> steps_;
  std::vector<std::vector<Vec>> features_;
  std::map<int, std::size_t> index_;
};

TimeFeatureTable cache_time_features(const Denoiser& model, std::span<const int> steps,
                                     int total_steps);

// ---------------------------------------------------------------------------
// Sampling

// Classifier-free guidance: eps_c + (w - 1)(eps_c - eps_u).
Mat cfg_combine(const Mat& eps_c, const Mat& eps_u, double w);

// Evenly spaced steps ending at T-1: t_k = (k+1) * T / steps - 1, descending.
std::vector<int> ddim_timesteps(int total_steps, int steps);

// eps prediction for a batch at one shared step.
using EpsPredictor = std::function<Mat(const Mat& z, int t, std::span<const int> cls)>;

// Deterministic DDIM (eta = 0) from z_init with CFG. Predictions for the
// conditional and null classes are made in a single stacked call.
Mat ddim_sample(const EpsPredictor& predict, const NoiseSchedule& sched, int steps,
                const Mat& z_init, std::span<const int> cls, int null_class, double guidance,
                std::vector<Mat>* trajectory = nullptr);

// Seeded initial noise, filled column by column.
Mat initial_noise(int data_dim, int n, std::uint64_t seed);

Mat sample(const Denoiser& model, const NoiseSchedule& sched, int steps, std::span<const int> cls,
           double guidance, std::uint64_t seed, const TimeFeatureTable* cache = nullptr,
           std::vector<Mat>* trajectory = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<double> values;
};

enum class StoreType : std::uint8_t { kF32 = 1, kF64 = 2 };

// Container: magic, version u32, count u32, then per array: name (u16 length
// + UTF-8), rank u8, dims u32[], dtype u8, data; trailing CRC32.
void write_arrays(const std::filesystem::path& path, std::string_view magic,
                  const std::vector<NamedArray>& arrays, StoreType type);
std::vector<NamedArray> read_arrays(const std::filesystem::path& path, std::string_view magic);

inline constexpr std::string_view kTeacherMagic = "BFT1";

std::vector<NamedArray> export_params(const Denoiser& model);
void import_params(Denoiser& model, const std::vector<NamedArray>& arrays);
// Rounds every parameter to FP32, the checkpoint storage precision.
void round_params_to_f32(Denoiser& model);

void save_teacher(const Denoiser& model, const std::filesystem::path& path);
Denoiser load_teacher(const DenoiserConfig& cfg, const std::filesystem::path& path);

}  // namespace lobit::toydiff

#endif  // LOBIT_TOYDIFF_HPP_
