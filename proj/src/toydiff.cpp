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

#include "lobit/toydiff.hpp"

#include <cmath>
#include <numbers>

#include "byte_io.hpp"
#include "lobit/error.hpp"

namespace lobit::toydiff {

namespace {

using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Vec>;
using VecMap = Eigen::Map<Vec>;

ConstRowMap deployed_of(const Linear& l) {
  return ConstRowMap(l.deployed.data(), l.out_features(), l.in_features());
}

Mat affine(const Linear& l, const Mat& x) {
  Mat y = deployed_of(l) * x;
  y.colwise() += ConstVecMap(l.bias.data(), l.out_features());
  return y;
}

Mat silu(const Mat& x) {
  return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

// d silu / dx = s(x) (1 + x (1 - s(x))).
Mat silu_grad(const Mat& x) {
  return x.unaryExpr([](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return s * (1.0 + v * (1.0 - s));
  });
}

void accumulate_linear(const Linear& l, const Mat& dy, const Mat& x, LayerGrad& g) {
  RowMap(g.deployed.data(), l.out_features(), l.in_features()).noalias() += dy * x.transpose();
  VecMap(g.bias.data(), l.out_features()) += dy.rowwise().sum();
}

Linear make_linear(std::string name, int out, int in, metrics::Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  std::vector<double> w(static_cast<std::size_t>(out) * in);
  for (double& v : w) v = bound * (2.0 * rng.uniform() - 1.0);
  Linear l;
  l.weight = make_tensor(std::move(name), {static_cast<std::size_t>(out),
                                           static_cast<std::size_t>(in)},
                         std::move(w));
  l.bias.resize(out);
  for (double& v : l.bias) v = bound * (2.0 * rng.uniform() - 1.0);
  l.refresh();
  return l;
}

void check_classes(std::span<const int> cls, int null_class, Eigen::Index batch) {
  require(static_cast<Eigen::Index>(cls.size()) == batch,
          "denoiser: class count does not match batch size", ErrorKind::kShapeMismatch);
  for (int c : cls)
    require(c >= 0 && c <= null_class, "denoiser: class id " + std::to_string(c) + " out of range");
}

}  // namespace

// ---------------------------------------------------------------------------

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  require(steps >= 2, "schedule: need at least 2 steps");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "schedule: require 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(steps);
  s.alpha_bars.resize(steps);
  const double a = std::sqrt(beta_start);
  const double b = std::sqrt(beta_end);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double r = a + (static_cast<double>(t) / (steps - 1)) * (b - a);
    s.betas[t] = r * r;
    prod *= 1.0 - s.betas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

Mat forward_diffuse(const Mat& x, std::span<const double> alpha_bars, const Mat& eps) {
  require(x.rows() == eps.rows() && x.cols() == eps.cols() &&
              static_cast<Eigen::Index>(alpha_bars.size()) == x.cols(),
          "forward_diffuse: shape mismatch", ErrorKind::kShapeMismatch);
  Mat z(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double ab = alpha_bars[j];
    z.col(j) = std::sqrt(ab) * x.col(j) + std::sqrt(1.0 - ab) * eps.col(j);
  }
  return z;
}

Mat forward_diffuse(const Mat& x, const std::vector<int>& t, const Mat& eps,
                    const NoiseSchedule& sched) {
  std::vector<double> ab(t.size());
  for (std::size_t j = 0; j < t.size(); ++j) {
    require(t[j] >= 0 && t[j] < sched.steps, "forward_diffuse: step out of range");
    ab[j] = sched.alpha_bars[t[j]];
  }
  return forward_diffuse(x, ab, eps);
}

Vec time_embedding(int t, int dim) {
  require(dim > 0 && dim % 2 == 0, "time_embedding: dimension must be even, got " +
                                       std::to_string(dim));
  const int half = dim / 2;
  Vec e(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
    e[k] = std::sin(t * freq);
    e[half + k] = std::cos(t * freq);
  }
  return e;
}

// ---------------------------------------------------------------------------

Eigen::Vector2d ToyDataset::mode(int c) const {
  const double angle = 2.0 * std::numbers::pi * c / classes;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

void ToyDataset::sample(metrics::Rng& rng, int n, Mat& x, std::vector<int>& cls) const {
  x.resize(2, n);
  cls.resize(n);
  for (int j = 0; j < n; ++j) {
    cls[j] = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    const Eigen::Vector2d m = mode(cls[j]);
    const double nx = rng.normal();
    const double ny = rng.normal();
    x(0, j) = std::clamp(m.x() + sigma * nx, -1.0, 1.0);
    x(1, j) = std::clamp(m.y() + sigma * ny, -1.0, 1.0);
  }
}

int ToyDataset::nearest_mode(double x, double y) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < classes; ++c) {
    const Eigen::Vector2d m = mode(c);
    const double d = (m.x() - x) * (m.x() - x) + (m.y() - y) * (m.y() - y);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

void Linear::refresh() {
  deployed.resize(weight.values.size());
  if (quant) {
    quant::fake_quantize(weight, quant->spec, quant->affine, deployed);
  } else {
    std::copy(weight.values.begin(), weight.values.end(), deployed.begin());
  }
}

void Gradients::add(const Gradients& other) {
  auto add_vec = [](std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    add_vec(layers[l].weight, other.layers[l].weight);
    add_vec(layers[l].deployed, other.layers[l].deployed);
    add_vec(layers[l].bias, other.layers[l].bias);
    add_vec(layers[l].scale, other.layers[l].scale);
  }
  add_vec(class_table, other.class_table);
}

void Gradients::scale_by(double f) {
  auto mul = [f](std::vector<double>& a) {
    for (double& v : a) v *= f;
  };
  for (LayerGrad& g : layers) {
    mul(g.weight);
    mul(g.deployed);
    mul(g.bias);
    mul(g.scale);
  }
  mul(class_table);
}

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  require(cfg.hidden > 0 && cfg.blocks > 0 && cfg.classes > 0 && cfg.data_dim > 0 &&
              cfg.cond_dim > 0,
          "denoiser: dimensions must be positive");
  require(cfg.temb_dim % 2 == 0, "denoiser: time embedding dimension must be even");
  metrics::Rng rng(seed);
  auto add = [&](Linear l, LayerRole r) {
    index_[l.name()] = static_cast<int>(layers_.size());
    layers_.push_back(std::move(l));
    roles_.push_back(r);
    return static_cast<int>(layers_.size()) - 1;
  };
  in_idx_ = add(make_linear("in_proj", cfg.hidden, cfg.data_dim, rng), LayerRole::kInput);
  cond_idx_ = add(make_linear("cond_proj", cfg.hidden, cfg.cond_dim, rng), LayerRole::kCondition);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    tproj_idx_.push_back(add(make_linear(p + "time_proj", cfg.hidden, cfg.temb_dim, rng),
                             LayerRole::kTimeProjection));
    fc1_idx_.push_back(add(make_linear(p + "fc1", cfg.hidden, cfg.hidden, rng), LayerRole::kHidden));
    // Residual branch output starts small.
    fc2_idx_.push_back(
        add(make_linear(p + "fc2", cfg.hidden, cfg.hidden, rng, 0.1), LayerRole::kHidden));
  }
  out_idx_ = add(make_linear("out_proj", cfg.data_dim, cfg.hidden, rng), LayerRole::kOutput);

  std::vector<double> table(static_cast<std::size_t>(cfg.classes + 1) * cfg.cond_dim);
  for (double& v : table) v = rng.normal();
  class_table_ = make_tensor("class_embed",
                             {static_cast<std::size_t>(cfg.classes + 1),
                              static_cast<std::size_t>(cfg.cond_dim)},
                             std::move(table));
  refresh();
}

Linear& Denoiser::layer(const std::string& name) { return layers_.at(layer_index(name)); }

const Linear& Denoiser::layer(const std::string& name) const {
  return layers_.at(layer_index(name));
}

int Denoiser::layer_index(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), "unknown layer '" + name + "'");
  return it->second;
}

std::vector<std::string> Denoiser::quantizable_layers() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (roles_[i] != LayerRole::kTimeProjection) names.push_back(layers_[i].name());
  return names;
}

std::vector<std::string> Denoiser::time_projection_layers() const {
  std::vector<std::string> names;
  for (int i : tproj_idx_) names.push_back(layers_[i].name());
  return names;
}

void Denoiser::refresh() {
  for (Linear& l : layers_) l.refresh();
  ++generation_;
}

Vec Denoiser::time_feature(int block, int t) const {
  require(block >= 0 && block < cfg_.blocks, "time_feature: block out of range");
  const Linear& l = layers_[tproj_idx_[block]];
  const Vec e = time_embedding(t, cfg_.temb_dim);
  Vec f = deployed_of(l) * e;
  f += ConstVecMap(l.bias.data(), l.out_features());
  return f;
}

ForwardResult Denoiser::forward(const Mat& z, std::span<const int> t,
                                std::span<const int> cls) const {
  require(static_cast<Eigen::Index>(t.size()) == z.cols(),
          "denoiser: timestep count does not match batch size", ErrorKind::kShapeMismatch);
  Mat temb(cfg_.temb_dim, z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) temb.col(j) = time_embedding(t[j], cfg_.temb_dim);
  std::vector<Mat> features;
  features.reserve(cfg_.blocks);
  for (int b = 0; b < cfg_.blocks; ++b) features.push_back(affine(layers_[tproj_idx_[b]], temb));
  return run(z, features, cls, std::move(temb));
}

ForwardResult Denoiser::forward_at(const Mat& z, int t, std::span<const int> cls,
                                   const TimeFeatureTable* cache) const {
  std::vector<Mat> features;
  features.reserve(cfg_.blocks);
  for (int b = 0; b < cfg_.blocks; ++b) {
    const Vec f = cache ? cache->at(b, t) : time_feature(b, t);
    features.push_back(f.replicate(1, z.cols()));
  }
  return run(z, features, cls, Mat());
}

ForwardResult Denoiser::forward_features(const Mat& z, const std::vector<Mat>& features,
                                         std::span<const int> cls) const {
  return run(z, features, cls, Mat());
}

ForwardResult Denoiser::run(const Mat& z, const std::vector<Mat>& features,
                            std::span<const int> cls, Mat temb) const {
  require(z.rows() == cfg_.data_dim, "denoiser: input has " + std::to_string(z.rows()) +
                                         " rows, expected " + std::to_string(cfg_.data_dim),
          ErrorKind::kShapeMismatch);
  require(static_cast<int>(features.size()) == cfg_.blocks,
          "denoiser: expected one time feature per block", ErrorKind::kShapeMismatch);
  for (const Mat& f : features)
    require(f.rows() == cfg_.hidden && f.cols() == z.cols(),
            "denoiser: time feature shape mismatch", ErrorKind::kShapeMismatch);
  check_classes(cls, null_class(), z.cols());

  ForwardResult r;
  Tape& tape = r.tape;
  tape.owner = this;
  tape.generation = generation_;
  tape.has_time_embedding = temb.size() > 0;
  tape.temb = std::move(temb);
  tape.z = z;
  tape.cls.assign(cls.begin(), cls.end());
  tape.cond.resize(cfg_.cond_dim, z.cols());
  const ConstRowMap table(class_table_.values.data(), cfg_.classes + 1, cfg_.cond_dim);
  for (Eigen::Index j = 0; j < z.cols(); ++j) tape.cond.col(j) = table.row(cls[j]).transpose();

  Mat h = affine(layers_[in_idx_], z) + affine(layers_[cond_idx_], tape.cond);
  for (int b = 0; b < cfg_.blocks; ++b) {
    h += features[b];
    tape.block_in.push_back(h);
    tape.a1.push_back(silu(h));
    tape.y1.push_back(affine(layers_[fc1_idx_[b]], tape.a1.back()));
    tape.a2.push_back(silu(tape.y1.back()));
    h += affine(layers_[fc2_idx_[b]], tape.a2.back());
    r.activations.push_back(h);
  }
  tape.h_final = h;
  r.eps = affine(layers_[out_idx_], silu(h));
  return r;
}

Gradients Denoiser::zero_gradients() const {
  Gradients g;
  for (const Linear& l : layers_) {
    LayerGrad lg;
    lg.weight.assign(l.param_count(), 0.0);
    lg.deployed.assign(l.param_count(), 0.0);
    lg.bias.assign(l.bias.size(), 0.0);
    if (l.quant) lg.scale.assign(l.weight.channels(), 0.0);
    g.layers.push_back(std::move(lg));
  }
  g.class_table.assign(class_table_.values.size(), 0.0);
  return g;
}

Gradients Denoiser::backward(const Tape& tape, const Mat& grad_eps,
                             const std::vector<Mat>& grad_acts, bool lsq_grad_scale) const {
  require(tape.owner == this && tape.generation == generation_,
          "denoiser backward: stale or foreign forward state");
  const Eigen::Index batch = tape.z.cols();
  require(grad_eps.rows() == cfg_.data_dim && grad_eps.cols() == batch,
          "denoiser backward: grad_eps shape mismatch", ErrorKind::kShapeMismatch);
  require(grad_acts.empty() || static_cast<int>(grad_acts.size()) == cfg_.blocks,
          "denoiser backward: expected one activation gradient per block",
          ErrorKind::kShapeMismatch);

  Gradients g = zero_gradients();
  const Linear& out = layers_[out_idx_];
  const Mat a_out = silu(tape.h_final);
  accumulate_linear(out, grad_eps, a_out, g.layers[out_idx_]);
  Mat dh = (deployed_of(out).transpose() * grad_eps).cwiseProduct(silu_grad(tape.h_final));

  for (int b = cfg_.blocks - 1; b >= 0; --b) {
    if (!grad_acts.empty()) dh += grad_acts[b];
    const Linear& fc2 = layers_[fc2_idx_[b]];
    const Linear& fc1 = layers_[fc1_idx_[b]];
    accumulate_linear(fc2, dh, tape.a2[b], g.layers[fc2_idx_[b]]);
    const Mat dy1 = (deployed_of(fc2).transpose() * dh).cwiseProduct(silu_grad(tape.y1[b]));
    accumulate_linear(fc1, dy1, tape.a1[b], g.layers[fc1_idx_[b]]);
    dh += (deployed_of(fc1).transpose() * dy1).cwiseProduct(silu_grad(tape.block_in[b]));
    // dh is now dL/dF_b as well as dL/d(stream before block b).
    if (tape.has_time_embedding)
      accumulate_linear(layers_[tproj_idx_[b]], dh, tape.temb, g.layers[tproj_idx_[b]]);
  }

  accumulate_linear(layers_[in_idx_], dh, tape.z, g.layers[in_idx_]);
  const Linear& cond = layers_[cond_idx_];
  accumulate_linear(cond, dh, tape.cond, g.layers[cond_idx_]);
  const Mat dcond = deployed_of(cond).transpose() * dh;
  RowMap table(g.class_table.data(), cfg_.classes + 1, cfg_.cond_dim);
  for (Eigen::Index j = 0; j < batch; ++j) table.row(tape.cls[j]) += dcond.col(j).transpose();

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Linear& l = layers_[i];
    LayerGrad& lg = g.layers[i];
    if (l.quant) {
      quant::SteGrads s =
          quant::ste_backward(lg.deployed, l.weight, l.quant->spec, l.quant->affine, lsq_grad_scale);
      lg.weight = std::move(s.grad_w);
      lg.scale = std::move(s.grad_s);
    } else {
      lg.weight = lg.deployed;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

TimeFeatureTable::TimeFeatureTable(std::vector<int> steps, std::vector<std::vector<Vec>> features)
    : steps_(std::move(steps)), features_(std::move(features)) {
  require(steps_.size() == features_.size(), "time feature table: size mismatch",
          ErrorKind::kShapeMismatch);
  for (std::size_t k = 0; k < steps_.size(); ++k) index_[steps_[k]] = k;
}

const Vec& TimeFeatureTable::at(int block, int t) const {
  const auto it = index_.find(t);
  require(it != index_.end(), "time feature table: step " + std::to_string(t) + " not cached");
  return features_[it->second].at(block);
}

std::size_t TimeFeatureTable::scalar_count() const {
  std::size_t n = 0;
  for (const auto& per_step : features_)
    for (const Vec& f : per_step) n += static_cast<std::size_t>(f.size());
  return n;
}

TimeFeatureTable cache_time_features(const Denoiser& model, std::span<const int> steps,
                                     int total_steps) {
  std::vector<int> ids(steps.begin(), steps.end());
  std::vector<std::vector<Vec>> features;
  for (int t : ids) {
    require(t >= 0 && t < total_steps,
            "cache_time_features: step " + std::to_string(t) + " out of range");
    std::vector<Vec> per_block;
    for (int b = 0; b < model.config().blocks; ++b) per_block.push_back(model.time_feature(b, t));
    features.push_back(std::move(per_block));
  }
  return TimeFeatureTable(std::move(ids), std::move(features));
}

// ---------------------------------------------------------------------------

Mat cfg_combine(const Mat& eps_c, const Mat& eps_u, double w) {
  require(eps_c.rows() == eps_u.rows() && eps_c.cols() == eps_u.cols(),
          "cfg_combine: shape mismatch", ErrorKind::kShapeMismatch);
  require(w >= 1.0, "cfg_combine: guidance scale must be >= 1");
  return eps_c + (w - 1.0) * (eps_c - eps_u);
}

std::vector<int> ddim_timesteps(int total_steps, int steps) {
  require(steps >= 1 && steps <= total_steps, "ddim: steps must be in [1, T]");
  std::vector<int> ts;
  for (int k = steps - 1; k >= 0; --k) {
    const long long t = (static_cast<long long>(k) + 1) * total_steps / steps - 1;
    ts.push_back(static_cast<int>(t));
  }
  return ts;
}

Mat ddim_sample(const EpsPredictor& predict, const NoiseSchedule& sched, int steps,
                const Mat& z_init, std::span<const int> cls, int null_class, double guidance,
                std::vector<Mat>* trajectory) {
  const std::vector<int> ts = ddim_timesteps(sched.steps, steps);
  const Eigen::Index n = z_init.cols();
  std::vector<int> stacked_cls(cls.begin(), cls.end());
  stacked_cls.resize(2 * n, null_class);
  Mat z = z_init;
  if (trajectory) trajectory->assign(1, z);
  Mat stacked(z.rows(), 2 * n);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    stacked.leftCols(n) = z;
    stacked.rightCols(n) = z;
    const Mat eps_both = predict(stacked, t, stacked_cls);
    const Mat eps = cfg_combine(eps_both.leftCols(n), eps_both.rightCols(n), guidance);
    const double ab = sched.alpha_bars[t];
    const double ab_prev = k + 1 < ts.size() ? sched.alpha_bars[ts[k + 1]] : 1.0;
    const Mat x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
    if (trajectory) trajectory->push_back(z);
  }
  return z;
}

Mat initial_noise(int data_dim, int n, std::uint64_t seed) {
  metrics::Rng rng(seed);
  Mat z(data_dim, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < data_dim; ++i) z(i, j) = rng.normal();
  return z;
}

Mat sample(const Denoiser& model, const NoiseSchedule& sched, int steps, std::span<const int> cls,
           double guidance, std::uint64_t seed, const TimeFeatureTable* cache,
           std::vector<Mat>* trajectory) {
  const Mat z0 = initial_noise(model.config().data_dim, static_cast<int>(cls.size()), seed);
  auto predict = [&](const Mat& z, int t, std::span<const int> c) {
    return model.forward_at(z, t, c, cache).eps;
  };
  return ddim_sample(predict, sched, steps, z0, cls, model.null_class(), guidance, trajectory);
}

// ---------------------------------------------------------------------------

void write_arrays(const std::filesystem::path& path, std::string_view magic,
                  const std::vector<NamedArray>& arrays, StoreType type) {
  detail::ByteWriter w;
  w.put_raw(magic);
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(arrays.size()));
  for (const NamedArray& a : arrays) {
    w.put_name(a.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(a.shape.size()));
    w.put_array<std::uint32_t>(a.shape);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(type));
    if (type == StoreType::kF32) {
      for (double v : a.values) w.put<float>(static_cast<float>(v));
    } else {
      w.put_array<double>(a.values);
    }
  }
  w.put_crc();
  detail::write_file(path, w.bytes());
}

std::vector<NamedArray> read_arrays(const std::filesystem::path& path, std::string_view magic) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  detail::check_magic(bytes, magic);
  detail::ByteReader r(bytes);
  r.get_raw(magic.size());
  const auto version = r.get<std::uint32_t>();
  require(version == 1, "unsupported checkpoint version " + std::to_string(version),
          ErrorKind::kUnsupportedVersion);
  detail::check_crc(bytes);
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedArray> arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.get_name();
    a.shape = r.get_array<std::uint32_t>(r.get<std::uint8_t>());
    std::size_t n = 1;
    for (std::uint32_t d : a.shape) n *= d;
    const auto type = static_cast<StoreType>(r.get<std::uint8_t>());
    if (type == StoreType::kF32) {
      const std::vector<float> f = r.get_array<float>(n);
      a.values.assign(f.begin(), f.end());
    } else if (type == StoreType::kF64) {
      a.values = r.get_array<double>(n);
    } else {
      fail(ErrorKind::kFormat, "checkpoint: unknown dtype for '" + a.name + "'");
    }
    arrays.push_back(std::move(a));
  }
  require(r.remaining() == 4, "checkpoint: trailing data", ErrorKind::kFormat);
  return arrays;
}

std::vector<NamedArray> export_params(const Denoiser& model) {
  std::vector<NamedArray> out;
  for (const Linear& l : model.layers()) {
    out.push_back({l.name() + ".weight",
                   {static_cast<std::uint32_t>(l.out_features()),
                    static_cast<std::uint32_t>(l.in_features())},
                   l.weight.values});
    out.push_back({l.name() + ".bias", {static_cast<std::uint32_t>(l.out_features())}, l.bias});
  }
  const WeightTensor& t = model.class_table();
  out.push_back({t.name + ".weight",
                 {static_cast<std::uint32_t>(t.shape[0]), static_cast<std::uint32_t>(t.shape[1])},
                 t.values});
  return out;
}

void import_params(Denoiser& model, const std::vector<NamedArray>& arrays) {
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) by_name[a.name] = &a;
  auto take = [&](const std::string& name, std::vector<double>& dst) {
    const auto it = by_name.find(name);
    require(it != by_name.end(), "checkpoint: missing tensor '" + name + "'", ErrorKind::kFormat);
    require(it->second->values.size() == dst.size(),
            "checkpoint: tensor '" + name + "' has wrong size", ErrorKind::kFormat);
    dst = it->second->values;
  };
  for (Linear& l : model.layers()) {
    take(l.name() + ".weight", l.weight.values);
    take(l.name() + ".bias", l.bias);
  }
  take(model.class_table().name + ".weight", model.class_table().values);
  model.refresh();
}

void round_params_to_f32(Denoiser& model) {
  auto round = [](std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  for (Linear& l : model.layers()) {
    round(l.weight.values);
    round(l.bias);
  }
  round(model.class_table().values);
  model.refresh();
}

void save_teacher(const Denoiser& model, const std::filesystem::path& path) {
  write_arrays(path, kTeacherMagic, export_params(model), StoreType::kF32);
}

Denoiser load_teacher(const DenoiserConfig& cfg, const std::filesystem::path& path) {
  Denoiser model(cfg, 0);
  import_params(model, read_arrays(path, kTeacherMagic));
  return model;
}

}  // namespace lobit::toydiff
