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

#include "lobit/qat_train.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "lobit/error.hpp"

namespace lobit::qat {

namespace {

void check_finite(double v, const std::string& where) {
  if (!std::isfinite(v))
    fail(ErrorKind::kNumeric, where + ": loss is not finite (" + std::to_string(v) +
                                  "); check learning rate and scale initialization");
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  require(cfg.p_drop >= 0.0 && cfg.p_drop <= 1.0, "train config: p_drop must be in [0, 1]",
          ErrorKind::kConfig);
  require(cfg.beta_alpha > 0.0 && cfg.beta_beta > 0.0,
          "train config: beta_alpha and beta_beta must be positive", ErrorKind::kConfig);
  require(cfg.lambda >= 0.0, "train config: lambda must be >= 0", ErrorKind::kConfig);
  require(cfg.lr > 0.0, "train config: lr must be positive", ErrorKind::kConfig);
  require(cfg.lr_end >= 0.0, "train config: lr_end must be >= 0", ErrorKind::kConfig);
  require(cfg.batch >= 1, "train config: batch must be >= 1", ErrorKind::kConfig);
  require(cfg.iters_stage1 >= 0 && cfg.iters_stage2 >= 0,
          "train config: iteration counts must be >= 0", ErrorKind::kConfig);
  require(cfg.eval_every >= 1, "train config: eval_every must be >= 1", ErrorKind::kConfig);
}

double sample_beta(double alpha, double beta, metrics::Rng& rng) {
  require(alpha > 0.0 && beta > 0.0, "sample_beta: parameters must be positive");
  if (beta == 1.0) return std::pow(rng.uniform(), 1.0 / alpha);
  if (alpha == 1.0) return 1.0 - std::pow(rng.uniform(), 1.0 / beta);
  // Johnk: accept X = U^(1/a), Y = V^(1/b) when X + Y <= 1.
  for (;;) {
    const double u = 1.0 - rng.uniform();
    const double v = 1.0 - rng.uniform();
    const double log_x = std::log(u) / alpha;
    const double log_y = std::log(v) / beta;
    const double x = std::exp(log_x);
    const double y = std::exp(log_y);
    const double s = x + y;
    if (s <= 1.0 && s > 0.0) return x / s;
  }
}

int beta_timestep_sample(const TrainConfig& cfg, metrics::Rng& rng, int total_steps) {
  require(total_steps >= 1, "beta_timestep_sample: T must be >= 1");
  const double u = sample_beta(cfg.beta_alpha, cfg.beta_beta, rng);
  const int t = static_cast<int>(std::floor(u * total_steps));
  return std::min(t, total_steps - 1);
}

Batch make_batch(const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                 const TrainConfig& cfg, int null_class, metrics::Rng& rng) {
  Batch b;
  data.sample(rng, cfg.batch, b.x, b.cls);
  b.t.resize(cfg.batch);
  for (int& t : b.t) t = beta_timestep_sample(cfg, rng, sched.steps);
  b.eps.resize(b.x.rows(), cfg.batch);
  for (int j = 0; j < cfg.batch; ++j)
    for (Eigen::Index i = 0; i < b.x.rows(); ++i) b.eps(i, j) = rng.normal();
  for (int& c : b.cls) {
    if (rng.uniform() < cfg.p_drop) {
      c = null_class;
      ++b.dropped;
    }
  }
  b.z = toydiff::forward_diffuse(b.x, b.t, b.eps, sched);
  return b;
}

double match_loss(const Mat& target, const Mat& pred, LossNorm norm, Mat* grad_pred) {
  require(target.rows() == pred.rows() && target.cols() == pred.cols(),
          "match_loss: shape mismatch", ErrorKind::kShapeMismatch);
  const double n = static_cast<double>(pred.size());
  const Mat diff = pred - target;
  if (norm == LossNorm::kL2) {
    if (grad_pred) *grad_pred = (2.0 / n) * diff;
    return diff.squaredNorm() / n;
  }
  if (grad_pred) *grad_pred = diff.unaryExpr([n](double d) {
    return d > 0.0 ? 1.0 / n : (d < 0.0 ? -1.0 / n : 0.0);
  });
  return diff.cwiseAbs().sum() / n;
}

LossResult stage1_loss(const Denoiser& teacher, const Denoiser& student, const Batch& batch,
                       const TrainConfig& cfg) {
  const auto t_out = teacher.forward(batch.z, batch.t, batch.cls);
  const auto s_out = student.forward(batch.z, batch.t, batch.cls);
  LossResult r;
  Mat grad_eps;
  r.loss_noise = match_loss(t_out.eps, s_out.eps, cfg.norm, &grad_eps);
  std::vector<Mat> grad_acts;
  if (cfg.lambda > 0.0) {
    for (std::size_t b = 0; b < s_out.activations.size(); ++b) {
      Mat g;
      r.loss_feat += match_loss(t_out.activations[b], s_out.activations[b], cfg.norm, &g);
      grad_acts.push_back(cfg.lambda * g);
    }
  }
  r.loss = r.loss_noise + cfg.lambda * r.loss_feat;
  r.grads = student.backward(s_out.tape, grad_eps, grad_acts, cfg.lsq_grad_scale);
  return r;
}

LossResult stage1_loss(const Denoiser& teacher, const Denoiser& student,
                       const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                       const TrainConfig& cfg, metrics::Rng& rng) {
  return stage1_loss(teacher, student, make_batch(data, sched, cfg, student.null_class(), rng), cfg);
}

LossResult stage2_loss(const Denoiser& student, const Batch& batch, const TrainConfig& cfg) {
  const auto out = student.forward(batch.z, batch.t, batch.cls);
  LossResult r;
  Mat grad_eps;
  r.loss_noise = match_loss(batch.eps, out.eps, cfg.norm, &grad_eps);
  r.loss = r.loss_noise;
  r.grads = student.backward(out.tape, grad_eps, {}, cfg.lsq_grad_scale);
  return r;
}

LossResult stage2_loss(const Denoiser& student, const toydiff::ToyDataset& data,
                       const toydiff::NoiseSchedule& sched, const TrainConfig& cfg,
                       metrics::Rng& rng) {
  return stage2_loss(student, make_batch(data, sched, cfg, student.null_class(), rng), cfg);
}

// ---------------------------------------------------------------------------

AdamW::AdamW(const Denoiser& model) {
  for (const toydiff::Linear& l : model.layers()) {
    moments_.push_back({std::vector<float>(l.param_count()), std::vector<float>(l.param_count())});
    moments_.push_back({std::vector<float>(l.bias.size()), std::vector<float>(l.bias.size())});
    const std::size_t nch = l.quant ? l.weight.channels() : 0;
    moments_.push_back({std::vector<float>(nch), std::vector<float>(nch)});
  }
  const std::size_t n = model.class_table().values.size();
  moments_.push_back({std::vector<float>(n), std::vector<float>(n)});
}

void AdamW::step(Denoiser& model, const Gradients& grads, const TrainConfig& cfg,
                 const ParamFilter& filter) {
  require(moments_.size() == model.layers().size() * 3 + 1,
          "AdamW: optimizer state does not match model");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t_));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, Moments& mo,
                    double decay, double floor) {
    require(p.size() == g.size() && p.size() == mo.m.size(),
            "AdamW: parameter/gradient size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double m = cfg.adam_beta1 * mo.m[i] + (1.0 - cfg.adam_beta1) * g[i];
      const double v = cfg.adam_beta2 * mo.v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      mo.m[i] = static_cast<float>(m);
      mo.v[i] = static_cast<float>(v);
      const double mhat = static_cast<double>(mo.m[i]) / bc1;
      const double vhat = static_cast<double>(mo.v[i]) / bc2;
      p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + decay * p[i]);
      p[i] = std::max(p[i], floor);
    }
  };
  constexpr double kNoFloor = -std::numeric_limits<double>::infinity();
  auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    toydiff::Linear& layer = layers[l];
    if (!filter.trains(layer.name())) continue;
    update(layer.weight.values, grads.layers[l].weight, moments_[3 * l], cfg.weight_decay,
           kNoFloor);
    update(layer.bias, grads.layers[l].bias, moments_[3 * l + 1], 0.0, kNoFloor);
    if (layer.quant)
      update(layer.quant->affine.scales, grads.layers[l].scale, moments_[3 * l + 2], 0.0,
             quant::kScaleFloor);
  }
  if (filter.class_table)
    update(model.class_table().values, grads.class_table, moments_.back(), 0.0, kNoFloor);
  model.refresh();
}

// ---------------------------------------------------------------------------

StudentState make_student(const Denoiser& teacher, const PrecisionRecipe& recipe,
                          int alt_opt_iters) {
  StudentState s{teacher, {}, recipe};
  for (const auto& [name, bits] : recipe.layers) {
    toydiff::Linear& l = s.model.layer(name);
    const quant::QuantSpec spec{bits, recipe.balanced, 0};
    const quant::ChannelAffine init = quant::minmax_init(l.weight, spec);
    l.quant = toydiff::LayerQuant{spec, quant::alt_opt_init(l.weight, spec, init, alt_opt_iters)};
  }
  for (const std::string& name : recipe.fixed8) {
    toydiff::Linear& l = s.model.layer(name);
    const quant::QuantSpec spec{8, false, 0};
    l.quant = toydiff::LayerQuant{spec, quant::minmax_init(l.weight, spec)};
  }
  s.model.refresh();
  s.optimizer = AdamW(s.model);
  return s;
}

void save_student(const StudentState& s, const std::filesystem::path& path) {
  std::vector<toydiff::NamedArray> arrays = toydiff::export_params(s.model);
  for (const toydiff::Linear& l : s.model.layers()) {
    if (!l.quant) continue;
    const auto nch = static_cast<std::uint32_t>(l.quant->affine.channels());
    arrays.push_back({l.name() + ".qspec",
                      {3},
                      {static_cast<double>(l.quant->spec.bits), l.quant->spec.balanced ? 1.0 : 0.0,
                       static_cast<double>(l.quant->spec.channel_axis)}});
    arrays.push_back({l.name() + ".scale", {nch}, l.quant->affine.scales});
    arrays.push_back({l.name() + ".zero",
                      {nch},
                      {l.quant->affine.zero_offsets.begin(), l.quant->affine.zero_offsets.end()}});
  }
  const auto& moments = s.optimizer.moments();
  arrays.push_back({"adam.step", {1}, {static_cast<double>(s.optimizer.steps())}});
  for (std::size_t k = 0; k < moments.size(); ++k) {
    const auto n = static_cast<std::uint32_t>(moments[k].m.size());
    arrays.push_back({"adam.m." + std::to_string(k), {n}, {moments[k].m.begin(), moments[k].m.end()}});
    arrays.push_back({"adam.v." + std::to_string(k), {n}, {moments[k].v.begin(), moments[k].v.end()}});
  }
  toydiff::write_arrays(path, "BFS1", arrays, toydiff::StoreType::kF64);
}

StudentState load_student(const toydiff::DenoiserConfig& cfg, const PrecisionRecipe& recipe,
                          const std::filesystem::path& path) {
  const std::vector<toydiff::NamedArray> arrays = toydiff::read_arrays(path, "BFS1");
  std::map<std::string, const toydiff::NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  StudentState s{Denoiser(cfg, 0), {}, recipe};
  toydiff::import_params(s.model, arrays);
  for (toydiff::Linear& l : s.model.layers()) {
    const auto it = by_name.find(l.name() + ".qspec");
    if (it == by_name.end()) continue;
    const auto& q = it->second->values;
    require(q.size() == 3, "student checkpoint: bad qspec for '" + l.name() + "'",
            ErrorKind::kFormat);
    toydiff::LayerQuant lq;
    lq.spec = {static_cast<int>(q[0]), q[1] != 0.0, static_cast<std::size_t>(q[2])};
    lq.affine.scales = by_name.at(l.name() + ".scale")->values;
    for (double z : by_name.at(l.name() + ".zero")->values)
      lq.affine.zero_offsets.push_back(static_cast<std::int32_t>(z));
    l.quant = std::move(lq);
  }
  s.model.refresh();
  s.optimizer = AdamW(s.model);
  auto& moments = s.optimizer.moments();
  for (std::size_t k = 0; k < moments.size(); ++k) {
    const auto& m = by_name.at("adam.m." + std::to_string(k))->values;
    const auto& v = by_name.at("adam.v." + std::to_string(k))->values;
    require(m.size() == moments[k].m.size() && v.size() == moments[k].v.size(),
            "student checkpoint: optimizer state does not match model", ErrorKind::kFormat);
    moments[k].m.assign(m.begin(), m.end());
    moments[k].v.assign(v.begin(), v.end());
  }
  s.optimizer.set_steps(static_cast<std::int64_t>(by_name.at("adam.step")->values.at(0)));
  return s;
}

// ---------------------------------------------------------------------------

double alignment_score(const Mat& samples, const std::vector<int>& cls,
                       const toydiff::ToyDataset& data) {
  require(samples.cols() > 0, "alignment_score: empty sample set");
  require(static_cast<Eigen::Index>(cls.size()) == samples.cols(),
          "alignment_score: label count mismatch", ErrorKind::kShapeMismatch);
  int hits = 0;
  for (Eigen::Index j = 0; j < samples.cols(); ++j)
    if (data.nearest_mode(samples(0, j), samples(1, j)) == cls[j]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(samples.cols());
}

EvalReference make_reference(const Denoiser& teacher, const toydiff::ToyDataset& data,
                             const toydiff::NoiseSchedule& sched, int n, double guidance,
                             int steps, std::uint64_t seed) {
  EvalReference ref;
  ref.seed = seed;
  ref.guidance = guidance;
  ref.steps = steps;
  ref.cls.resize(n);
  for (int j = 0; j < n; ++j) ref.cls[j] = j % data.classes;
  ref.teacher_samples = toydiff::sample(teacher, sched, steps, ref.cls, guidance, seed);
  ref.teacher_alignment = alignment_score(ref.teacher_samples, ref.cls, data);
  return ref;
}

EvalResult evaluate(const Denoiser& model, const EvalReference& ref,
                    const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched) {
  const Mat s = toydiff::sample(model, sched, ref.steps, ref.cls, ref.guidance, ref.seed);
  EvalResult r;
  const std::span<const double> a(s.data(), static_cast<std::size_t>(s.size()));
  const std::span<const double> b(ref.teacher_samples.data(),
                                  static_cast<std::size_t>(ref.teacher_samples.size()));
  r.mse = metrics::mse(a, b);
  r.psnr = metrics::psnr_from_mse(r.mse);
  r.alignment = alignment_score(s, ref.cls, data);
  return r;
}

std::string log_csv_header() { return "stage,iter,loss_noise,loss_feat,eval_mse,eval_alignment\n"; }

std::string log_csv_row(const LogRow& r) {
  std::ostringstream os;
  os << r.stage << ',' << r.iter << ',' << format_double(r.loss_noise) << ','
     << format_double(r.loss_feat) << ',' << format_double(r.eval_mse) << ','
     << format_double(r.eval_alignment) << '\n';
  return os.str();
}

std::vector<LogRow> train_stage(int stage, const Denoiser* teacher, StudentState& student,
                                const toydiff::ToyDataset& data,
                                const toydiff::NoiseSchedule& sched, const TrainConfig& cfg,
                                int iters, const EvalReference* ref, const ParamFilter& filter,
                                const TrainHooks& hooks) {
  validate(cfg);
  require(stage == 1 || stage == 2, "train: stage must be 1 or 2");
  require(stage == 2 || teacher != nullptr, "train: stage 1 needs a teacher");
  metrics::Rng rng(metrics::derive_seed(cfg.seed, metrics::hash_string("train"),
                                        static_cast<std::uint64_t>(stage)));
  TrainConfig step_cfg = cfg;
  std::vector<LogRow> rows;
  double sum_noise = 0.0, sum_feat = 0.0;
  int window = 0;
  for (int it = 1; it <= iters; ++it) {
    const Batch batch = make_batch(data, sched, cfg, student.model.null_class(), rng);
    LossResult r = stage == 1 ? stage1_loss(*teacher, student.model, batch, cfg)
                              : stage2_loss(student.model, batch, cfg);
    check_finite(r.loss, "stage " + std::to_string(stage) + " iter " + std::to_string(it));
    if (cfg.lr_end > 0.0 && iters > 1) {
      step_cfg.lr = cfg.lr + (cfg.lr_end - cfg.lr) * static_cast<double>(it - 1) / (iters - 1);
    }
    student.optimizer.step(student.model, r.grads, step_cfg, filter);
    if (hooks.on_batch) hooks.on_batch(stage, it, batch);
    sum_noise += r.loss_noise;
    sum_feat += r.loss_feat;
    ++window;
    if (it % cfg.eval_every == 0 || it == iters) {
      LogRow row{stage, it, sum_noise / window, sum_feat / window,
                 std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN()};
      if (ref) {
        const EvalResult e = evaluate(student.model, *ref, data, sched);
        row.eval_mse = e.mse;
        row.eval_alignment = e.alignment;
      }
      rows.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
      sum_noise = sum_feat = 0.0;
      window = 0;
    }
  }
  return rows;
}

std::vector<LogRow> train(const Denoiser& teacher, StudentState& student,
                          const toydiff::ToyDataset& data, const toydiff::NoiseSchedule& sched,
                          const TrainConfig& cfg, const EvalReference* ref,
                          const TrainHooks& hooks) {
  std::vector<LogRow> rows =
      train_stage(1, &teacher, student, data, sched, cfg, cfg.iters_stage1, ref, {}, hooks);
  TrainConfig stage2 = cfg;
  stage2.lambda = 0.0;
  const std::vector<LogRow> more =
      train_stage(2, &teacher, student, data, sched, stage2, cfg.iters_stage2, ref, {}, hooks);
  rows.insert(rows.end(), more.begin(), more.end());
  return rows;
}

std::vector<double> profile_timestep_error(const Denoiser& teacher, const Denoiser& student,
                                           const Mat& x, const std::vector<int>& cls,
                                           const std::vector<int>& t_grid,
                                           const toydiff::NoiseSchedule& sched,
                                           std::uint64_t seed) {
  const Mat eps = toydiff::initial_noise(static_cast<int>(x.rows()), static_cast<int>(x.cols()), seed);
  std::vector<double> out;
  out.reserve(t_grid.size());
  for (int t : t_grid) {
    require(t >= 0 && t < sched.steps, "profile: step " + std::to_string(t) + " out of range");
    const std::vector<int> ts(x.cols(), t);
    const Mat z = toydiff::forward_diffuse(x, ts, eps, sched);
    const Mat diff = teacher.forward(z, ts, cls).eps - student.forward(z, ts, cls).eps;
    const double ab = sched.alpha_bars[t];
    const double weight = (1.0 - ab) / ab;
    out.push_back(weight * diff.colwise().squaredNorm().sum() / static_cast<double>(x.cols()));
  }
  return out;
}

}  // namespace lobit::qat
