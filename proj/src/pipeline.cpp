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

#include "lobit/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "byte_io.hpp"
#include "lobit/error.hpp"

namespace lobit::pipeline {

namespace {

using toydiff::Denoiser;
using toydiff::Mat;

void say(const Context& ctx, const std::string& line) {
  if (ctx.log) ctx.log(line);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::filesystem::path prepare_out(const Context& ctx) {
  std::error_code ec;
  std::filesystem::create_directories(ctx.out, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create output directory " + ctx.out.string() + ": " + ec.message());
  const std::filesystem::path probe = ctx.out / ".lobit_write_probe";
  {
    std::ofstream f(probe, std::ios::binary);
    if (!f) fail(ErrorKind::kIo, "output directory " + ctx.out.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
  return ctx.out;
}

std::filesystem::path need(const Context& ctx, const char* name, const char* producer) {
  const std::filesystem::path p = ctx.out / name;
  if (!std::filesystem::is_regular_file(p))
    fail(ErrorKind::kMissingArtifact, "missing prerequisite artifact " + p.string() +
                                          " (produced by `lobit " + producer + "`)");
  return p;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

std::vector<int> cyclic_classes(int n, int classes) {
  std::vector<int> cls(n);
  for (int j = 0; j < n; ++j) cls[j] = j % classes;
  return cls;
}

std::string log_csv(const std::vector<qat::LogRow>& rows) {
  std::string s = qat::log_csv_header();
  for (const qat::LogRow& r : rows) s += qat::log_csv_row(r);
  return s;
}

Denoiser load_teacher(const Context& ctx) {
  return toydiff::load_teacher(ctx.cfg.model, need(ctx, kTeacher, "train-teacher"));
}

PrecisionRecipe load_recipe(const Context& ctx) {
  return recipe_from_json(read_text(need(ctx, kRecipe, "plan")));
}

qat::EvalReference make_eval_reference(const Context& ctx, const Denoiser& teacher) {
  const RunConfig& c = ctx.cfg;
  return qat::make_reference(teacher, c.data, make_schedule(c), c.sampler.eval_samples,
                             c.sampler.guidance, c.sampler.steps, purpose_seed(c, "eval"));
}

qat::TrainHooks progress_hooks(const Context& ctx, const char* tag) {
  qat::TrainHooks hooks;
  hooks.on_log = [&ctx, tag](const qat::LogRow& r) {
    say(ctx, std::string(tag) + " iter " + std::to_string(r.iter) + " loss_noise " +
                 fmt_short(r.loss_noise) + " loss_feat " + fmt_short(r.loss_feat) + " eval_mse " +
                 fmt_short(r.eval_mse) + " alignment " + fmt_short(r.eval_alignment));
  };
  return hooks;
}

sensitivity::LayerLayout layout_of(const Denoiser& model) {
  sensitivity::LayerLayout layout;
  layout.fixed8[model.input_layer()] = model.layer(model.input_layer()).param_count();
  layout.fixed8[model.output_layer()] = model.layer(model.output_layer()).param_count();
  layout.excluded = model.time_projection_layers();
  return layout;
}

}  // namespace

std::uint64_t purpose_seed(const RunConfig& cfg, const char* purpose, std::uint64_t index) {
  return metrics::derive_seed(cfg.seed, metrics::hash_string(purpose), index);
}

std::vector<double> eval_guidance_scales() {
  std::vector<double> w;
  for (int k = 0; k < 8; ++k) w.push_back(2.5 + k);
  return w;
}

void train_teacher(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const auto sched = make_schedule(c);
  qat::StudentState st{Denoiser(c.model, purpose_seed(c, "teacher.init")), {}, {}};
  st.optimizer = qat::AdamW(st.model);

  qat::TrainConfig tc = c.train;
  tc.lr = c.teacher.lr;
  tc.lr_end = c.teacher.lr_end;
  tc.batch = c.teacher.batch;
  tc.p_drop = c.teacher.p_drop;
  tc.beta_alpha = 1.0;
  tc.beta_beta = 1.0;
  tc.lambda = 0.0;
  tc.eval_every = c.teacher.eval_every;
  tc.seed = purpose_seed(c, "teacher.train");

  const std::vector<int> cls = cyclic_classes(c.sampler.eval_samples, c.data.classes);
  std::vector<qat::LogRow> rows;
  qat::TrainHooks hooks;
  hooks.on_log = [&](const qat::LogRow& r) {
    qat::LogRow row = r;
    const Mat s = toydiff::sample(st.model, sched, c.sampler.steps, cls, c.sampler.guidance,
                                  purpose_seed(c, "teacher.eval"));
    row.eval_alignment = qat::alignment_score(s, cls, c.data);
    rows.push_back(row);
    say(ctx, "teacher iter " + std::to_string(r.iter) + " loss " + fmt_short(r.loss_noise) +
                 " alignment " + fmt_short(row.eval_alignment));
  };
  qat::train_stage(2, nullptr, st, c.data, sched, tc, c.teacher.iters, nullptr, {}, hooks);

  toydiff::round_params_to_f32(st.model);
  st.model.refresh();
  toydiff::save_teacher(st.model, ctx.out / kTeacher);
  write_text(ctx.out / kTeacherMetrics, log_csv(rows));

  const std::vector<int> check = cyclic_classes(c.sampler.sample_count, c.data.classes);
  const Mat s = toydiff::sample(st.model, sched, c.sampler.steps, check, c.sampler.guidance,
                                purpose_seed(c, "teacher.check"));
  say(ctx, "teacher alignment " + fmt_short(qat::alignment_score(s, check, c.data)) + " on " +
               std::to_string(c.sampler.sample_count) + " samples at w=" +
               fmt_short(c.sampler.guidance));
}

void scan(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const Denoiser teacher = load_teacher(ctx);
  sensitivity::PlannerConfig pc = c.planner;
  pc.seed = purpose_seed(c, "scan");
  const auto layers = teacher.quantizable_layers();
  say(ctx, "scan: " + std::to_string(layers.size() * pc.scan_bits.size()) + " candidates, " +
               std::to_string(c.jobs) + " job(s)");
  const sensitivity::ScanResult res =
      sensitivity::run_scan(teacher, layers, pc, c.data, make_schedule(c), c.jobs);
  write_text(ctx.out / kScanRecords, sensitivity::records_to_json(res.records));
  write_text(ctx.out / kScanReport, sensitivity::report_to_json(res.report));
  say(ctx, "scan: wrote " + std::to_string(res.records.size()) + " records");
}

void plan(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const auto records = sensitivity::records_from_json(read_text(need(ctx, kScanRecords, "scan")));
  const Denoiser shape(c.model, 0);
  const sensitivity::PlanResult res =
      sensitivity::plan_precision(records, c.planner, layout_of(shape));
  write_text(ctx.out / kRecipe, recipe_to_json(res.recipe));
  say(ctx, "plan: weight average bits " + fmt_short(res.average_bits) + " at S_o " +
               fmt(res.s_threshold));
}

void qat(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const Denoiser teacher = load_teacher(ctx);
  const PrecisionRecipe recipe = load_recipe(ctx);
  const auto sched = make_schedule(c);
  qat::StudentState st = qat::make_student(teacher, recipe, c.alt_opt_iters);
  const qat::EvalReference ref = make_eval_reference(ctx, teacher);

  const qat::EvalResult init = qat::evaluate(st.model, ref, c.data, sched);
  const double nan = std::nan("");
  std::vector<qat::LogRow> rows{{1, 0, nan, nan, init.mse, init.alignment}};
  say(ctx, "qat: initial eval_mse " + fmt_short(init.mse) + " alignment " +
               fmt_short(init.alignment) + " (teacher " + fmt_short(ref.teacher_alignment) + ")");

  qat::TrainConfig tc = c.train;
  tc.seed = purpose_seed(c, "qat");
  const auto more = qat::train_stage(1, &teacher, st, c.data, sched, tc, c.train.iters_stage1,
                                     &ref, {}, progress_hooks(ctx, "stage1"));
  rows.insert(rows.end(), more.begin(), more.end());
  qat::save_student(st, ctx.out / kStage1);
  write_text(ctx.out / kQatMetrics, log_csv(rows));
}

void finetune(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const Denoiser teacher = load_teacher(ctx);
  const PrecisionRecipe recipe = load_recipe(ctx);
  qat::StudentState st = qat::load_student(c.model, recipe, need(ctx, kStage1, "qat"));
  const auto sched = make_schedule(c);
  const qat::EvalReference ref = make_eval_reference(ctx, teacher);

  qat::TrainConfig tc = c.train;
  tc.lambda = 0.0;
  tc.seed = purpose_seed(c, "qat");
  const auto rows = qat::train_stage(2, &teacher, st, c.data, sched, tc, c.train.iters_stage2,
                                     &ref, {}, progress_hooks(ctx, "stage2"));
  qat::save_student(st, ctx.out / kStage2);
  write_text(ctx.out / kFinetuneMetrics, log_csv(rows));
  const qat::EvalResult e = qat::evaluate(st.model, ref, c.data, sched);
  say(ctx, "finetune: alignment " + fmt_short(e.alignment) + " (teacher " +
               fmt_short(ref.teacher_alignment) + "), eval_mse " + fmt_short(e.mse));
}

bitpack::PackedModel pack_student(const qat::StudentState& student, const RunConfig& cfg) {
  const Denoiser& m = student.model;
  bitpack::PackedModel pm;
  const auto excluded = m.time_projection_layers();
  auto is_excluded = [&](const std::string& n) {
    return std::find(excluded.begin(), excluded.end(), n) != excluded.end();
  };
  for (const toydiff::Linear& l : m.layers()) {
    if (is_excluded(l.name())) continue;
    if (l.quant) {
      quant::ChannelAffine affine = l.quant->affine;
      for (double& s : affine.scales) s = static_cast<double>(static_cast<float>(s));
      pm.layers.push_back(bitpack::pack_layer(quant::quantize(l.weight, l.quant->spec, affine)));
    } else {
      std::vector<std::uint32_t> shape(l.weight.shape.begin(), l.weight.shape.end());
      pm.fp32_tensors.push_back(
          {l.name() + ".weight", shape, {l.weight.values.begin(), l.weight.values.end()}});
    }
    pm.fp32_tensors.push_back({l.name() + ".bias",
                               {static_cast<std::uint32_t>(l.bias.size())},
                               {l.bias.begin(), l.bias.end()}});
  }
  const WeightTensor& table = m.class_table();
  pm.fp32_tensors.push_back({"class_embed.weight",
                             {table.shape.begin(), table.shape.end()},
                             {table.values.begin(), table.values.end()}});

  const std::vector<int> steps = toydiff::ddim_timesteps(cfg.schedule_steps, cfg.sampler.steps);
  const toydiff::TimeFeatureTable cache = toydiff::cache_time_features(m, steps, cfg.schedule_steps);
  bitpack::TimeFeatureSection& tf = pm.time_features;
  tf.steps.assign(steps.begin(), steps.end());
  tf.blocks = static_cast<std::uint32_t>(m.config().blocks);
  tf.dim = static_cast<std::uint32_t>(m.config().hidden);
  for (const auto& per_step : cache.features())
    for (const toydiff::Vec& f : per_step)
      for (Eigen::Index i = 0; i < f.size(); ++i) tf.values.push_back(bitpack::float_to_half_bits(f[i]));
  return pm;
}

Deployed load_deployed(const bitpack::PackedModel& packed, const RunConfig& cfg) {
  Deployed d{Denoiser(cfg.model, 0), {}};
  Denoiser& m = d.model;
  for (toydiff::Linear& l : m.layers()) {
    std::fill(l.weight.values.begin(), l.weight.values.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  for (const bitpack::PackedLayer& pl : packed.layers) {
    toydiff::Linear& l = m.layer(pl.name);
    const WeightTensor w = quant::dequantize(bitpack::unpack_layer(pl));
    require(w.values.size() == l.weight.values.size(),
            "packed layer '" + pl.name + "' does not match the model", ErrorKind::kFormat);
    l.weight.values = w.values;
  }
  for (const bitpack::FloatTensor& t : packed.fp32_tensors) {
    std::vector<double>* target = nullptr;
    const auto dot = t.name.rfind('.');
    const std::string base = t.name.substr(0, dot);
    const std::string field = dot == std::string::npos ? "" : t.name.substr(dot + 1);
    if (t.name == "class_embed.weight") {
      target = &m.class_table().values;
    } else if (field == "weight") {
      target = &m.layer(base).weight.values;
    } else if (field == "bias") {
      target = &m.layer(base).bias;
    } else {
      fail(ErrorKind::kFormat, "unexpected tensor '" + t.name + "' in packed model");
    }
    require(target->size() == t.values.size(),
            "packed tensor '" + t.name + "' does not match the model", ErrorKind::kFormat);
    target->assign(t.values.begin(), t.values.end());
  }
  m.refresh();

  const bitpack::TimeFeatureSection& tf = packed.time_features;
  require(static_cast<int>(tf.blocks) == cfg.model.blocks &&
              static_cast<int>(tf.dim) == cfg.model.hidden,
          "packed time features do not match the model", ErrorKind::kFormat);
  std::vector<std::vector<toydiff::Vec>> features;
  std::size_t k = 0;
  for (std::size_t s = 0; s < tf.steps.size(); ++s) {
    std::vector<toydiff::Vec> per_block;
    for (std::uint32_t b = 0; b < tf.blocks; ++b) {
      toydiff::Vec f(tf.dim);
      for (std::uint32_t i = 0; i < tf.dim; ++i) f[i] = bitpack::half_bits_to_double(tf.values[k++]);
      per_block.push_back(std::move(f));
    }
    features.push_back(std::move(per_block));
  }
  d.features = toydiff::TimeFeatureTable({tf.steps.begin(), tf.steps.end()}, std::move(features));
  return d;
}

void pack(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const PrecisionRecipe recipe = load_recipe(ctx);
  const qat::StudentState st = qat::load_student(c.model, recipe, need(ctx, kStage2, "finetune"));
  const bitpack::PackedModel pm = pack_student(st, c);
  const std::filesystem::path path = ctx.out / kPacked;
  bitpack::write_model(pm, path);
  const std::size_t size = std::filesystem::file_size(path);
  const std::size_t predicted = bitpack::predicted_file_size(pm);
  require(size == predicted,
          "pack: file size " + std::to_string(size) + " differs from layout prediction " +
              std::to_string(predicted),
          ErrorKind::kFormat);

  std::map<std::string, std::size_t> sizes;
  for (const toydiff::Linear& l : st.model.layers()) sizes[l.name()] = l.param_count();
  const double avg = bitpack::average_bits(recipe, sizes, pm.time_features.values.size());
  say(ctx, "pack: " + std::to_string(size) + " bytes, average bits incl. time features " +
               fmt_short(avg));
}

void sample(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const Deployed d = load_deployed(bitpack::read_model(need(ctx, kPacked, "pack")), c);
  const std::vector<int> cls = cyclic_classes(c.sampler.sample_count, c.data.classes);
  const Mat s = toydiff::sample(d.model, make_schedule(c), c.sampler.steps, cls,
                                c.sampler.guidance, purpose_seed(c, "sample"), &d.features);
  std::string text = "index,class,x,y\n";
  for (Eigen::Index j = 0; j < s.cols(); ++j)
    text += std::to_string(j) + "," + std::to_string(cls[j]) + "," + fmt(s(0, j)) + "," +
            fmt(s(1, j)) + "\n";
  write_text(ctx.out / kSamples, text);
  say(ctx, "sample: alignment " + fmt_short(qat::alignment_score(s, cls, c.data)) + " on " +
               std::to_string(s.cols()) + " samples");
}

void eval(const Context& ctx) {
  const RunConfig& c = ctx.cfg;
  prepare_out(ctx);
  const Denoiser teacher = load_teacher(ctx);
  const Deployed d = load_deployed(bitpack::read_model(need(ctx, kPacked, "pack")), c);
  const auto sched = make_schedule(c);
  const std::vector<int> cls = cyclic_classes(c.sampler.eval_samples, c.data.classes);
  const std::uint64_t seed = purpose_seed(c, "eval.sweep");
  std::string text = "guidance,mse,psnr,alignment,teacher_alignment\n";
  for (double w : eval_guidance_scales()) {
    const Mat ref = toydiff::sample(teacher, sched, c.sampler.steps, cls, w, seed);
    const Mat got = toydiff::sample(d.model, sched, c.sampler.steps, cls, w, seed, &d.features);
    const double mse = metrics::mse({got.data(), static_cast<std::size_t>(got.size())},
                                    {ref.data(), static_cast<std::size_t>(ref.size())});
    const double align = qat::alignment_score(got, cls, c.data);
    text += fmt(w) + "," + fmt(mse) + "," + fmt(metrics::psnr_from_mse(mse)) + "," + fmt(align) +
            "," + fmt(qat::alignment_score(ref, cls, c.data)) + "\n";
    say(ctx, "eval: w=" + fmt_short(w) + " mse " + fmt_short(mse) + " alignment " +
                 fmt_short(align));
  }
  write_text(ctx.out / kEval, text);
}

void run_all(const Context& ctx) {
  train_teacher(ctx);
  scan(ctx);
  plan(ctx);
  qat(ctx);
  finetune(ctx);
  pack(ctx);
  sample(ctx);
  eval(ctx);
}

void run_command(const std::string& name, const Context& ctx) {
  static const std::map<std::string, void (*)(const Context&)> commands = {
      {"train-teacher", train_teacher}, {"scan", scan},     {"plan", plan},
      {"qat", qat},                     {"finetune", finetune}, {"pack", pack},
      {"sample", sample},               {"eval", eval},     {"all", run_all}};
  const auto it = commands.find(name);
  if (it == commands.end()) fail(ErrorKind::kConfig, "unknown command '" + name + "'");
  it->second(ctx);
}

}  // namespace lobit::pipeline
