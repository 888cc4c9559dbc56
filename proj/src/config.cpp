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

#include "lobit/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "lobit/error.hpp"

namespace lobit {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  fail(ErrorKind::kConfig,
       "config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text, const char* expected) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) bad_value(key, text, expected);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  bad_value(key, text, "true or false");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text, const char* expected) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    out.push_back(parse_number<T>(key, b == std::string::npos ? "" : item.substr(b, e - b + 1),
                                  expected));
  }
  if (out.empty()) bad_value(key, text, expected);
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>) {
      s += fmt(v[i]);
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

std::string fmt_optional(const std::optional<double>& v) { return v ? fmt(*v) : "none"; }

std::optional<double> parse_optional(const std::string& key, const std::string& text) {
  if (text == "none") return std::nullopt;
  return parse_number<double>(key, text, "a number or none");
}

#define LOBIT_INT(sec, name, member)                                              \
  Field {                                                                         \
    sec, name, [](const RunConfig& c) { return std::to_string(c.member); },       \
        [](RunConfig& c, const std::string& v) {                                  \
          c.member = parse_number<int>(sec "." name, v, "an integer");            \
        }                                                                         \
  }
#define LOBIT_DOUBLE(sec, name, member)                                           \
  Field {                                                                         \
    sec, name, [](const RunConfig& c) { return fmt(c.member); },                  \
        [](RunConfig& c, const std::string& v) {                                  \
          c.member = parse_number<double>(sec "." name, v, "a number");           \
        }                                                                         \
  }
#define LOBIT_BOOL(sec, name, member)                                                     \
  Field {                                                                                 \
    sec, name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(sec "." name, v); }  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      LOBIT_INT("data", "classes", data.classes),
      LOBIT_DOUBLE("data", "radius", data.radius),
      LOBIT_DOUBLE("data", "sigma", data.sigma),

      LOBIT_INT("model", "hidden", model.hidden),
      LOBIT_INT("model", "blocks", model.blocks),
      LOBIT_INT("model", "temb_dim", model.temb_dim),
      LOBIT_INT("model", "cond_dim", model.cond_dim),

      LOBIT_INT("schedule", "steps", schedule_steps),
      LOBIT_DOUBLE("schedule", "beta_start", beta_start),
      LOBIT_DOUBLE("schedule", "beta_end", beta_end),

      LOBIT_INT("sampler", "steps", sampler.steps),
      LOBIT_DOUBLE("sampler", "guidance", sampler.guidance),
      LOBIT_INT("sampler", "sample_count", sampler.sample_count),
      LOBIT_INT("sampler", "eval_samples", sampler.eval_samples),

      LOBIT_INT("teacher", "iters", teacher.iters),
      LOBIT_DOUBLE("teacher", "lr", teacher.lr),
      LOBIT_DOUBLE("teacher", "lr_end", teacher.lr_end),
      LOBIT_INT("teacher", "batch", teacher.batch),
      LOBIT_DOUBLE("teacher", "p_drop", teacher.p_drop),
      LOBIT_INT("teacher", "eval_every", teacher.eval_every),

      LOBIT_DOUBLE("train", "lr", train.lr),
      LOBIT_DOUBLE("train", "lr_end", train.lr_end),
      LOBIT_INT("train", "batch", train.batch),
      LOBIT_INT("train", "iters_stage1", train.iters_stage1),
      LOBIT_INT("train", "iters_stage2", train.iters_stage2),
      LOBIT_DOUBLE("train", "lambda", train.lambda),
      LOBIT_DOUBLE("train", "p_drop", train.p_drop),
      LOBIT_DOUBLE("train", "beta_alpha", train.beta_alpha),
      LOBIT_DOUBLE("train", "beta_beta", train.beta_beta),
      Field{"train", "norm",
            [](const RunConfig& c) {
              return std::string(c.train.norm == qat::LossNorm::kL2 ? "l2" : "l1");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "l2") {
                c.train.norm = qat::LossNorm::kL2;
              } else if (v == "l1") {
                c.train.norm = qat::LossNorm::kL1;
              } else {
                bad_value("train.norm", v, "l2 or l1");
              }
            }},
      LOBIT_BOOL("train", "lsq_grad_scale", train.lsq_grad_scale),
      LOBIT_DOUBLE("train", "weight_decay", train.weight_decay),
      LOBIT_INT("train", "eval_every", train.eval_every),
      LOBIT_INT("train", "alt_opt_iters", alt_opt_iters),

      LOBIT_DOUBLE("planner", "eta", planner.eta),
      Field{"planner", "s_threshold",
            [](const RunConfig& c) { return fmt_optional(c.planner.s_threshold); },
            [](RunConfig& c, const std::string& v) {
              c.planner.s_threshold = parse_optional("planner.s_threshold", v);
            }},
      Field{"planner", "target_avg_bits",
            [](const RunConfig& c) { return fmt_optional(c.planner.target_avg_bits); },
            [](RunConfig& c, const std::string& v) {
              c.planner.target_avg_bits = parse_optional("planner.target_avg_bits", v);
            }},
      Field{"planner", "bump_percentiles",
            [](const RunConfig& c) { return fmt_list(c.planner.bump_percentiles); },
            [](RunConfig& c, const std::string& v) {
              c.planner.bump_percentiles =
                  parse_list<double>("planner.bump_percentiles", v, "a list of numbers");
            }},
      LOBIT_INT("planner", "default_bits", planner.default_bits),
      Field{"planner", "scan_bits",
            [](const RunConfig& c) { return fmt_list(c.planner.scan_bits); },
            [](RunConfig& c, const std::string& v) {
              c.planner.scan_bits = parse_list<int>("planner.scan_bits", v, "a list of integers");
            }},
      LOBIT_INT("planner", "qat_iters", planner.qat_iters),
      LOBIT_DOUBLE("planner", "qat_lr", planner.qat_lr),
      LOBIT_INT("planner", "qat_batch", planner.qat_batch),
      LOBIT_BOOL("planner", "train_all_layers", planner.train_all_layers),
      LOBIT_INT("planner", "eval_samples", planner.eval_samples),

      Field{"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) {
              c.seed = parse_number<std::uint64_t>("run.seed", v, "an unsigned integer");
            }},
      LOBIT_INT("run", "jobs", jobs),
      Field{"run", "out", [](const RunConfig& c) { return c.out; },
            [](RunConfig& c, const std::string& v) { c.out = v; }},
  };
  return table;
}

#undef LOBIT_INT
#undef LOBIT_DOUBLE
#undef LOBIT_BOOL

const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

// Values the rest of the config derives rather than reads.
void sync_derived(RunConfig& c) {
  c.model.classes = c.data.classes;
  c.train.sample_steps = c.sampler.steps;
  c.train.eval_guidance = c.sampler.guidance;
  c.train.eval_samples = c.sampler.eval_samples;
  c.planner.guidance = c.sampler.guidance;
  c.planner.sample_steps = c.sampler.steps;
  c.planner.seed = c.seed;
  c.train.seed = c.seed;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::kConfig, std::string("config: ") + e.what());
  }
  RunConfig cfg;
  std::set<std::string> seen;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      fail(ErrorKind::kConfig, "config key '" + section + "' must be inside a section");
    for (const auto& [key, value] : body) {
      const Field* f = find_field(section, key);
      if (!f) fail(ErrorKind::kConfig, "unknown config key '" + section + "." + key + "'");
      f->set(cfg, value.get_value<std::string>());
      seen.insert(section + "." + key);
    }
  }
  for (const Field& f : fields())
    if (!seen.contains(f.section + "." + f.key))
      fail(ErrorKind::kConfig, "missing config key '" + f.section + "." + f.key + "'");
  sync_derived(cfg);
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + ("[" + f.section + "]\n");
      section = f.section;
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  const Field* f = dot == std::string::npos
                       ? nullptr
                       : find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1));
  if (!f) fail(ErrorKind::kConfig, "unknown config key '" + dotted_key + "'");
  f->set(cfg, value);
  sync_derived(cfg);
  validate(cfg);
}

void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kConfig, "config: " + what);
  };
  need(c.data.classes >= 2, "data.classes must be >= 2");
  need(c.data.radius > 0.0 && c.data.radius <= 1.0, "data.radius must be in (0, 1]");
  need(c.data.sigma >= 0.0, "data.sigma must be >= 0");
  need(c.model.hidden > 0 && c.model.blocks > 0 && c.model.cond_dim > 0,
       "model dimensions must be positive");
  need(c.model.temb_dim > 0 && c.model.temb_dim % 2 == 0, "model.temb_dim must be positive and even");
  need(c.schedule_steps >= 2, "schedule.steps must be >= 2");
  need(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0,
       "schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  need(c.sampler.steps >= 1 && c.sampler.steps <= c.schedule_steps,
       "sampler.steps must be in [1, schedule.steps]");
  need(c.sampler.guidance >= 1.0, "sampler.guidance must be >= 1");
  need(c.sampler.sample_count >= 1 && c.sampler.eval_samples >= 1,
       "sampler sample counts must be >= 1");
  need(c.teacher.iters >= 0 && c.teacher.batch >= 1 && c.teacher.eval_every >= 1,
       "teacher iters/batch/eval_every out of range");
  need(c.teacher.lr > 0.0 && c.teacher.lr_end >= 0.0, "teacher learning rates out of range");
  need(c.teacher.p_drop >= 0.0 && c.teacher.p_drop <= 1.0, "teacher.p_drop must be in [0, 1]");
  need(c.alt_opt_iters >= 1, "train.alt_opt_iters must be >= 1");
  need(c.jobs >= 1, "run.jobs must be >= 1");
  need(!c.out.empty(), "run.out must not be empty");
  qat::validate(c.train);
  sensitivity::validate(c.planner);
}

toydiff::NoiseSchedule make_schedule(const RunConfig& cfg) {
  return toydiff::make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
}

}  // namespace lobit
