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

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <set>
#include <thread>

#include "json.hpp"
#include "lobit/bitpack.hpp"
#include "lobit/error.hpp"
#include "lobit/metrics.hpp"

namespace lobit::sensitivity {

namespace {

using toydiff::Denoiser;
using toydiff::Mat;

std::vector<int> cyclic_classes(int n, int classes) {
  std::vector<int> cls(n);
  for (int j = 0; j < n; ++j) cls[j] = j % classes;
  return cls;
}

const SensitivityRecord* find_record(const std::vector<SensitivityRecord>& records,
                                     const std::string& layer, int bits) {
  for (const SensitivityRecord& r : records)
    if (r.layer == layer && r.bits == bits) return &r;
  return nullptr;
}

std::optional<double> abs_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) return std::nullopt;
  try {
    return std::fabs(metrics::pearson(x, y));
  } catch (const Error&) {
    return std::nullopt;
  }
}

double metric_of(const SensitivityRecord& r, const std::string& m) {
  if (m == "mse") return r.mse;
  if (m == "psnr") return r.psnr;
  return r.alignment_drop;
}

nlohmann::ordered_json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

void validate(const PlannerConfig& cfg) {
  require(cfg.eta >= 0.0 && cfg.eta <= 1.0, "planner: eta must be in [0, 1]", ErrorKind::kConfig);
  require(cfg.s_threshold.has_value() != cfg.target_avg_bits.has_value(),
          "planner: set exactly one of s_threshold and target_avg_bits", ErrorKind::kConfig);
  for (std::size_t i = 1; i < cfg.bump_percentiles.size(); ++i)
    require(cfg.bump_percentiles[i] > cfg.bump_percentiles[i - 1],
            "planner: bump percentiles must be strictly increasing", ErrorKind::kConfig);
  for (double p : cfg.bump_percentiles)
    require(p >= 0.0 && p <= 100.0, "planner: bump percentiles must be in [0, 100]",
            ErrorKind::kConfig);
  require(cfg.default_bits >= 1 && cfg.default_bits <= 8, "planner: default_bits must be in [1, 8]",
          ErrorKind::kConfig);
  require(!cfg.scan_bits.empty(), "planner: scan_bits is empty", ErrorKind::kConfig);
  for (int b : cfg.scan_bits)
    require(b >= 1 && b <= 8, "planner: scan bits must be in [1, 8]", ErrorKind::kConfig);
  require(cfg.qat_iters >= 0, "planner: qat_iters must be >= 0", ErrorKind::kConfig);
  require(cfg.eval_samples >= 1, "planner: eval_samples must be >= 1", ErrorKind::kConfig);
}

double sensitivity_score(double mse, std::size_t params, double eta) {
  require(params > 0, "sensitivity_score: parameter count must be positive");
  return mse * std::pow(static_cast<double>(params), -eta);
}

std::uint64_t candidate_seed(std::uint64_t base_seed, int layer_index, int bits) {
  return metrics::derive_seed(base_seed, metrics::hash_string("scan"),
                              static_cast<std::uint64_t>(layer_index),
                              static_cast<std::uint64_t>(bits));
}

SensitivityRecord scan_candidate(const Denoiser& teacher, const std::string& layer, int bits,
                                 const PlannerConfig& cfg, const toydiff::ToyDataset& data,
                                 const toydiff::NoiseSchedule& sched) {
  const int index = teacher.layer_index(layer);
  const auto quantizable = teacher.quantizable_layers();
  require(std::find(quantizable.begin(), quantizable.end(), layer) != quantizable.end(),
          "scan: layer '" + layer + "' is not quantizable");
  const std::uint64_t seed = candidate_seed(cfg.seed, index, bits);

  qat::StudentState st{teacher, {}, {}};
  toydiff::Linear& l = st.model.layer(layer);
  const quant::QuantSpec spec{bits, true, 0};
  l.quant = toydiff::LayerQuant{
      spec, quant::alt_opt_init(l.weight, spec, quant::minmax_init(l.weight, spec),
                                quant::kAltOptDefaultIters)};
  st.model.refresh();
  st.optimizer = qat::AdamW(st.model);

  qat::TrainConfig tc;
  tc.lr = cfg.qat_lr;
  tc.batch = cfg.qat_batch;
  tc.lambda = 0.0;
  tc.seed = seed;
  tc.eval_every = std::max(cfg.qat_iters, 1);
  qat::ParamFilter filter;
  if (!cfg.train_all_layers) {
    filter.layers = {layer};
    filter.class_table = false;
  }
  qat::train_stage(1, &teacher, st, data, sched, tc, cfg.qat_iters, nullptr, filter);

  const std::vector<int> cls = cyclic_classes(cfg.eval_samples, data.classes);
  const Mat ref = toydiff::sample(teacher, sched, cfg.sample_steps, cls, cfg.guidance, seed);
  const Mat got = toydiff::sample(st.model, sched, cfg.sample_steps, cls, cfg.guidance, seed);

  SensitivityRecord r;
  r.layer = layer;
  r.bits = bits;
  r.mse = metrics::mse({got.data(), static_cast<std::size_t>(got.size())},
                       {ref.data(), static_cast<std::size_t>(ref.size())});
  r.psnr = metrics::psnr_from_mse(r.mse);
  r.alignment_drop = alignment_score(ref, cls, data) - alignment_score(got, cls, data);
  r.params = l.param_count();
  return r;
}

void check_grid(const std::vector<SensitivityRecord>& records,
                const std::vector<std::string>& layers, const std::vector<int>& bits) {
  std::string missing;
  for (const std::string& layer : layers)
    for (int b : bits)
      if (!find_record(records, layer, b))
        missing += (missing.empty() ? "" : ", ") + layer + "@" + std::to_string(b);
  if (!missing.empty()) fail(ErrorKind::kInvalidArgument, "incomplete record grid, missing: " + missing);
}

CorrelationReport correlation_report(const std::vector<SensitivityRecord>& records,
                                     const std::vector<int>& bits) {
  std::vector<std::string> layers;
  for (const SensitivityRecord& r : records)
    if (std::find(layers.begin(), layers.end(), r.layer) == layers.end()) layers.push_back(r.layer);
  check_grid(records, layers, bits);

  const std::vector<std::string> metric_names{"mse", "psnr", "alignment_drop"};
  auto column = [&](const std::string& m, int b) {
    std::vector<double> v;
    for (const std::string& layer : layers) v.push_back(metric_of(*find_record(records, layer, b), m));
    return v;
  };

  CorrelationReport rep;
  for (int b : bits)
    for (std::size_t i = 0; i < metric_names.size(); ++i)
      for (std::size_t j = i + 1; j < metric_names.size(); ++j)
        rep.entries.push_back({"metrics", "bits=" + std::to_string(b), metric_names[i],
                               metric_names[j],
                               abs_pearson(column(metric_names[i], b), column(metric_names[j], b))});
  for (const std::string& m : metric_names)
    for (std::size_t i = 0; i < bits.size(); ++i)
      for (std::size_t j = i + 1; j < bits.size(); ++j)
        rep.entries.push_back({"bits", m, "bits=" + std::to_string(bits[i]),
                               "bits=" + std::to_string(bits[j]),
                               abs_pearson(column(m, bits[i]), column(m, bits[j]))});
  return rep;
}

double percentile(std::vector<double> values, double p) {
  require(!values.empty(), "percentile: empty input");
  require(p >= 0.0 && p <= 100.0, "percentile: p must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double price_recipe(const PrecisionRecipe& recipe, const std::vector<SensitivityRecord>& records,
                    const LayerLayout& layout) {
  std::map<std::string, std::size_t> sizes = layout.fixed8;
  for (const auto& [name, bits] : recipe.layers) {
    const auto it = std::find_if(records.begin(), records.end(),
                                 [&](const SensitivityRecord& r) { return r.layer == name; });
    require(it != records.end(), "price_recipe: no record for layer '" + name + "'");
    sizes[name] = it->params;
  }
  PrecisionRecipe weights_only = recipe;
  weights_only.excluded.clear();
  return bitpack::average_bits(weights_only, sizes, 0);
}

PlanResult plan_precision(const std::vector<SensitivityRecord>& records, const PlannerConfig& cfg,
                          const LayerLayout& layout) {
  validate(cfg);
  std::vector<int> bits = cfg.scan_bits;
  std::sort(bits.begin(), bits.end());

  std::vector<std::string> layers;
  for (const SensitivityRecord& r : records)
    if (!layout.fixed8.contains(r.layer) &&
        std::find(layers.begin(), layers.end(), r.layer) == layers.end())
      layers.push_back(r.layer);
  require(!layers.empty(), "planner: no layers to plan");
  check_grid(records, layers, bits);

  // scores[i][k] = S_{i, bits[k]}.
  std::vector<std::vector<double>> scores(layers.size());
  std::vector<double> drop(layers.size());
  const int bump_bits = std::find(bits.begin(), bits.end(), 3) != bits.end() ? 3 : bits.back();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (int b : bits) {
      const SensitivityRecord& r = *find_record(records, layers[i], b);
      require(r.mse >= 0.0 && std::isfinite(r.mse), "planner: invalid mse for " + layers[i]);
      scores[i].push_back(sensitivity_score(r.mse, r.params, cfg.eta));
    }
    drop[i] = find_record(records, layers[i], bump_bits)->alignment_drop;
  }

  std::vector<int> bumps(layers.size(), 0);
  for (double p : cfg.bump_percentiles) {
    const double cut = percentile(drop, p);
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (drop[i] > cut) ++bumps[i];
  }

  auto build = [&](double s_o) {
    PlanResult res;
    res.s_threshold = s_o;
    res.recipe.balanced = true;
    for (const auto& [name, size] : layout.fixed8) res.recipe.fixed8.push_back(name);
    res.recipe.excluded = layout.excluded;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      int base = cfg.default_bits;
      for (std::size_t k = 0; k < bits.size(); ++k) {
        if (scores[i][k] < s_o) {
          base = bits[k];
          break;
        }
      }
      res.base_bits[layers[i]] = base;
      res.recipe.layers[layers[i]] = std::min(base + bumps[i], 8);
    }
    res.average_bits = price_recipe(res.recipe, records, layout);
    return res;
  };

  if (cfg.s_threshold) return build(*cfg.s_threshold);

  // Average bits is non-increasing in S_o, and only changes just above a score value.
  std::vector<double> cuts{0.0};
  std::vector<double> sorted;
  for (const auto& row : scores) sorted.insert(sorted.end(), row.begin(), row.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (double s : sorted) cuts.push_back(std::nextafter(s, std::numeric_limits<double>::infinity()));

  const double target = *cfg.target_avg_bits;
  std::size_t lo = 0, hi = cuts.size();
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (build(cuts[mid]).average_bits <= target) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  if (lo == cuts.size()) return build(cuts.back());
  PlanResult below = build(cuts[lo]);
  if (lo == 0) return below;
  PlanResult above = build(cuts[lo - 1]);
  return std::fabs(above.average_bits - target) < std::fabs(below.average_bits - target) ? above
                                                                                          : below;
}

ScanResult run_scan(const Denoiser& teacher, const std::vector<std::string>& layers,
                    const PlannerConfig& cfg, const toydiff::ToyDataset& data,
                    const toydiff::NoiseSchedule& sched, int jobs) {
  require(jobs >= 1, "scan: jobs must be >= 1", ErrorKind::kConfig);
  std::vector<std::pair<std::string, int>> cands;
  for (const std::string& layer : layers)
    for (int b : cfg.scan_bits) cands.emplace_back(layer, b);

  std::vector<SensitivityRecord> out(cands.size());
  std::vector<std::exception_ptr> errors(cands.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cands.size(); i = next++) {
      try {
        out[i] = scan_candidate(teacher, cands[i].first, cands[i].second, cfg, data, sched);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(cands.size(), 1)));
  std::vector<std::thread> pool;
  for (int k = 1; k < n_threads; ++k) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!errors[i]) continue;
    const std::string where =
        "scan candidate " + cands[i].first + " @ " + std::to_string(cands[i].second) + " bits: ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const Error& e) {
      fail(e.kind(), where + e.what());
    } catch (const std::exception& e) {
      fail(ErrorKind::kInvalidArgument, where + e.what());
    }
  }
  ScanResult res;
  res.records = std::move(out);
  res.report = correlation_report(res.records, cfg.scan_bits);
  return res;
}

std::string records_to_json(const std::vector<SensitivityRecord>& records) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const SensitivityRecord& r : records) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["bits"] = r.bits;
    j["mse"] = r.mse;
    j["psnr"] = finite_or_null(r.psnr);
    j["alignment_drop"] = r.alignment_drop;
    j["params"] = r.params;
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<SensitivityRecord> records_from_json(const std::string& text) {
  try {
    const auto arr = nlohmann::json::parse(text);
    require(arr.is_array(), "scan records: expected a JSON array", ErrorKind::kFormat);
    std::vector<SensitivityRecord> out;
    for (const auto& j : arr) {
      SensitivityRecord r;
      r.layer = j.at("layer").get<std::string>();
      r.bits = j.at("bits").get<int>();
      r.mse = j.at("mse").get<double>();
      r.psnr = j.at("psnr").is_null() ? metrics::kPsnrIdentical : j.at("psnr").get<double>();
      r.alignment_drop = j.at("alignment_drop").get<double>();
      r.params = j.at("params").get<std::size_t>();
      require(r.mse >= 0.0, "scan records: negative mse for " + r.layer, ErrorKind::kFormat);
      require(r.alignment_drop >= -1.0 && r.alignment_drop <= 1.0,
              "scan records: alignment_drop out of range for " + r.layer, ErrorKind::kFormat);
      out.push_back(std::move(r));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("scan records: ") + e.what());
  }
}

std::string report_to_json(const CorrelationReport& report) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const Correlation& c : report.entries) {
    nlohmann::ordered_json j;
    j["group"] = c.group;
    j["fixed"] = c.fixed;
    j["a"] = c.a;
    j["b"] = c.b;
    j["abs_pearson"] = c.value ? nlohmann::ordered_json(*c.value) : nlohmann::ordered_json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

}  // namespace lobit::sensitivity
