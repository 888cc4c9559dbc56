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

#include "lobit/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lobit/error.hpp"

namespace lobit {

namespace {

std::size_t inner_stride(const std::vector<std::size_t>& shape, std::size_t axis) {
  std::size_t s = 1;
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s *= shape[d];
  return s;
}

}  // namespace

std::size_t WeightTensor::channel_of(std::size_t i) const {
  return (i / inner_stride(shape, channel_axis)) % shape[channel_axis];
}

WeightTensor make_tensor(std::string name, std::vector<std::size_t> shape,
                         std::vector<double> values, std::size_t channel_axis) {
  require(channel_axis < shape.size(), "tensor '" + name + "': channel axis out of range",
          ErrorKind::kShapeMismatch);
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                        std::multiplies<>());
  require(n == values.size(), "tensor '" + name + "': shape does not match value count",
          ErrorKind::kShapeMismatch);
  return WeightTensor{std::move(name), std::move(shape), channel_axis, std::move(values)};
}

}  // namespace lobit

namespace lobit::quant {

namespace {

// Iterates elements grouped by channel: fn(channel, flat_index).
template <typename Fn>
void for_each_element(const WeightTensor& w, Fn&& fn) {
  const std::size_t inner = inner_stride(w.shape, w.channel_axis);
  const std::size_t dim = w.shape[w.channel_axis];
  for (std::size_t i = 0; i < w.values.size(); ++i) fn((i / inner) % dim, i);
}

void check_compat(const WeightTensor& w, const QuantSpec& spec,
                  const ChannelAffine& affine) {
  validate(spec);
  require(!w.values.empty(), "quantize: empty tensor '" + w.name + "'");
  require(spec.channel_axis == w.channel_axis,
          "quantize: channel axis mismatch for '" + w.name + "'",
          ErrorKind::kShapeMismatch);
  require(affine.scales.size() == w.channels() &&
              affine.zero_offsets.size() == w.channels(),
          "quantize: affine has " + std::to_string(affine.scales.size()) +
              " channels, tensor '" + w.name + "' has " + std::to_string(w.channels()),
          ErrorKind::kShapeMismatch);
  for (double s : affine.scales)
    require(s > 0.0 && std::isfinite(s), "quantize: non-positive scale in '" + w.name + "'");
}

inline int code_of(double w, double s, std::int32_t zero, int max_code) {
  const double c = round_half_away(w / s) + static_cast<double>(zero);
  return static_cast<int>(std::clamp(c, 0.0, static_cast<double>(max_code)));
}

}  // namespace

void validate(const QuantSpec& spec) {
  require(spec.bits >= 1 && spec.bits <= 8,
          "quant spec: bits must be in [1, 8], got " + std::to_string(spec.bits));
}

double effective_bits(const QuantSpec& spec) {
  validate(spec);
  if (spec.balanced) return std::log2(static_cast<double>((1 << spec.bits) + 1));
  return static_cast<double>(spec.bits);
}

ChannelAffine minmax_init(const WeightTensor& w, const QuantSpec& spec) {
  validate(spec);
  require(!w.values.empty(), "minmax_init: empty tensor '" + w.name + "'");
  require(spec.channel_axis == w.channel_axis, "minmax_init: channel axis mismatch",
          ErrorKind::kShapeMismatch);
  const std::size_t nch = w.channels();
  std::vector<double> lo(nch, std::numeric_limits<double>::infinity());
  std::vector<double> hi(nch, -std::numeric_limits<double>::infinity());
  std::vector<double> absmax(nch, 0.0);
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    const double v = w.values[i];
    lo[c] = std::min(lo[c], v);
    hi[c] = std::max(hi[c], v);
    absmax[c] = std::max(absmax[c], std::abs(v));
  });

  ChannelAffine out;
  out.scales.resize(nch);
  out.zero_offsets.resize(nch);
  const std::int32_t half = 1 << (spec.bits - 1);
  for (std::size_t c = 0; c < nch; ++c) {
    if (spec.balanced) {
      out.scales[c] = std::max(absmax[c] / static_cast<double>(half), kScaleFloor);
      out.zero_offsets[c] = half;
    } else {
      const double s = std::max((hi[c] - lo[c]) / static_cast<double>(spec.max_code()),
                                kScaleFloor);
      out.scales[c] = s;
      const double zero = std::clamp(round_half_away(-lo[c] / s), -1073741824.0, 1073741824.0);
      out.zero_offsets[c] = static_cast<std::int32_t>(zero);
    }
  }
  return out;
}

QuantizedLayer quantize(const WeightTensor& w, const QuantSpec& spec,
                        const ChannelAffine& affine) {
  check_compat(w, spec, affine);
  QuantizedLayer q{w.name, w.shape, spec, affine, {}};
  q.codes.resize(w.values.size());
  const int max_code = spec.max_code();
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    q.codes[i] = static_cast<std::uint16_t>(
        code_of(w.values[i], affine.scales[c], affine.zero_offsets[c], max_code));
  });
  return q;
}

WeightTensor dequantize(const QuantizedLayer& q) {
  WeightTensor w{q.name, q.shape, q.spec.channel_axis, {}};
  w.values.resize(q.codes.size());
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    w.values[i] = q.affine.scales[c] *
                  static_cast<double>(static_cast<std::int32_t>(q.codes[i]) -
                                      q.affine.zero_offsets[c]);
  });
  return w;
}

void fake_quantize(const WeightTensor& w, const QuantSpec& spec,
                   const ChannelAffine& affine, std::span<double> out) {
  check_compat(w, spec, affine);
  require(out.size() == w.values.size(), "fake_quantize: output size mismatch",
          ErrorKind::kShapeMismatch);
  const int max_code = spec.max_code();
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    const int code = code_of(w.values[i], affine.scales[c], affine.zero_offsets[c], max_code);
    out[i] = affine.scales[c] * static_cast<double>(code - affine.zero_offsets[c]);
  });
}

std::vector<double> channel_errors(const WeightTensor& w, const QuantSpec& spec,
                                   const ChannelAffine& affine) {
  check_compat(w, spec, affine);
  std::vector<double> err(w.channels(), 0.0);
  const int max_code = spec.max_code();
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    const int code = code_of(w.values[i], affine.scales[c], affine.zero_offsets[c], max_code);
    const double d =
        affine.scales[c] * static_cast<double>(code - affine.zero_offsets[c]) - w.values[i];
    err[c] += d * d;
  });
  return err;
}

ChannelAffine alt_opt_init(const WeightTensor& w, const QuantSpec& spec,
                           const ChannelAffine& init, int iters,
                           std::vector<std::vector<double>>* trace) {
  require(iters >= 1, "alt_opt_init: iters must be >= 1");
  check_compat(w, spec, init);
  const std::size_t nch = w.channels();
  const int max_code = spec.max_code();
  ChannelAffine cur = init;
  std::vector<double> err = channel_errors(w, spec, cur);
  if (trace) {
    trace->clear();
    trace->push_back(err);
  }

  std::vector<double> num(nch), den(nch);
  for (int it = 0; it < iters; ++it) {
    std::fill(num.begin(), num.end(), 0.0);
    std::fill(den.begin(), den.end(), 0.0);
    for_each_element(w, [&](std::size_t c, std::size_t i) {
      const int code = code_of(w.values[i], cur.scales[c], cur.zero_offsets[c], max_code);
      const double d = static_cast<double>(code - cur.zero_offsets[c]);
      num[c] += w.values[i] * d;
      den[c] += d * d;
    });

    ChannelAffine next = cur;
    for (std::size_t c = 0; c < nch; ++c) {
      // All codes at the zero offset: least squares undefined, keep the scale.
      if (den[c] == 0.0) continue;
      const double s = num[c] / den[c];
      if (s > 0.0 && std::isfinite(s)) next.scales[c] = std::max(s, kScaleFloor);
    }
    const std::vector<double> next_err = channel_errors(w, spec, next);
    // The refit can only lower the error on its own codes; re-rounding with
    // the new scale can lower it further. The guard absorbs last-ulp noise.
    for (std::size_t c = 0; c < nch; ++c) {
      if (next_err[c] <= err[c]) {
        cur.scales[c] = next.scales[c];
        err[c] = next_err[c];
      }
    }
    if (trace) trace->push_back(err);
  }
  return cur;
}

double lsq_grad_scale_factor(std::size_t channel_size, const QuantSpec& spec,
                             std::int32_t zero_offset) {
  const double qp = std::max<double>(spec.max_code() - zero_offset, 1.0);
  return 1.0 / std::sqrt(static_cast<double>(channel_size) * qp);
}

SteGrads ste_backward(std::span<const double> grad_out, const WeightTensor& w,
                      const QuantSpec& spec, const ChannelAffine& affine,
                      bool lsq_grad_scale) {
  check_compat(w, spec, affine);
  require(grad_out.size() == w.values.size(), "ste_backward: gradient shape mismatch",
          ErrorKind::kShapeMismatch);
  SteGrads g;
  g.grad_w.assign(w.values.size(), 0.0);
  g.grad_s.assign(w.channels(), 0.0);
  const double top = static_cast<double>(spec.max_code());
  for_each_element(w, [&](std::size_t c, std::size_t i) {
    const double s = affine.scales[c];
    const double zero = static_cast<double>(affine.zero_offsets[c]);
    const double scaled = w.values[i] / s;
    const double v = scaled + zero;
    if (v < 0.0) {
      g.grad_s[c] += grad_out[i] * (0.0 - zero);
    } else if (v > top) {
      g.grad_s[c] += grad_out[i] * (top - zero);
    } else {
      g.grad_w[i] = grad_out[i];
      g.grad_s[c] += grad_out[i] * (round_half_away(scaled) - scaled);
    }
  });
  if (lsq_grad_scale) {
    const std::size_t per_channel = w.values.size() / w.channels();
    for (std::size_t c = 0; c < g.grad_s.size(); ++c)
      g.grad_s[c] *= lsq_grad_scale_factor(per_channel, spec, affine.zero_offsets[c]);
  }
  return g;
}

}  // namespace lobit::quant
