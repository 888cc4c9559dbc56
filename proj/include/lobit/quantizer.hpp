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

#ifndef LOBIT_QUANTIZER_HPP_
#define LOBIT_QUANTIZER_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lobit {

// Dense weight array with a designated per-channel axis. Values are row-major.
// Storage boundaries (checkpoints, packed models) are FP32; in memory the
// weights are FP64 so gradient checks can run at double precision.
struct WeightTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t channel_axis = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  std::size_t channels() const { return shape.at(channel_axis); }
  // Channel index of the element at flat offset `i`.
  std::size_t channel_of(std::size_t i) const;
};

WeightTensor make_tensor(std::string name, std::vector<std::size_t> shape,
                         std::vector<double> values, std::size_t channel_axis = 0);

}  // namespace lobit

namespace lobit::quant {

struct QuantSpec {
  int bits = 4;
  bool balanced = false;
  std::size_t channel_axis = 0;

  // 2^b + 1 when balanced, else 2^b.
  int levels() const { return (1 << bits) + (balanced ? 1 : 0); }
  int max_code() const { return levels() - 1; }

  bool operator==(const QuantSpec&) const = default;
};

void validate(const QuantSpec& spec);

struct ChannelAffine {
  std::vector<double> scales;
  std::vector<std::int32_t> zero_offsets;

  std::size_t channels() const { return scales.size(); }
};

struct QuantizedLayer {
  std::string name;
  std::vector<std::size_t> shape;
  QuantSpec spec;
  ChannelAffine affine;
  std::vector<std::uint16_t> codes;
};

inline constexpr double kScaleFloor = 1e-8;
inline constexpr int kAltOptDefaultIters = 10;

// Round half away from zero.
inline double round_half_away(double x) { return std::round(x); }

double effective_bits(const QuantSpec& spec);

ChannelAffine minmax_init(const WeightTensor& w, const QuantSpec& spec);

QuantizedLayer quantize(const WeightTensor& w, const QuantSpec& spec,
                        const ChannelAffine& affine);

WeightTensor dequantize(const QuantizedLayer& q);

// Writes dequantize(quantize(w)) into `out` without materializing codes.
// `out` must have w.size() elements.
void fake_quantize(const WeightTensor& w, const QuantSpec& spec,
                   const ChannelAffine& affine, std::span<double> out);

// Per-channel squared l2 error of dequantize(quantize(w, affine)) against w.
std::vector<double> channel_errors(const WeightTensor& w, const QuantSpec& spec,
                                   const ChannelAffine& affine);

// Alternating optimization of the per-channel scale: re-quantize with the
// current scale, then refit the scale by least squares on the fixed codes.
// Zero offsets are held. If `trace` is non-null it receives the per-channel
// error after initialization and after each iteration (iters + 1 rows).
ChannelAffine alt_opt_init(const WeightTensor& w, const QuantSpec& spec,
                           const ChannelAffine& init,
                           int iters = kAltOptDefaultIters,
                           std::vector<std::vector<double>>* trace = nullptr);

struct SteGrads {
  std::vector<double> grad_w;
  std::vector<double> grad_s;
};

// Straight-through backward pass for w_hat = s * (clip(round(w/s) + I_z) - I_z).
// `grad_out` is dL/dw_hat. With `lsq_grad_scale` the per-channel scale
// gradient is multiplied by 1/sqrt(N_ch * Q_P), Q_P = L - 1 - I_z (min 1).
SteGrads ste_backward(std::span<const double> grad_out, const WeightTensor& w,
                      const QuantSpec& spec, const ChannelAffine& affine,
                      bool lsq_grad_scale = true);

double lsq_grad_scale_factor(std::size_t channel_size, const QuantSpec& spec,
                             std::int32_t zero_offset);

}  // namespace lobit::quant

#endif  // LOBIT_QUANTIZER_HPP_
