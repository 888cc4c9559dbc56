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

#ifndef LOBIT_BITPACK_HPP_
#define LOBIT_BITPACK_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lobit/quantizer.hpp"
#include "lobit/recipe.hpp"

namespace lobit::bitpack {

// Codes packed G at a time as base-L integers, G = max{G : L^G <= 2^64}, each
// group stored little-endian in ceil(G * log2(L) / 8) bytes. The final group
// is zero-padded.
struct PackedBlob {
  std::uint32_t level_count = 0;
  std::uint64_t code_count = 0;
  std::uint32_t group_size = 0;
  std::vector<std::uint8_t> data;

  bool operator==(const PackedBlob&) const = default;
};

// Level counts up to 2^8 + 1 are accepted so balanced 8-bit layers pack too.
inline constexpr std::uint32_t kMaxLevels = 257;

std::uint32_t group_size(std::uint32_t levels);
std::size_t bytes_per_group(std::uint32_t levels);
std::size_t packed_size(std::uint64_t code_count, std::uint32_t levels);

PackedBlob pack_codes(std::span<const std::uint16_t> codes, std::uint32_t levels);
std::vector<std::uint16_t> unpack_codes(const PackedBlob& blob);

// Average bits per weight: (sum_i bits_i * N_i + 16 * n_tf) / sum_i N_i, with
// bits_i = log2(2^b + 1) for balanced layers, 8 for fixed layers, 0 for
// excluded (cached) layers. Every entry of `layer_sizes` must be covered by
// the recipe and vice versa.
double average_bits(const PrecisionRecipe& recipe,
                    const std::map<std::string, std::size_t>& layer_sizes,
                    std::size_t n_time_features);

// Storage ratio of a d_out x d_in projection against `steps` cached d_out
// feature vectors.
double time_cache_storage_ratio(std::size_t d_out, std::size_t d_in, std::size_t steps);

struct PackedLayer {
  std::string name;
  std::vector<std::uint32_t> shape;
  quant::QuantSpec spec;
  std::vector<float> scales;
  std::vector<std::int32_t> zero_offsets;
  PackedBlob blob;

  bool operator==(const PackedLayer&) const = default;
};

// Cached F_{i,t} features as raw IEEE binary16 bit patterns, laid out
// [step][block][dim].
struct TimeFeatureSection {
  std::vector<std::uint32_t> steps;
  std::uint32_t blocks = 0;
  std::uint32_t dim = 0;
  std::vector<std::uint16_t> values;

  bool operator==(const TimeFeatureSection&) const = default;
};

// Parameters kept at full precision (biases, class embeddings).
struct FloatTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;

  bool operator==(const FloatTensor&) const = default;
};

inline constexpr std::uint32_t kFormatVersion = 1;

struct PackedModel {
  std::uint32_t format_version = kFormatVersion;
  std::vector<PackedLayer> layers;
  TimeFeatureSection time_features;
  std::vector<FloatTensor> fp32_tensors;

  bool operator==(const PackedModel&) const = default;
};

std::vector<std::uint8_t> serialize(const PackedModel& m);
PackedModel deserialize(std::span<const std::uint8_t> bytes);

// File size implied by the layout: header, per-layer tables and
// packed_size() payloads, feature section, FP32 tensors, CRC.
std::size_t predicted_file_size(const PackedModel& m);

void write_model(const PackedModel& m, const std::filesystem::path& path);
PackedModel read_model(const std::filesystem::path& path);

PackedLayer pack_layer(const quant::QuantizedLayer& q);
quant::QuantizedLayer unpack_layer(const PackedLayer& p);

std::uint16_t float_to_half_bits(double v);
double half_bits_to_double(std::uint16_t h);

}  // namespace lobit::bitpack

#endif  // LOBIT_BITPACK_HPP_
