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

#include "lobit/bitpack.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>

#include "byte_io.hpp"
#include "lobit/error.hpp"

namespace lobit::bitpack {

namespace {

constexpr std::string_view kMagic = "BFQ1";

// L^G as 128-bit, for G small enough that it cannot overflow.
unsigned __int128 ipow(std::uint32_t base, std::uint32_t exp) {
  unsigned __int128 r = 1;
  for (std::uint32_t i = 0; i < exp; ++i) r *= base;
  return r;
}

void check_levels(std::uint32_t levels) {
  require(levels >= 2 && levels <= kMaxLevels,
          "pack: level count must be in [2, " + std::to_string(kMaxLevels) + "], got " +
              std::to_string(levels));
}

}  // namespace

std::uint32_t group_size(std::uint32_t levels) {
  check_levels(levels);
  const unsigned __int128 limit = static_cast<unsigned __int128>(1) << 64;
  std::uint32_t g = 1;
  while (ipow(levels, g + 1) <= limit) ++g;
  return g;
}

std::size_t bytes_per_group(std::uint32_t levels) {
  // Bits needed for the largest group value L^G - 1 equal ceil(G * log2 L).
  const unsigned __int128 top = ipow(levels, group_size(levels)) - 1;
  const auto hi = static_cast<std::uint64_t>(top >> 64);
  const auto lo = static_cast<std::uint64_t>(top);
  const int bits = hi ? 64 + std::bit_width(hi) : std::bit_width(lo);
  return static_cast<std::size_t>((bits + 7) / 8);
}

std::size_t packed_size(std::uint64_t code_count, std::uint32_t levels) {
  const std::uint64_t g = group_size(levels);
  return static_cast<std::size_t>((code_count + g - 1) / g) * bytes_per_group(levels);
}

PackedBlob pack_codes(std::span<const std::uint16_t> codes, std::uint32_t levels) {
  check_levels(levels);
  PackedBlob blob;
  blob.level_count = levels;
  blob.code_count = codes.size();
  blob.group_size = group_size(levels);
  const std::size_t nbytes = bytes_per_group(levels);
  const std::size_t groups = (codes.size() + blob.group_size - 1) / blob.group_size;
  blob.data.assign(groups * nbytes, 0);

  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t begin = g * blob.group_size;
    const std::size_t end = std::min<std::size_t>(begin + blob.group_size, codes.size());
    // Horner from the last code so the first code is the least significant digit.
    std::uint64_t value = 0;
    for (std::size_t i = end; i-- > begin;) {
      if (codes[i] >= levels)
        fail(ErrorKind::kInvalidArgument, "pack: code " + std::to_string(codes[i]) +
                                              " at index " + std::to_string(i) +
                                              " out of range [0, " +
                                              std::to_string(levels - 1) + "]");
      value = value * levels + codes[i];
    }
    std::uint8_t* out = blob.data.data() + g * nbytes;
    for (std::size_t b = 0; b < nbytes; ++b) out[b] = static_cast<std::uint8_t>(value >> (8 * b));
  }
  return blob;
}

std::vector<std::uint16_t> unpack_codes(const PackedBlob& blob) {
  check_levels(blob.level_count);
  require(blob.group_size == group_size(blob.level_count),
          "unpack: group size " + std::to_string(blob.group_size) + " inconsistent with L=" +
              std::to_string(blob.level_count),
          ErrorKind::kFormat);
  const std::size_t expected = packed_size(blob.code_count, blob.level_count);
  require(blob.data.size() >= expected,
          "unpack: truncated data, need " + std::to_string(expected) + " bytes, have " +
              std::to_string(blob.data.size()),
          ErrorKind::kFormat);
  require(blob.data.size() == expected,
          "unpack: " + std::to_string(blob.data.size() - expected) + " trailing bytes",
          ErrorKind::kFormat);

  const std::size_t nbytes = bytes_per_group(blob.level_count);
  const std::size_t gsize = blob.group_size;
  std::vector<std::uint16_t> codes(blob.code_count);
  for (std::size_t g = 0; g * gsize < codes.size(); ++g) {
    const std::uint8_t* in = blob.data.data() + g * nbytes;
    std::uint64_t value = 0;
    for (std::size_t b = nbytes; b-- > 0;) value = (value << 8) | in[b];
    const std::size_t begin = g * gsize;
    const std::size_t end = std::min(begin + gsize, codes.size());
    for (std::size_t i = begin; i < end; ++i) {
      codes[i] = static_cast<std::uint16_t>(value % blob.level_count);
      value /= blob.level_count;
    }
  }
  return codes;
}

double average_bits(const PrecisionRecipe& recipe,
                    const std::map<std::string, std::size_t>& layer_sizes,
                    std::size_t n_time_features) {
  double numerator = 16.0 * static_cast<double>(n_time_features);
  double total_weights = 0.0;
  for (const auto& [name, n] : layer_sizes) {
    const double count = static_cast<double>(n);
    total_weights += count;
    if (recipe.is_excluded(name)) continue;
    if (recipe.is_fixed8(name)) {
      numerator += 8.0 * count;
      continue;
    }
    const auto it = recipe.layers.find(name);
    require(it != recipe.layers.end(), "average_bits: layer '" + name + "' missing from recipe");
    numerator += quant::effective_bits({it->second, recipe.balanced, 0}) * count;
  }
  for (const auto& [name, bits] : recipe.layers)
    require(layer_sizes.contains(name), "average_bits: no size for recipe layer '" + name + "'");
  require(total_weights > 0.0, "average_bits: no weights");
  return numerator / total_weights;
}

double time_cache_storage_ratio(std::size_t d_out, std::size_t d_in, std::size_t steps) {
  require(steps > 0, "storage ratio: steps must be positive");
  return static_cast<double>(d_out * d_in) / static_cast<double>(d_out * steps);
}

std::uint16_t float_to_half_bits(double v) {
  return Eigen::half_impl::raw_half_as_uint16(Eigen::half(static_cast<float>(v)));
}

double half_bits_to_double(std::uint16_t h) {
  return static_cast<double>(static_cast<float>(Eigen::half(Eigen::half_impl::raw_uint16_to_half(h))));
}

PackedLayer pack_layer(const quant::QuantizedLayer& q) {
  PackedLayer p;
  p.name = q.name;
  for (std::size_t d : q.shape) p.shape.push_back(static_cast<std::uint32_t>(d));
  p.spec = q.spec;
  p.scales.assign(q.affine.scales.begin(), q.affine.scales.end());
  p.zero_offsets = q.affine.zero_offsets;
  p.blob = pack_codes(q.codes, static_cast<std::uint32_t>(q.spec.levels()));
  return p;
}

quant::QuantizedLayer unpack_layer(const PackedLayer& p) {
  quant::QuantizedLayer q;
  q.name = p.name;
  q.shape.assign(p.shape.begin(), p.shape.end());
  q.spec = p.spec;
  q.affine.scales.assign(p.scales.begin(), p.scales.end());
  q.affine.zero_offsets = p.zero_offsets;
  q.codes = unpack_codes(p.blob);
  return q;
}

std::vector<std::uint8_t> serialize(const PackedModel& m) {
  detail::ByteWriter w;
  w.put_raw(kMagic);
  w.put<std::uint32_t>(m.format_version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.layers.size()));
  for (const PackedLayer& l : m.layers) {
    w.put_name(l.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.shape.size()));
    w.put_array<std::uint32_t>(l.shape);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.spec.bits));
    w.put<std::uint8_t>(l.spec.balanced ? 1 : 0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.spec.channel_axis));
    require(l.scales.size() == l.zero_offsets.size(),
            "serialize: scale/zero count mismatch in '" + l.name + "'");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.scales.size()));
    w.put_array<float>(l.scales);
    w.put_array<std::int32_t>(l.zero_offsets);
    w.put<std::uint64_t>(l.blob.data.size());
    w.put_bytes(l.blob.data);
  }

  const TimeFeatureSection& tf = m.time_features;
  require(tf.values.size() == tf.steps.size() * tf.blocks * tf.dim,
          "serialize: time feature table size mismatch");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tf.steps.size()));
  w.put<std::uint32_t>(tf.blocks);
  w.put<std::uint32_t>(tf.dim);
  w.put_array<std::uint32_t>(tf.steps);
  w.put_array<std::uint16_t>(tf.values);

  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.fp32_tensors.size()));
  for (const FloatTensor& t : m.fp32_tensors) {
    w.put_name(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    w.put_array<std::uint32_t>(t.shape);
    w.put_array<float>(t.values);
  }
  w.put_crc();
  return std::move(w.bytes());
}

std::size_t predicted_file_size(const PackedModel& m) {
  std::size_t n = kMagic.size() + 4 + 4;
  for (const PackedLayer& l : m.layers) {
    std::uint64_t count = 1;
    for (std::uint32_t d : l.shape) count *= d;
    n += 2 + l.name.size() + 1 + 4 * l.shape.size() + 3 + 4 + 8 * l.scales.size() + 8 +
         packed_size(count, static_cast<std::uint32_t>(l.spec.levels()));
  }
  const TimeFeatureSection& tf = m.time_features;
  n += 12 + 4 * tf.steps.size() + 2 * tf.steps.size() * tf.blocks * tf.dim;
  n += 4;
  for (const FloatTensor& t : m.fp32_tensors) n += 2 + t.name.size() + 1 + 4 * t.shape.size() + 4 * t.values.size();
  return n + 4;
}

PackedModel deserialize(std::span<const std::uint8_t> bytes) {
  detail::check_magic(bytes, kMagic);
  detail::ByteReader r(bytes);
  r.get_raw(kMagic.size());
  PackedModel m;
  m.format_version = r.get<std::uint32_t>();
  require(m.format_version == kFormatVersion,
          "unsupported .bfq version " + std::to_string(m.format_version),
          ErrorKind::kUnsupportedVersion);
  detail::check_crc(bytes);

  const auto layer_count = r.get<std::uint32_t>();
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    PackedLayer l;
    l.name = r.get_name();
    l.shape = r.get_array<std::uint32_t>(r.get<std::uint8_t>());
    l.spec.bits = r.get<std::uint8_t>();
    l.spec.balanced = r.get<std::uint8_t>() != 0;
    l.spec.channel_axis = r.get<std::uint8_t>();
    quant::validate(l.spec);
    const auto channels = r.get<std::uint32_t>();
    l.scales = r.get_array<float>(channels);
    l.zero_offsets = r.get_array<std::int32_t>(channels);
    const auto blob_len = r.get<std::uint64_t>();
    require(blob_len <= r.remaining(), "truncated blob in '" + l.name + "'", ErrorKind::kFormat);
    l.blob.data = r.get_bytes(static_cast<std::size_t>(blob_len));
    l.blob.level_count = static_cast<std::uint32_t>(l.spec.levels());
    l.blob.group_size = group_size(l.blob.level_count);
    std::uint64_t n = 1;
    for (std::uint32_t d : l.shape) n *= d;
    l.blob.code_count = n;
    m.layers.push_back(std::move(l));
  }

  TimeFeatureSection& tf = m.time_features;
  const auto steps = r.get<std::uint32_t>();
  tf.blocks = r.get<std::uint32_t>();
  tf.dim = r.get<std::uint32_t>();
  tf.steps = r.get_array<std::uint32_t>(steps);
  tf.values = r.get_array<std::uint16_t>(static_cast<std::size_t>(steps) * tf.blocks * tf.dim);

  const auto tensor_count = r.get<std::uint32_t>();
  for (std::uint32_t ti = 0; ti < tensor_count; ++ti) {
    FloatTensor t;
    t.name = r.get_name();
    t.shape = r.get_array<std::uint32_t>(r.get<std::uint8_t>());
    std::size_t n = 1;
    for (std::uint32_t d : t.shape) n *= d;
    t.values = r.get_array<float>(n);
    m.fp32_tensors.push_back(std::move(t));
  }
  require(r.remaining() == 4, "unexpected trailing data before CRC", ErrorKind::kFormat);
  return m;
}

void write_model(const PackedModel& m, const std::filesystem::path& path) {
  detail::write_file(path, serialize(m));
}

PackedModel read_model(const std::filesystem::path& path) {
  return deserialize(detail::read_file(path));
}

}  // namespace lobit::bitpack

namespace lobit::detail {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingArtifact, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

}  // namespace lobit::detail
