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

#include "lobit/lobit.h"

#include <exception>
#include <new>
#include <string>

#include "lobit/bitpack.hpp"
#include "lobit/config.hpp"
#include "lobit/error.hpp"
#include "lobit/pipeline.hpp"
#include "lobit/quantizer.hpp"

struct lobit_config {
  lobit::RunConfig cfg;
  std::string text;
};

struct lobit_model {
  lobit::bitpack::PackedModel packed;
};

namespace {

thread_local std::string g_last_error;

lobit_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

lobit_status status_of(lobit::ErrorKind kind) {
  using lobit::ErrorKind;
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kIo:
      return LOBIT_ERR_CONFIG;
    case ErrorKind::kMissingArtifact:
      return LOBIT_ERR_MISSING;
    case ErrorKind::kNumeric:
      return LOBIT_ERR_NUMERIC;
    case ErrorKind::kFormat:
    case ErrorKind::kCrcMismatch:
    case ErrorKind::kBadMagic:
    case ErrorKind::kUnsupportedVersion:
      return LOBIT_ERR_FORMAT;
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kShapeMismatch:
      return LOBIT_ERR_INVALID;
  }
  return LOBIT_ERR_INTERNAL;
}

template <typename F>
lobit_status guarded(F&& f) {
  try {
    f();
    return LOBIT_OK;
  } catch (const lobit::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return LOBIT_ERR_INTERNAL;
}

lobit_status null_arg(const char* what) {
  g_last_error = std::string("null argument: ") + what;
  return LOBIT_ERR_INVALID;
}

}  // namespace

extern "C" {

const char* lobit_last_error(void) { return g_last_error.c_str(); }

const char* lobit_version(void) { return "0.1.0"; }

lobit_status lobit_config_load(const char* path, lobit_config** out) {
  if (!path || !out) return null_arg("path/out");
  return guarded([&] { *out = new lobit_config{lobit::load_config(path), {}}; });
}

lobit_status lobit_config_parse(const char* text, lobit_config** out) {
  if (!text || !out) return null_arg("text/out");
  return guarded([&] { *out = new lobit_config{lobit::parse_config(text), {}}; });
}

lobit_status lobit_config_set(lobit_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_arg("cfg/key/value");
  return guarded([&] {
    lobit::RunConfig next = cfg->cfg;
    lobit::set_config_value(next, key, value);
    cfg->cfg = std::move(next);
  });
}

const char* lobit_config_text(lobit_config* cfg) {
  if (!cfg) return "";
  cfg->text = lobit::config_to_text(cfg->cfg);
  return cfg->text.c_str();
}

void lobit_config_free(lobit_config* cfg) { delete cfg; }

void lobit_set_logger(lobit_log_fn fn, void* user) {
  g_log_fn = fn;
  g_log_user = user;
}

lobit_status lobit_run(const lobit_config* cfg, const char* command) {
  if (!cfg || !command) return null_arg("cfg/command");
  return guarded([&] {
    lobit::pipeline::Context ctx{cfg->cfg, cfg->cfg.out, {}};
    if (g_log_fn) {
      lobit_log_fn fn = g_log_fn;
      void* user = g_log_user;
      ctx.log = [fn, user](const std::string& line) { fn(line.c_str(), user); };
    }
    lobit::pipeline::run_command(command, ctx);
  });
}

lobit_status lobit_effective_bits(int bits, int balanced, double* out) {
  if (!out) return null_arg("out");
  return guarded([&] {
    *out = lobit::quant::effective_bits(lobit::quant::QuantSpec{bits, balanced != 0, 0});
  });
}

lobit_status lobit_packed_size(uint64_t code_count, uint32_t levels, size_t* out) {
  if (!out) return null_arg("out");
  return guarded([&] { *out = lobit::bitpack::packed_size(code_count, levels); });
}

lobit_status lobit_pack_codes(const uint16_t* codes, uint64_t count, uint32_t levels, uint8_t* out,
                              size_t out_size) {
  if ((!codes && count) || !out) return null_arg("codes/out");
  return guarded([&] {
    const lobit::bitpack::PackedBlob blob =
        lobit::bitpack::pack_codes({codes, static_cast<std::size_t>(count)}, levels);
    lobit::require(blob.data.size() <= out_size,
                   "output buffer holds " + std::to_string(out_size) + " bytes, need " +
                       std::to_string(blob.data.size()));
    std::copy(blob.data.begin(), blob.data.end(), out);
  });
}

lobit_status lobit_unpack_codes(const uint8_t* data, size_t size, uint64_t count, uint32_t levels,
                                uint16_t* out) {
  if ((!data && size) || (!out && count)) return null_arg("data/out");
  return guarded([&] {
    lobit::bitpack::PackedBlob blob;
    blob.level_count = levels;
    blob.code_count = count;
    blob.group_size = lobit::bitpack::group_size(levels);
    blob.data.assign(data, data + size);
    const std::vector<std::uint16_t> codes = lobit::bitpack::unpack_codes(blob);
    std::copy(codes.begin(), codes.end(), out);
  });
}

lobit_status lobit_model_open(const char* path, lobit_model** out) {
  if (!path || !out) return null_arg("path/out");
  return guarded([&] { *out = new lobit_model{lobit::bitpack::read_model(path)}; });
}

size_t lobit_model_layer_count(const lobit_model* m) { return m ? m->packed.layers.size() : 0; }

lobit_status lobit_model_layer_info(const lobit_model* m, size_t index, const char** name,
                                    int* bits, int* balanced, uint64_t* weights) {
  if (!m) return null_arg("model");
  if (index >= m->packed.layers.size()) {
    g_last_error = "layer index " + std::to_string(index) + " out of range";
    return LOBIT_ERR_INVALID;
  }
  const auto& l = m->packed.layers[index];
  if (name) *name = l.name.c_str();
  if (bits) *bits = l.spec.bits;
  if (balanced) *balanced = l.spec.balanced ? 1 : 0;
  if (weights) *weights = l.blob.code_count;
  return LOBIT_OK;
}

size_t lobit_model_time_feature_count(const lobit_model* m) {
  return m ? m->packed.time_features.values.size() : 0;
}

void lobit_model_free(lobit_model* m) { delete m; }

}  // extern "C"
