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

#ifndef LOBIT_LOBIT_H_
#define LOBIT_LOBIT_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define LOBIT_API __declspec(dllexport)
#else
#define LOBIT_API __attribute__((visibility("default")))
#endif

typedef enum lobit_status {
  LOBIT_OK = 0,
  LOBIT_ERR_INTERNAL = 1,
  LOBIT_ERR_CONFIG = 2,   /* bad config, bad argument, unwritable output */
  LOBIT_ERR_MISSING = 3,  /* prerequisite artifact absent */
  LOBIT_ERR_NUMERIC = 4,  /* NaN loss during training */
  LOBIT_ERR_FORMAT = 5,   /* corrupt or incompatible file */
  LOBIT_ERR_INVALID = 6   /* invalid argument to a low-level call */
} lobit_status;

typedef struct lobit_config lobit_config;
typedef struct lobit_model lobit_model;

/* Message for the last failing call on this thread; never NULL. */
LOBIT_API const char* lobit_last_error(void);
LOBIT_API const char* lobit_version(void);

/* ---- configuration ---------------------------------------------------- */

LOBIT_API lobit_status lobit_config_load(const char* path, lobit_config** out);
LOBIT_API lobit_status lobit_config_parse(const char* text, lobit_config** out);
/* key is "section.key", e.g. "run.seed". */
LOBIT_API lobit_status lobit_config_set(lobit_config* cfg, const char* key, const char* value);
/* Serialized config; the string is owned by cfg and valid until the next call. */
LOBIT_API const char* lobit_config_text(lobit_config* cfg);
LOBIT_API void lobit_config_free(lobit_config* cfg);

/* ---- pipeline commands ------------------------------------------------ */

/* Progress callback; may be NULL. */
typedef void (*lobit_log_fn)(const char* line, void* user);
LOBIT_API void lobit_set_logger(lobit_log_fn fn, void* user);

/* Runs a command ("train-teacher", "scan", "plan", "qat", "finetune",
   "pack", "sample", "eval", "all") with artifacts under run.out. */
LOBIT_API lobit_status lobit_run(const lobit_config* cfg, const char* command);

/* ---- low-level helpers ------------------------------------------------ */

LOBIT_API lobit_status lobit_effective_bits(int bits, int balanced, double* out);
LOBIT_API lobit_status lobit_packed_size(uint64_t code_count, uint32_t levels, size_t* out);
/* Packs codes (each < levels) into out, which must hold lobit_packed_size bytes. */
LOBIT_API lobit_status lobit_pack_codes(const uint16_t* codes, uint64_t count, uint32_t levels,
                                        uint8_t* out, size_t out_size);
LOBIT_API lobit_status lobit_unpack_codes(const uint8_t* data, size_t size, uint64_t count,
                                          uint32_t levels, uint16_t* out);

/* Packed model inspection. */
LOBIT_API lobit_status lobit_model_open(const char* path, lobit_model** out);
LOBIT_API size_t lobit_model_layer_count(const lobit_model* m);
/* Name is owned by the model. */
LOBIT_API lobit_status lobit_model_layer_info(const lobit_model* m, size_t index, const char** name,
                                              int* bits, int* balanced, uint64_t* weights);
LOBIT_API size_t lobit_model_time_feature_count(const lobit_model* m);
LOBIT_API void lobit_model_free(lobit_model* m);

#ifdef __cplusplus
}
#endif

#endif /* LOBIT_LOBIT_H_ */
