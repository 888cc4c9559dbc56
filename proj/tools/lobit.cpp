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

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "lobit/lobit.h"

namespace {

void print_line(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

int report(lobit_status st) {
  if (st != LOBIT_OK) std::fprintf(stderr, "lobit: error: %s\n", lobit_last_error());
  return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-bit diffusion toy pipeline"};
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  int jobs = 1;

  app.add_option("command", command, "Pipeline command")
      ->required()
      ->check(CLI::IsMember({"train-teacher", "scan", "plan", "qat", "finetune", "pack", "sample",
                             "eval", "all"}));
  app.add_option("--config", config_path, "Config file")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Root seed (overrides run.seed)");
  auto* jobs_opt = app.add_option("--jobs", jobs, "Parallel scan jobs (overrides run.jobs)")
                       ->check(CLI::PositiveNumber);
  auto* out_opt = app.add_option("--out", out_dir, "Output directory (overrides run.out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return LOBIT_ERR_CONFIG;
  }

  lobit_config* cfg = nullptr;
  lobit_status st = lobit_config_load(config_path.c_str(), &cfg);
  if (st != LOBIT_OK) return report(st);
  if (*seed_opt) st = lobit_config_set(cfg, "run.seed", std::to_string(seed).c_str());
  if (st == LOBIT_OK && *jobs_opt) st = lobit_config_set(cfg, "run.jobs", std::to_string(jobs).c_str());
  if (st == LOBIT_OK && *out_opt) st = lobit_config_set(cfg, "run.out", out_dir.c_str());
  if (st == LOBIT_OK) {
    lobit_set_logger(print_line, nullptr);
    st = lobit_run(cfg, command.c_str());
  }
  lobit_config_free(cfg);
  return report(st);
}
