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

#ifndef LOBIT_RECIPE_HPP_
#define LOBIT_RECIPE_HPP_

#include <map>
#include <string>
#include <vector>

namespace lobit {

// Per-layer bit assignment. `layers` holds the planned (low-bit) layers,
// `fixed8` the first/last layers pinned at 8-bit unbalanced, and `excluded`
// the time projections that are replaced by cached features at deploy time.
struct PrecisionRecipe {
  std::map<std::string, int> layers;
  bool balanced = true;
  std::vector<std::string> fixed8;
  std::vector<std::string> excluded;

  bool is_fixed8(const std::string& name) const;
  bool is_excluded(const std::string& name) const;
};

std::string recipe_to_json(const PrecisionRecipe& r);
PrecisionRecipe recipe_from_json(const std::string& text);

}  // namespace lobit

#endif  // LOBIT_RECIPE_HPP_
