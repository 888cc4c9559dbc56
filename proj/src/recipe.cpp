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

#include "lobit/recipe.hpp"

#include <algorithm>

#include "json.hpp"
#include "lobit/error.hpp"

namespace lobit {

bool PrecisionRecipe::is_fixed8(const std::string& name) const {
  return std::find(fixed8.begin(), fixed8.end(), name) != fixed8.end();
}

bool PrecisionRecipe::is_excluded(const std::string& name) const {
  return std::find(excluded.begin(), excluded.end(), name) != excluded.end();
}

std::string recipe_to_json(const PrecisionRecipe& r) {
  nlohmann::ordered_json j;
  j["layers"] = nlohmann::ordered_json::object();
  for (const auto& [name, bits] : r.layers) j["layers"][name] = bits;
  j["balanced"] = r.balanced;
  j["fixed8"] = r.fixed8;
  j["excluded"] = r.excluded;
  return j.dump(2) + "\n";
}

PrecisionRecipe recipe_from_json(const std::string& text) {
  PrecisionRecipe r;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& [name, bits] : j.at("layers").items()) {
      const int b = bits.get<int>();
      require(b >= 1 && b <= 8, "recipe: bits for '" + name + "' out of [1, 8]",
              ErrorKind::kFormat);
      r.layers[name] = b;
    }
    r.balanced = j.at("balanced").get<bool>();
    r.fixed8 = j.at("fixed8").get<std::vector<std::string>>();
    r.excluded = j.at("excluded").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("recipe JSON: ") + e.what());
  }
  return r;
}

}  // namespace lobit
