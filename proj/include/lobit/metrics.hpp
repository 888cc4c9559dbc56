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

#ifndef LOBIT_METRICS_HPP_
#define LOBIT_METRICS_HPP_

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace lobit::metrics {

// Seeded random stream over std::mt19937_64.
//
//   uniform():  (next() >> 11) * 2^-53, in [0, 1)
//   normal():   Box-Muller on two uniforms, u1 mapped to (0, 1] as 1 - u1;
//               the second variate of each pair is cached and returned next.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();
  double normal();
  // Uniform integer in [0, n) via 128-bit multiply-shift (Lemire, no rejection).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used for every seed derivation in the project.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);
// FNV-1a, lets seed derivations be keyed by a purpose string.
std::uint64_t hash_string(std::string_view s);

// Returned by psnr() when the two sample sets are identical.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

double mse(std::span<const double> a, std::span<const double> b);
double psnr(std::span<const double> a, std::span<const double> b,
            double range = 2.0);
double psnr_from_mse(double mse, double range = 2.0);
double pearson(std::span<const double> x, std::span<const double> y);
double skewness(std::span<const double> x);

}  // namespace lobit::metrics

#endif  // LOBIT_METRICS_HPP_
