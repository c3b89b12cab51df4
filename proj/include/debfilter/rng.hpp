/*
 * Copyright 2026 The DebFilter Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "debfilter/common.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace debfilter {

// Portable hashing and sampling. std::mt19937_64 has a fully specified output
// sequence; the distributions on top of it are implemented here because the
// standard library ones differ between vendors.

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

// Order-sensitive combination of several keys into one 64-bit seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys);
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

// Uniform in [0, 1) from the top 53 bits.
double to_unit_double(std::uint64_t bits);

// Counter-based uniform draw: the same (key, counter) always yields the same value.
double counter_uniform(std::uint64_t key, std::uint64_t counter);

class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double next();
  Vector vector(Eigen::Index n, double stddev = 1.0);
  Matrix matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace debfilter
