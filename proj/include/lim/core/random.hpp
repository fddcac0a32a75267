// Copyright (c) 2026 The lim authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "lim/error.hpp"

namespace lim {

// Every source of randomness in the project is an Rng stream derived from
// one root seed and a stream name ("corpus", "init/encoder", "sampler/w0",
// ...), so subsystems are independently reproducible. Distributions are
// implemented by hand on top of std::mt19937_64: the engine's sequence is
// fixed by the standard, while <random> distributions are not, and we need
// bit-identical output across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  static uint64_t derive_seed(uint64_t root, std::string_view name) {
    // FNV-1a over the name, mixed with the root through splitmix64.
    uint64_t h = 1469598103934665603ull;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    uint64_t z = root ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static Rng stream(uint64_t root, std::string_view name) {
    return Rng(derive_seed(root, name));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw DomainError("uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = std::numeric_limits<uint64_t>::max() / un * un;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return static_cast<int64_t>(r % un);
  }

  // Box-Muller without caching so the stream state stays trivially
  // serializable; each call consumes exactly two engine draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = uniform_int(static_cast<int64_t>(i) + 1);
      std::swap(first[i], first[j]);
    }
  }

  std::string serialize_state() const {
    std::ostringstream oss;
    oss << engine_;
    return oss.str();
  }

  void restore_state(const std::string& blob) {
    std::istringstream iss(blob);
    iss >> engine_;
    if (iss.fail()) throw FormatError("Rng: malformed serialized state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lim
