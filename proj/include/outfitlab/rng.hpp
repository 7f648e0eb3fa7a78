#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace outfitlab {

// Every source of randomness in the pipeline draws from a named stream
// derived from the master seed. Streams for different purposes (init,
// batch order, negatives, augmentation, eval) never share state, so
// changing how one consumer draws cannot shift any other consumer.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view tag) : gen_(mix(seed, tag)) {}

  std::mt19937_64& engine() { return gen_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  // Uniform on {lo, ..., hi} inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }

  // Samples an index with probability weights[i] / sum(weights).
  int weighted_index(const std::vector<double>& weights) {
    std::discrete_distribution<int> d(weights.begin(), weights.end());
    return d(gen_);
  }

 private:
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  static std::mt19937_64 mix(std::uint64_t seed, std::string_view tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(fnv1a(tag)),
                      static_cast<std::uint32_t>(fnv1a(tag) >> 32)};
    return std::mt19937_64(seq);
  }

  std::mt19937_64 gen_;
};

}  // namespace outfitlab
