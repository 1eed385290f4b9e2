#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "cola/tensor.hpp"

namespace cola {

// Derives an independent stream seed from a root seed and a tag.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  Tensor uniform_tensor(const Shape& shape, double bound, bool requires_grad = false);
  Tensor normal_tensor(const Shape& shape, double stddev, bool requires_grad = false);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Kaiming-uniform with a = sqrt(5), the LoRA convention: bound = 1/sqrt(fan_in).
Tensor kaiming_uniform(Rng& rng, std::size_t rows, std::size_t fan_in, bool requires_grad = true);
Tensor xavier_uniform(Rng& rng, std::size_t fan_out, std::size_t fan_in, bool requires_grad = true);

}  // namespace cola
