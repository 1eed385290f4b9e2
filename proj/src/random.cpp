#include "cola/random.hpp"

#include <cmath>

namespace cola {

std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  // FNV-1a over the tag, then a splitmix64 finalizer mixed with the root.
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (h | 1ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor Rng::uniform_tensor(const Shape& shape, double bound, bool requires_grad) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.values()) v = uniform(-bound, bound);
  return t;
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev, bool requires_grad) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.values()) v = normal(0.0, stddev);
  return t;
}

Tensor kaiming_uniform(Rng& rng, std::size_t rows, std::size_t fan_in, bool requires_grad) {
  return rng.uniform_tensor({rows, fan_in}, 1.0 / std::sqrt(static_cast<double>(fan_in)), requires_grad);
}

Tensor xavier_uniform(Rng& rng, std::size_t fan_out, std::size_t fan_in, bool requires_grad) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng.uniform_tensor({fan_out, fan_in}, bound, requires_grad);
}

}  // namespace cola
