#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <functional>
#include <unordered_set>

#include "cola/random.hpp"
#include "cola/tensor.hpp"
#include "oracles.hpp"

using namespace cola;

namespace {

Tensor rand_tensor(Rng& rng, const Shape& shape, bool grad = true) { return rng.normal_tensor(shape, 1.0, grad); }

// erf by its Maclaurin series in long double; converges fast for |x| <= 2.
long double erf_series(long double x) {
  long double term = x, sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    sum += term / (2 * n + 1);
  }
  return 2.0L / std::sqrt(3.14159265358979323846264338327950288L) * sum;
}

// Max relative error between autodiff and central differences for
// loss = sum(op(inputs) * R) with a fixed random R.
double op_gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& op, std::vector<Tensor> inputs,
                    std::uint64_t seed) {
  Rng rng(seed);
  const Tensor probe = [&] {
    NoGradGuard g;
    return op(inputs);
  }();
  const Tensor weights = rng.normal_tensor(probe.shape(), 1.0);
  auto loss = [&] { return sum(mul(op(inputs), weights)); };
  backward(loss());
  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    const Tensor fd = finite_diff_grad([&] { return loss().item(); }, in);
    double scale = 1e-12;
    for (std::size_t i = 0; i < analytic.size(); ++i)
      scale = std::max({scale, std::abs(analytic[i]), std::abs(fd.values()[i])});
    worst = std::max(worst, oracle::max_abs_diff(analytic, fd.values()) / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor shape and data stay consistent") {
  Rng rng(1);
  for (const Shape& s : {Shape{3}, Shape{2, 5}, Shape{4, 1, 3}}) {
    Tensor t = rand_tensor(rng, s);
    CHECK(numel_of(t.shape()) == t.numel());
  }
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("matmul basics") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor x = Tensor::from({2, 2}, {0.5, -2, 3, 7.25});
  CHECK(matmul(eye, x).values() == x.values());
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(a, Tensor::zeros({2, 1})).values() == std::vector<double>{0, 0});

  try {
    matmul(Tensor::zeros({3, 4}), Tensor::zeros({5, 2}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3x4]") != std::string::npos);
    CHECK(msg.find("[5x2]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees exactly with a triple loop on every shape up to 8x8x8") {
  Rng rng(7);
  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t k = 1; k <= 8; ++k)
      for (std::size_t n = 1; n <= 8; ++n) {
        const Tensor a = rand_tensor(rng, {m, k}, false), b = rand_tensor(rng, {k, n}, false);
        const auto ref = oracle::matmul(oracle::from(a), oracle::from(b));
        REQUIRE(matmul(a, b).values() == ref.v);
      }
}

TEST_CASE("batched matmul equals per-slice products") {
  Rng rng(8);
  const Tensor a = rand_tensor(rng, {3, 4, 5}, false), b = rand_tensor(rng, {3, 5, 2}, false);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto ref = oracle::matmul(oracle::slice(a, i), oracle::slice(b, i));
    CHECK(oracle::slice(c, i).v == ref.v);
  }
}

TEST_CASE("softmax rows") {
  const Tensor u = softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor base = softmax_rows(Tensor::from({1, 2}, {0.3, 1.1}));
  const Tensor shifted = softmax_rows(Tensor::from({1, 2}, {100.3, 101.1}));
  CHECK(oracle::max_abs_diff(base.values(), shifted.values()) < 1e-14);

  const Tensor s = softmax_rows(Tensor::from({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const std::vector<double> direct{std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z};
  CHECK(oracle::max_abs_diff(s.values(), direct) < 1e-12);

  Rng rng(3);
  for (int seed = 0; seed < 20; ++seed) {
    const Tensor p = softmax_rows(scale(rand_tensor(rng, {4, 7}, false), 5.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double row = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(p.at(r, j) > 0.0);
        row += p.at(r, j);
      }
      CHECK(std::abs(row - 1.0) < 1e-12);
    }
  }
  CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 0})), ShapeError);
}

TEST_CASE("layer norm") {
  const Tensor c = layer_norm(Tensor::full({1, 4}, 3.5), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : c.values()) CHECK(v == 0.0);

  // Direct formula for x = [1, 3]: mean 2, var 1.
  const Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 2.0), Tensor::full({2}, 1.0));
  const double inv = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  CHECK(std::abs(y.at(0) - (1.0 - 2.0 * inv)) < 1e-15);
  CHECK(std::abs(y.at(1) - (1.0 + 2.0 * inv)) < 1e-15);

  // Pre-affine moments. With eps in the denominator the variance is
  // sigma^2 / (sigma^2 + eps), which is what gets checked.
  Rng rng(11);
  for (int seed = 0; seed < 20; ++seed) {
    const double sd = rng.uniform(0.05, 10.0);
    const Tensor x = rng.normal_tensor({3, 16}, sd);
    const Tensor n = layer_norm(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0.0, var = 0.0, xm = 0.0, xv = 0.0;
      for (std::size_t j = 0; j < 16; ++j) xm += x.at(r, j) / 16.0;
      for (std::size_t j = 0; j < 16; ++j) xv += (x.at(r, j) - xm) * (x.at(r, j) - xm) / 16.0;
      for (std::size_t j = 0; j < 16; ++j) mean += n.at(r, j) / 16.0;
      for (std::size_t j = 0; j < 16; ++j) var += (n.at(r, j) - mean) * (n.at(r, j) - mean) / 16.0;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(std::abs(var - xv / (xv + kLayerNormEps)) < 1e-9);
      if (xv >= 1.0) CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
  CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 0})), ShapeError);
}

TEST_CASE("activations") {
  const Tensor r = activation(Tensor::from({2}, {-1, 2}), Activation::ReLU);
  CHECK(r.values() == std::vector<double>{0, 2});
  CHECK(activation(Tensor::from({1}, {0}), Activation::GELU).item() == 0.0);
  const long double ref = 0.5L * (1.0L + erf_series(1.0L / std::sqrt(2.0L)));
  CHECK(std::abs(gelu_value(1.0) - static_cast<double>(ref)) < 1e-10);
  CHECK(std::abs(activation(Tensor::from({1}, {1}), Activation::GELU).item() - static_cast<double>(ref)) < 1e-10);
  CHECK_THROWS_AS(activation_from_string("swish"), ConfigError);
  CHECK(activation_from_string("gelu") == Activation::GELU);
}

TEST_CASE("backward of sum(W x) is the outer product structure") {
  Rng rng(5);
  Tensor w = rand_tensor(rng, {3, 4});
  const Tensor x = rand_tensor(rng, {4, 1}, false);
  backward(sum(matmul(w, x)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(w.grad()[i * 4 + j] == x.at(j));
  const Tensor fd = finite_diff_grad([&] { return sum(matmul(w, x)).item(); }, w);
  CHECK(oracle::max_abs_diff({w.grad().begin(), w.grad().end()}, fd.values()) < 1e-7);
}

TEST_CASE("disconnected and frozen leaves") {
  Rng rng(6);
  Tensor p = rand_tensor(rng, {2, 2});
  Tensor unused = rand_tensor(rng, {3});
  Tensor frozen = rand_tensor(rng, {2, 2}, false);
  backward(sum(matmul(p, frozen)));
  CHECK(p.has_grad());
  CHECK_FALSE(frozen.has_grad());
  CHECK_FALSE(unused.has_grad());  // no gradient means d/dp = 0 exactly
  CHECK_THROWS_AS(backward(matmul(p, frozen)), ShapeError);
  CHECK_THROWS_AS(backward(sum(frozen)), UsageError);
}

TEST_CASE("composite softmax + layer norm + matmul chain matches central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    Tensor w = rand_tensor(rng, {5, 4});
    Tensor g = rng.uniform_tensor({5}, 1.5, true);
    Tensor x = rand_tensor(rng, {3, 4});
    auto f = [&] { return sum(mul(softmax_rows(layer_norm(linear(x, w), g)), layer_norm(linear(x, w)))); };
    backward(f());
    for (Tensor* t : {&w, &g, &x}) {
      const std::vector<double> a(t->grad().begin(), t->grad().end());
      const Tensor fd = finite_diff_grad([&] { return f().item(); }, *t);
      CHECK(oracle::rel_error(a, fd.values()) < 1e-5);
    }
  }
}

TEST_CASE("every primitive passes the finite-difference check over 20 seeds") {
  using In = std::vector<Tensor>;
  struct Case {
    const char* name;
    std::function<In(Rng&)> make;
    std::function<Tensor(const In&)> op;
  };
  const std::vector<int> ids{0, 3, 1, 3, 4, 0};
  const std::vector<int> labels{2, 0, 1, 1};
  const std::vector<Case> cases{
      {"add", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {3, 4})}; },
       [](const In& v) { return add(v[0], v[1]); }},
      {"sub", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {3, 4})}; },
       [](const In& v) { return sub(v[0], v[1]); }},
      {"mul", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {3, 4})}; },
       [](const In& v) { return mul(v[0], v[1]); }},
      {"scale", [](Rng& r) { return In{rand_tensor(r, {3, 4})}; }, [](const In& v) { return scale(v[0], -1.7); }},
      {"mul_scalar", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {1})}; },
       [](const In& v) { return mul_scalar(v[0], v[1]); }},
      {"add_tiled", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4}), rand_tensor(r, {3, 4})}; },
       [](const In& v) { return add_tiled(v[0], v[1]); }},
      {"matmul", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {4, 2})}; },
       [](const In& v) { return matmul(v[0], v[1]); }},
      {"matmul_batched", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4}), rand_tensor(r, {2, 4, 5})}; },
       [](const In& v) { return matmul(v[0], v[1]); }},
      {"matmul_nt", [](Rng& r) { return In{rand_tensor(r, {3, 4}), rand_tensor(r, {5, 4})}; },
       [](const In& v) { return matmul_nt(v[0], v[1]); }},
      {"matmul_nt_batched", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4}), rand_tensor(r, {2, 5, 4})}; },
       [](const In& v) { return matmul_nt(v[0], v[1]); }},
      {"linear", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4}), rand_tensor(r, {5, 4}), rand_tensor(r, {5})}; },
       [](const In& v) { return linear(v[0], v[1], v[2]); }},
      {"softmax_rows", [](Rng& r) { return In{rand_tensor(r, {3, 5})}; },
       [](const In& v) { return softmax_rows(v[0]); }},
      {"layer_norm", [](Rng& r) { return In{rand_tensor(r, {3, 6}), rand_tensor(r, {6}), rand_tensor(r, {6})}; },
       [](const In& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"gelu", [](Rng& r) { return In{rand_tensor(r, {3, 4})}; },
       [](const In& v) { return activation(v[0], Activation::GELU); }},
      {"relu",
       [](Rng& r) {
         Tensor t = rand_tensor(r, {3, 4});
         for (double& x : t.values()) x += x >= 0 ? 0.1 : -0.1;  // keep away from the kink
         return In{t};
       },
       [](const In& v) { return activation(v[0], Activation::ReLU); }},
      {"reshape", [](Rng& r) { return In{rand_tensor(r, {3, 4})}; },
       [](const In& v) { return reshape(v[0], {2, 6}); }},
      {"mean_tokens", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4})}; },
       [](const In& v) { return mean_tokens(v[0]); }},
      {"first_token", [](Rng& r) { return In{rand_tensor(r, {2, 3, 4})}; },
       [](const In& v) { return first_token(v[0]); }},
      {"concat_last", [](Rng& r) { return In{rand_tensor(r, {2, 3}), rand_tensor(r, {2, 4})}; },
       [](const In& v) { return concat_last(v[0], v[1]); }},
      {"embedding", [](Rng& r) { return In{rand_tensor(r, {5, 3})}; },
       [&ids](const In& v) { return embedding(v[0], ids, {2, 3}); }},
      {"sum", [](Rng& r) { return In{rand_tensor(r, {3, 4})}; }, [](const In& v) { return sum(v[0]); }},
      {"cross_entropy", [](Rng& r) { return In{rand_tensor(r, {4, 3})}; },
       [&labels](const In& v) { return cross_entropy(v[0], labels); }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(derive_seed(seed, c.name));
      worst = std::max(worst, op_gradcheck(c.op, c.make(rng), seed));
    }
    INFO(c.name << " worst relative error " << worst);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("graph order is topological and visits each node once") {
  Rng rng(9);
  Tensor w = rand_tensor(rng, {4, 4});
  Tensor x = rand_tensor(rng, {3, 4});
  Tensor h = linear(x, w);
  Tensor loss = sum(mul(layer_norm(h), softmax_rows(h)));  // h is used twice
  const Graph g = Graph::trace(loss);
  std::unordered_set<const TensorImpl*> seen;
  for (const auto& t : g.order()) {
    CHECK(seen.insert(t.get()).second);
    if (t->node)
      for (const auto& in : t->node->inputs)
        if (in->requires_grad) CHECK(seen.count(in.get()) == 1);
  }
  CHECK(g.order().back().get() == loss.impl().get());
  backward(g, loss);
  const Tensor fd = finite_diff_grad(
      [&] {
        const Tensor hh = linear(x, w);
        return sum(mul(layer_norm(hh), softmax_rows(hh))).item();
      },
      w);
  CHECK(oracle::rel_error({w.grad().begin(), w.grad().end()}, fd.values()) < 1e-5);
}

TEST_CASE("finite differences") {
  Tensor theta = Tensor::from({1}, {3.0});
  CHECK(std::abs(finite_diff_grad([&] { return theta.item() * theta.item(); }, theta).item() - 6.0) < 1e-6);
  CHECK(theta.item() == 3.0);  // restored

  Tensor v = Tensor::from({3}, {1, -2, 0.5});
  const Tensor flat = finite_diff_grad([] { return 4.2; }, v);
  for (double g : flat.values()) CHECK(g == 0.0);
  const Tensor s = finite_diff_grad(
      [](const Tensor& t) { return sum(softmax_rows(reshape(t, {1, 3}))).item(); }, v);
  for (double g : s.values()) CHECK(std::abs(g) < 1e-9);

  CHECK_THROWS_AS(finite_diff_grad([&] { return std::log(v.at(1)); }, v), NumericError);
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(10);
  Tensor w = rand_tensor(rng, {2, 2});
  NoGradGuard guard;
  const Tensor y = sum(w);
  CHECK_FALSE(y.requires_grad());
  CHECK_FALSE(grad_enabled());
}
