#pragma once

// Dense float64 tensors with a define-by-run reverse-mode differentiation
// graph. Every op below records a node when grad mode is on and at least one
// input requires a gradient; backward() walks those nodes in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cola/errors.hpp"

namespace cola {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs' grad buffers.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient has been produced
  bool requires_grad = false;
  std::shared_ptr<Node> node;
  std::string name;

  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::ptrdiff_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  const std::string& name() const { return impl_->name; }
  Tensor& set_name(std::string name);

  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const;

  // Deep copy of the data as a new leaf (no graph, no grad).
  Tensor clone() const;
  // Shares nothing with the graph; same values.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Grad mode

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Graph

class Graph {
 public:
  // Collects every tensor reachable from `root` that participates in
  // differentiation, inputs before outputs.
  static Graph trace(const Tensor& root);

  const std::vector<std::shared_ptr<TensorImpl>>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<std::shared_ptr<TensorImpl>> order_;
};

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tensor of the
// graph that requires one. Leaves created with requires_grad=false get none.
void backward(const Graph& graph, const Tensor& loss);
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops

enum class Activation { GELU, ReLU };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation kind);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a * s where s holds a single element.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// x[..., N, d] + table[N, d], table repeated over the leading dims.
Tensor add_tiled(const Tensor& x, const Tensor& table);

// 2-D: [m,k]x[k,n]. 3-D: batched over the leading dim.
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T over the last two dims; 2-D or batched 3-D.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x[..., d_in] * w[d_out, d_in]^T (+ bias[d_out]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor softmax_rows(const Tensor& x);
inline constexpr double kLayerNormEps = 1e-5;
// Normalizes over the last dim; gain/bias may be undefined (no affine).
Tensor layer_norm(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {},
                  double eps = kLayerNormEps);
Tensor activation(const Tensor& x, Activation kind);

Tensor reshape(const Tensor& x, const Shape& shape);
// [..., N, d] -> [..., d]
Tensor mean_tokens(const Tensor& x);
Tensor first_token(const Tensor& x);
// [B, d1] ++ [B, d2] -> [B, d1 + d2]
Tensor concat_last(const Tensor& a, const Tensor& b);
// table[V, d], ids with the given leading shape -> [shape..., d]
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& id_shape);
Tensor sum(const Tensor& x);
// Mean cross-entropy of logits[B, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

double gelu_value(double x);

// ---------------------------------------------------------------------------
// Finite differences

// Central-difference gradient of f with respect to theta. theta is perturbed
// in place one coordinate at a time and restored afterwards.
Tensor finite_diff_grad(const std::function<double()>& f, Tensor& theta, double h = 1e-6);

// Same, but on a copy of theta passed to f.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                        double h = 1e-6);

bool all_finite(const Tensor& t);

}  // namespace cola
