#include "cola/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace cola {

namespace {

thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor make_out(const Shape& shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(numel_of(shape), 0.0);
  return Tensor(std::move(impl));
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

void record(Tensor& out, std::string op, std::initializer_list<const Tensor*> inputs,
            std::function<void(const TensorImpl&)> fn) {
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined()) node->inputs.push_back(t->impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
}

// Returns the grad buffer of `t` if it takes gradients, else nullptr.
double* grad_sink(const ImplPtr& t) {
  if (!t || !t->requires_grad) return nullptr;
  t->ensure_grad();
  return t->grad.data();
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// C (+)= A[m,k] * B[k,n]. Accumulation over k runs in index order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose_into(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
  dst.resize(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C (+)= A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<double> bt;
  transpose_into(b, n, k, bt);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

struct MatDims {
  std::size_t batch, rows, cols;
};

MatDims mat_dims(const Tensor& t, const std::string& op) {
  if (t.dim() == 2) return {1, t.shape()[0], t.shape()[1]};
  if (t.dim() == 3) return {t.shape()[0], t.shape()[1], t.shape()[2]};
  throw ShapeError(op + ": expected a 2-D or 3-D tensor, got " + shape_str(t.shape()));
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

std::size_t last_dim(const Tensor& x, const std::string& op) {
  if (x.dim() == 0 || x.shape().back() == 0)
    throw ShapeError(op + ": empty last dimension in " + shape_str(x.shape()));
  return x.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(numel_of(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size())
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(numel_of(shape)) + " values, got " + std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

std::size_t Tensor::size(std::ptrdiff_t axis) const {
  const auto n = static_cast<std::ptrdiff_t>(dim());
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(axis)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

Tensor& Tensor::set_name(std::string name) {
  impl_->name = std::move(name);
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor has shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (dim() != 2) throw ShapeError("at(i, j) on tensor of shape " + shape_str(shape()));
  return impl_->data.at(i * shape()[1] + j);
}

Tensor Tensor::clone() const {
  Tensor t = from(shape(), impl_->data, false);
  t.set_name(impl_->name);
  return t;
}

// ---------------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Graph Graph::trace(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.requires_grad()) return g;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* inputs = impl->node ? &impl->node->inputs : nullptr;
    if (inputs != nullptr && next < inputs->size()) {
      const ImplPtr& in = (*inputs)[next++];
      if (in->requires_grad && visited.insert(in.get()).second) stack.emplace_back(in, 0);
      continue;
    }
    g.order_.push_back(impl);
    stack.pop_back();
  }
  return g;
}

void backward(const Graph& graph, const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward: loss does not depend on any trainable tensor");
  if (graph.order().empty() || graph.order().back() != loss.impl())
    throw UsageError("backward: graph was not traced from this loss");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl& t = **it;
    if (t.node && !t.grad.empty()) t.node->backward(t);
  }
}

void backward(const Tensor& loss) { backward(Graph::trace(loss), loss); }

// ---------------------------------------------------------------------------

Activation activation_from_string(const std::string& name) {
  if (name == "gelu" || name == "GELU") return Activation::GELU;
  if (name == "relu" || name == "ReLU") return Activation::ReLU;
  throw ConfigError("unknown activation '" + name + "' (expected gelu or relu)");
}

std::string to_string(Activation kind) { return kind == Activation::GELU ? "gelu" : "relu"; }

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_out(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] + b.values()[i];
  if (wants_grad({&a, &b})) {
    record(out, "add", {&a, &b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& y) {
      for (const auto& in : {ai, bi})
        if (double* g = grad_sink(in))
          for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_out(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] - b.values()[i];
  if (wants_grad({&a, &b})) {
    record(out, "sub", {&a, &b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& y) {
      if (double* g = grad_sink(ai))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i];
      if (double* g = grad_sink(bi))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] -= y.grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_out(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] * b.values()[i];
  if (wants_grad({&a, &b})) {
    record(out, "mul", {&a, &b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& y) {
      if (double* g = grad_sink(ai))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i] * bi->data[i];
      if (double* g = grad_sink(bi))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i] * ai->data[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = make_out(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] * factor;
  if (wants_grad({&a})) {
    record(out, "scale", {&a}, [ai = a.impl(), factor](const TensorImpl& y) {
      double* g = grad_sink(ai);
      for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i] * factor;
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: expected a one-element scale, got " + shape_str(s.shape()));
  const double sv = s.values()[0];
  Tensor out = make_out(a.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.values()[i] * sv;
  if (wants_grad({&a, &s})) {
    record(out, "mul_scalar", {&a, &s}, [ai = a.impl(), si = s.impl()](const TensorImpl& y) {
      if (double* g = grad_sink(ai)) {
        const double sv = si->data[0];
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i] * sv;
      }
      if (double* g = grad_sink(si)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < y.grad.size(); ++i) acc += y.grad[i] * ai->data[i];
        g[0] += acc;
      }
    });
  }
  return out;
}

Tensor add_tiled(const Tensor& x, const Tensor& table) {
  const std::size_t tn = table.numel();
  const bool trailing_match =
      table.dim() <= x.dim() &&
      std::equal(table.shape().begin(), table.shape().end(), x.shape().end() - static_cast<std::ptrdiff_t>(table.dim()));
  if (!trailing_match || tn == 0) shape_fail("add_tiled", x.shape(), table.shape());
  Tensor out = make_out(x.shape());
  auto& o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.values()[i] + table.values()[i % tn];
  if (wants_grad({&x, &table})) {
    record(out, "add_tiled", {&x, &table}, [xi = x.impl(), ti = table.impl(), tn](const TensorImpl& y) {
      if (double* g = grad_sink(xi))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i];
      if (double* g = grad_sink(ti))
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i % tn] += y.grad[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatDims da = mat_dims(a, "matmul");
  const MatDims db = mat_dims(b, "matmul");
  if (a.dim() != b.dim() || da.batch != db.batch || da.cols != db.rows) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = da.rows, k = da.cols, n = db.cols;
  Shape shape = a.dim() == 2 ? Shape{m, n} : Shape{da.batch, m, n};
  Tensor out = make_out(shape);
  for (std::size_t bi = 0; bi < da.batch; ++bi)
    gemm_nn(a.values().data() + bi * m * k, b.values().data() + bi * k * n, out.values().data() + bi * m * n, m,
            k, n, false);
  if (wants_grad({&a, &b})) {
    record(out, "matmul", {&a, &b}, [ai = a.impl(), bi_ = b.impl(), da, m, k, n](const TensorImpl& y) {
      double* ga = grad_sink(ai);
      double* gb = grad_sink(bi_);
      for (std::size_t bi = 0; bi < da.batch; ++bi) {
        const double* dy = y.grad.data() + bi * m * n;
        if (ga) gemm_nt(dy, bi_->data.data() + bi * k * n, ga + bi * m * k, m, n, k, true);
        if (gb) gemm_tn(ai->data.data() + bi * m * k, dy, gb + bi * k * n, m, k, n, true);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const MatDims da = mat_dims(a, "matmul_nt");
  const MatDims db = mat_dims(b, "matmul_nt");
  if (a.dim() != b.dim() || da.batch != db.batch || da.cols != db.cols) shape_fail("matmul_nt", a.shape(), b.shape());
  const std::size_t m = da.rows, k = da.cols, n = db.rows;
  Shape shape = a.dim() == 2 ? Shape{m, n} : Shape{da.batch, m, n};
  Tensor out = make_out(shape);
  for (std::size_t bi = 0; bi < da.batch; ++bi)
    gemm_nt(a.values().data() + bi * m * k, b.values().data() + bi * n * k, out.values().data() + bi * m * n, m,
            k, n, false);
  if (wants_grad({&a, &b})) {
    record(out, "matmul_nt", {&a, &b}, [ai = a.impl(), bi_ = b.impl(), da, m, k, n](const TensorImpl& y) {
      double* ga = grad_sink(ai);
      double* gb = grad_sink(bi_);
      for (std::size_t bi = 0; bi < da.batch; ++bi) {
        const double* dy = y.grad.data() + bi * m * n;
        if (ga) gemm_nn(dy, bi_->data.data() + bi * n * k, ga + bi * m * k, m, n, k, true);
        if (gb) gemm_tn(dy, ai->data.data() + bi * m * k, gb + bi * n * k, m, n, k, true);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.dim() != 2 || x.dim() == 0 || x.shape().back() != w.shape()[1]) shape_fail("linear", x.shape(), w.shape());
  const std::size_t d_out = w.shape()[0], d_in = w.shape()[1];
  if (bias.defined() && (bias.numel() != d_out)) shape_fail("linear(bias)", w.shape(), bias.shape());
  const std::size_t rows = x.numel() / d_in;
  Shape shape = x.shape();
  shape.back() = d_out;
  Tensor out = make_out(shape);
  gemm_nt(x.values().data(), w.values().data(), out.values().data(), rows, d_in, d_out, false);
  if (bias.defined()) {
    auto& o = out.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d_out; ++j) o[r * d_out + j] += bias.values()[j];
  }
  if (wants_grad({&x, &w, &bias})) {
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    record(out, "linear", {&x, &w, &bias},
           [xi = x.impl(), wi = w.impl(), bi, rows, d_in, d_out](const TensorImpl& y) {
             if (double* g = grad_sink(xi)) gemm_nn(y.grad.data(), wi->data.data(), g, rows, d_out, d_in, true);
             if (double* g = grad_sink(wi)) gemm_tn(y.grad.data(), xi->data.data(), g, rows, d_out, d_in, true);
             if (double* g = grad_sink(bi))
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < d_out; ++j) g[j] += y.grad[r * d_out + j];
           });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = last_dim(x, "softmax_rows");
  const std::size_t rows = x.numel() / n;
  Tensor out = make_out(x.shape());
  const auto& in = x.values();
  auto& o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * n;
    double* yr = o.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  if (wants_grad({&x})) {
    record(out, "softmax_rows", {&x}, [xi = x.impl(), rows, n](const TensorImpl& y) {
      double* g = grad_sink(xi);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data.data() + r * n;
        const double* dy = y.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += yr[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (gain.defined() && gain.numel() != d) shape_fail("layer_norm(gain)", x.shape(), gain.shape());
  if (bias.defined() && bias.numel() != d) shape_fail("layer_norm(bias)", x.shape(), bias.shape());
  const std::size_t rows = x.numel() / d;
  Tensor out = make_out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto& in = x.values();
  auto& o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv;
      xhat[r * d + j] = h;
      double v = gain.defined() ? h * gain.values()[j] : h;
      if (bias.defined()) v += bias.values()[j];
      o[r * d + j] = v;
    }
  }
  if (wants_grad({&x, &gain, &bias})) {
    ImplPtr gi = gain.defined() ? gain.impl() : nullptr;
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    record(out, "layer_norm", {&x, &gain, &bias},
           [xi = x.impl(), gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
            d](const TensorImpl& y) {
             double* gx = grad_sink(xi);
             double* gg = grad_sink(gi);
             double* gb = grad_sink(bi);
             std::vector<double> dh(d);
             for (std::size_t r = 0; r < rows; ++r) {
               const double* dy = y.grad.data() + r * d;
               const double* hr = xhat.data() + r * d;
               double sum_dh = 0.0, sum_dh_h = 0.0;
               for (std::size_t j = 0; j < d; ++j) {
                 if (gg) gg[j] += dy[j] * hr[j];
                 if (gb) gb[j] += dy[j];
                 dh[j] = gi ? dy[j] * gi->data[j] : dy[j];
                 sum_dh += dh[j];
                 sum_dh_h += dh[j] * hr[j];
               }
               if (gx) {
                 const double inv_d = 1.0 / static_cast<double>(d);
                 for (std::size_t j = 0; j < d; ++j)
                   gx[r * d + j] += inv_std[r] * (dh[j] - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
               }
             }
           });
  }
  return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Tensor activation(const Tensor& x, Activation kind) {
  Tensor out = make_out(x.shape());
  const auto& in = x.values();
  auto& o = out.values();
  switch (kind) {
    case Activation::GELU:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = gelu_value(in[i]);
      break;
    case Activation::ReLU:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    default:
      throw ConfigError("activation: unsupported kind");
  }
  if (wants_grad({&x})) {
    record(out, kind == Activation::GELU ? "gelu" : "relu", {&x}, [xi = x.impl(), kind](const TensorImpl& y) {
      double* g = grad_sink(xi);
      const auto& xv = xi->data;
      if (kind == Activation::GELU) {
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < y.grad.size(); ++i) {
          const double v = xv[i];
          const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          g[i] += y.grad[i] * (cdf + v * pdf);
        }
      } else {
        for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += xv[i] > 0.0 ? y.grad[i] : 0.0;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  Tensor out = Tensor::from(shape, x.values());
  if (wants_grad({&x})) {
    record(out, "reshape", {&x}, [xi = x.impl()](const TensorImpl& y) {
      double* g = grad_sink(xi);
      for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i];
    });
  }
  return out;
}

namespace {

struct TokenDims {
  std::size_t groups, tokens, width;
};

TokenDims token_dims(const Tensor& x, const std::string& op) {
  if (x.dim() < 2) throw ShapeError(op + ": expected [..., N, d], got " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  const std::size_t n = x.shape()[x.dim() - 2];
  if (n == 0) throw ShapeError(op + ": no tokens in " + shape_str(x.shape()));
  return {x.numel() / (n * d), n, d};
}

Shape drop_token_axis(const Shape& s) {
  Shape out(s.begin(), s.end() - 2);
  out.push_back(s.back());
  return out;
}

}  // namespace

Tensor mean_tokens(const Tensor& x) {
  const TokenDims td = token_dims(x, "mean_tokens");
  Tensor out = make_out(drop_token_axis(x.shape()));
  const auto& in = x.values();
  auto& o = out.values();
  const double inv_n = 1.0 / static_cast<double>(td.tokens);
  for (std::size_t b = 0; b < td.groups; ++b) {
    double* orow = o.data() + b * td.width;
    for (std::size_t t = 0; t < td.tokens; ++t) {
      const double* xr = in.data() + (b * td.tokens + t) * td.width;
      for (std::size_t j = 0; j < td.width; ++j) orow[j] += xr[j];
    }
    for (std::size_t j = 0; j < td.width; ++j) orow[j] *= inv_n;
  }
  if (wants_grad({&x})) {
    record(out, "mean_tokens", {&x}, [xi = x.impl(), td, inv_n](const TensorImpl& y) {
      double* g = grad_sink(xi);
      for (std::size_t b = 0; b < td.groups; ++b)
        for (std::size_t t = 0; t < td.tokens; ++t)
          for (std::size_t j = 0; j < td.width; ++j)
            g[(b * td.tokens + t) * td.width + j] += y.grad[b * td.width + j] * inv_n;
    });
  }
  return out;
}

Tensor first_token(const Tensor& x) {
  const TokenDims td = token_dims(x, "first_token");
  Tensor out = make_out(drop_token_axis(x.shape()));
  for (std::size_t b = 0; b < td.groups; ++b)
    std::copy_n(x.values().data() + b * td.tokens * td.width, td.width, out.values().data() + b * td.width);
  if (wants_grad({&x})) {
    record(out, "first_token", {&x}, [xi = x.impl(), td](const TensorImpl& y) {
      double* g = grad_sink(xi);
      for (std::size_t b = 0; b < td.groups; ++b)
        for (std::size_t j = 0; j < td.width; ++j) g[b * td.tokens * td.width + j] += y.grad[b * td.width + j];
    });
  }
  return out;
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[0] != b.shape()[0]) shape_fail("concat_last", a.shape(), b.shape());
  const std::size_t rows = a.shape()[0], d1 = a.shape()[1], d2 = b.shape()[1];
  Tensor out = make_out({rows, d1 + d2});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().data() + r * d1, d1, out.values().data() + r * (d1 + d2));
    std::copy_n(b.values().data() + r * d2, d2, out.values().data() + r * (d1 + d2) + d1);
  }
  if (wants_grad({&a, &b})) {
    record(out, "concat_last", {&a, &b}, [ai = a.impl(), bi = b.impl(), rows, d1, d2](const TensorImpl& y) {
      double* ga = grad_sink(ai);
      double* gb = grad_sink(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = y.grad.data() + r * (d1 + d2);
        if (ga)
          for (std::size_t j = 0; j < d1; ++j) ga[r * d1 + j] += dy[j];
        if (gb)
          for (std::size_t j = 0; j < d2; ++j) gb[r * d2 + j] += dy[d1 + j];
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& id_shape) {
  if (table.dim() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (numel_of(id_shape) != ids.size()) throw ShapeError("embedding: id shape " + shape_str(id_shape) + " does not match id count");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw ShapeError("embedding: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  Shape shape = id_shape;
  shape.push_back(d);
  Tensor out = make_out(shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d, out.values().data() + i * d);
  if (wants_grad({&table})) {
    record(out, "embedding", {&table},
           [ti = table.impl(), ids = std::vector<int>(ids.begin(), ids.end()), d](const TensorImpl& y) {
             double* g = grad_sink(ti);
             for (std::size_t i = 0; i < ids.size(); ++i)
               for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += y.grad[i * d + j];
           });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = make_out({1});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out.values()[0] = acc;
  if (wants_grad({&x})) {
    record(out, "sum", {&x}, [xi = x.impl()](const TensorImpl& y) {
      double* g = grad_sink(xi);
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += y.grad[0];
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || logits.shape()[0] != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t rows = logits.shape()[0], c = logits.shape()[1];
  std::vector<double> probs(rows * c);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= c)
      throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside " + std::to_string(c) + " classes");
    const double* z = logits.values().data() + r * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[r * c + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= s;
    total += (std::log(s) + mx) - z[label];
  }
  Tensor out = make_out({1});
  out.values()[0] = total / static_cast<double>(rows);
  if (wants_grad({&logits})) {
    record(out, "cross_entropy", {&logits},
           [li = logits.impl(), probs = std::move(probs), labels = std::vector<int>(labels.begin(), labels.end()),
            rows, c](const TensorImpl& y) {
             double* g = grad_sink(li);
             const double w = y.grad[0] / static_cast<double>(rows);
             for (std::size_t r = 0; r < rows; ++r)
               for (std::size_t j = 0; j < c; ++j) {
                 const double target = static_cast<int>(j) == labels[r] ? 1.0 : 0.0;
                 g[r * c + j] += w * (probs[r * c + j] - target);
               }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double()>& f, Tensor& theta, double h) {
  if (!(h > 0.0)) throw UsageError("finite_diff_grad: step must be positive");
  NoGradGuard no_grad;
  Tensor out = Tensor::zeros(theta.shape());
  auto& v = theta.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double fp = f();
    v[i] = saved - h;
    const double fm = f();
    v[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    out.values()[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta, double h) {
  Tensor probe = theta.clone();
  return finite_diff_grad([&] { return f(probe); }, probe, h);
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cola
