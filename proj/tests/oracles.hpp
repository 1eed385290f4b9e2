#pragma once

// Straight-line reference implementations used as test oracles. Nothing here
// goes through the tensor ops or the autodiff graph: plain loops over
// row-major buffers, deltas materialized densely.

#include <cmath>
#include <optional>
#include <vector>

#include "cola/dual_encoder.hpp"
#include "cola/random.hpp"

namespace oracle {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat from(const cola::Tensor& t) {
  Mat m(t.dim() == 1 ? 1 : t.shape()[0], t.shape().back());
  m.v = t.values();
  return m;
}

// Rows [b*n, (b+1)*n) of a [B, n, d] tensor.
inline Mat slice(const cola::Tensor& t, std::size_t b) {
  const std::size_t n = t.shape()[1], d = t.shape()[2];
  Mat m(n, d);
  std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(b * n * d), n * d, m.v.begin());
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Mat scaled(Mat a, double s) {
  for (double& x : a.v) x *= s;
  return a;
}

inline Mat softmax_rows(Mat a) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols; ++j) mx = std::max(mx, a(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += std::exp(a(i, j) - mx);
    for (std::size_t j = 0; j < a.cols; ++j) a(i, j) = std::exp(a(i, j) - mx) / s;
  }
  return a;
}

inline Mat layer_norm(Mat a, const std::vector<double>& gain, const std::vector<double>& bias, double eps = 1e-5) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) mean += a(i, j);
    mean /= static_cast<double>(a.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) var += (a(i, j) - mean) * (a(i, j) - mean);
    var /= static_cast<double>(a.cols);
    for (std::size_t j = 0; j < a.cols; ++j) {
      double y = (a(i, j) - mean) / std::sqrt(var + eps);
      if (!gain.empty()) y *= gain[j];
      if (!bias.empty()) y += bias[j];
      a(i, j) = y;
    }
  }
  return a;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat act(Mat a, cola::Activation kind) {
  for (double& x : a.v) x = kind == cola::Activation::GELU ? gelu(x) : std::max(0.0, x);
  return a;
}

inline std::vector<double> mean_rows(const Mat& a) {
  std::vector<double> out(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out[j] += a(i, j);
  for (double& x : out) x /= static_cast<double>(a.rows);
  return out;
}

inline std::vector<double> pool(const Mat& a, cola::Pooling mode) {
  if (mode == cola::Pooling::Mean) return mean_rows(a);
  return {a.v.begin(), a.v.begin() + static_cast<std::ptrdiff_t>(a.cols)};
}

// Phi = LN(W_up LN(act(W_down xbar + b_down)) + b_up) as an r x r matrix.
inline Mat hypernet(const cola::Hypernet& hn, const std::vector<double>& xbar) {
  auto vec = [](const cola::Tensor& t) { return t.defined() ? t.values() : std::vector<double>{}; };
  Mat x(1, xbar.size());
  x.v = xbar;
  Mat h = matmul(x, transpose(from(hn.w_down)));
  if (hn.b_down.defined())
    for (std::size_t j = 0; j < h.cols; ++j) h(0, j) += hn.b_down.values()[j];
  h = layer_norm(act(h, hn.act), vec(hn.ln_inner_gain), vec(hn.ln_inner_bias));
  Mat u = matmul(h, transpose(from(hn.w_up)));
  if (hn.b_up.defined())
    for (std::size_t j = 0; j < u.cols; ++j) u(0, j) += hn.b_up.values()[j];
  u = layer_norm(u, vec(hn.ln_outer_gain), vec(hn.ln_outer_bias));
  Mat phi(hn.rank, hn.rank);
  phi.v = u.v;
  return phi;
}

// Effective dense weight W0 + (alpha/r) B_L A_L + lambda B_C Phi A_C.
inline Mat dense_weight(const cola::AdaptedLinear& al, const std::optional<std::vector<double>>& xbar) {
  Mat w = from(al.w0);
  if (al.lora) w = add(w, scaled(matmul(from(al.lora->b), from(al.lora->a)), al.config.scaling()));
  if (al.cola && xbar) {
    const double s = al.cola->lambda.defined() ? al.cola->lambda.item() : al.cola->fused_scale;
    const Mat phi = hypernet(al.cola->hypernet, *xbar);
    w = add(w, scaled(matmul(matmul(from(al.cola->b), phi), from(al.cola->a)), s));
  }
  return w;
}

inline Mat adapted(const cola::AdaptedLinear& al, const Mat& x, const std::optional<std::vector<double>>& xbar) {
  Mat y = matmul(x, transpose(dense_weight(al, xbar)));
  if (al.b0.defined())
    for (std::size_t i = 0; i < y.rows; ++i)
      for (std::size_t j = 0; j < y.cols; ++j) y(i, j) += al.b0.values()[j];
  return y;
}

using Pooled = std::optional<std::vector<double>>;

inline Mat attention(const cola::EncoderLayer& L, const Mat& x, const Pooled& p) {
  const Mat in = L.pre_norm ? layer_norm(x, L.ln1_gain.values(), L.ln1_bias.values()) : x;
  const Mat q = adapted(L.wq, in, p), k = adapted(L.wk, in, p), v = adapted(L.wv, in, p);
  const Mat s = scaled(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols)));
  return matmul(softmax_rows(s), v);
}

inline Mat out_proj(const cola::EncoderLayer& L, const Mat& a, const Pooled& p, const Mat& residual) {
  const Mat o = add(adapted(L.wo, a, p), residual);
  return L.pre_norm ? o : layer_norm(o, L.ln1_gain.values(), L.ln1_bias.values());
}

inline Mat ffn(const cola::EncoderLayer& L, const Mat& o, const Pooled& p) {
  const Mat in = L.pre_norm ? layer_norm(o, L.ln2_gain.values(), L.ln2_bias.values()) : o;
  const Mat x = add(adapted(L.w_down, act(adapted(L.w_up, in, p), L.act), p), o);
  return L.pre_norm ? x : layer_norm(x, L.ln2_gain.values(), L.ln2_bias.values());
}

inline Mat layer(const cola::EncoderLayer& L, const Mat& x, const Pooled& p) {
  return ffn(L, out_proj(L, attention(L, x, p), p, x), p);
}

// Algorithm 1 written out for one example, plus the two ablation schedules.
inline std::pair<Mat, Mat> dual(const cola::DualEncoderModel& model, Mat xm, Mat xc) {
  using cola::Strategy;
  const auto pm = model.enc_m.config.pooling, pc = model.enc_c.config.pooling;
  for (std::size_t l = 0; l < model.enc_m.layers.size(); ++l) {
    const auto& Lm = model.enc_m.layers[l];
    const auto& Lc = model.enc_c.layers[l];
    const Pooled xin_for_m = pool(xc, pc), xin_for_c = pool(xm, pm);
    const Mat am = attention(Lm, xm, xin_for_m);
    const Mat ac = attention(Lc, xc, xin_for_c);
    Pooled o_for_m = xin_for_m, o_for_c = xin_for_c;
    if (model.strategy == Strategy::Progressive) {
      o_for_m = pool(ac, pc);
      o_for_c = pool(am, pm);
    }
    const Mat om = out_proj(Lm, am, o_for_m, xm);
    const Mat oc = out_proj(Lc, ac, o_for_c, xc);
    Pooled f_for_m = xin_for_m, f_for_c = xin_for_c;
    if (model.strategy != Strategy::Uniform) {
      f_for_m = pool(oc, pc);
      f_for_c = pool(om, pm);
    }
    xm = ffn(Lm, om, f_for_m);
    xc = ffn(Lc, oc, f_for_c);
  }
  return {xm, xc};
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// max |a - b| / max |b|
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0.0;
  for (double x : b) scale = std::max(scale, std::abs(x));
  const double d = max_abs_diff(a, b);
  return d == 0.0 ? 0.0 : d / std::max(scale, 1e-300);
}

inline double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Fills every trainable adapter tensor (and lambda) with random values so all
// pathways are active; frozen weights are left alone.
inline void scramble(cola::AdaptedLinear& al, cola::Rng& rng, double stddev = 0.3) {
  for (auto& p : al.parameters()) {
    if (p.tensor == "lambda") {
      p.value.values()[0] = rng.uniform(0.3, 1.0);
      continue;
    }
    for (double& v : p.value.values()) v = rng.normal(0.0, stddev);
  }
}

inline void scramble(cola::DualEncoderModel& model, std::uint64_t seed, double stddev = 0.3) {
  cola::Rng rng(seed);
  for (cola::Encoder* e : {&model.enc_m, &model.enc_c})
    for (auto& layer : e->layers)
      for (auto c : cola::kComponents) scramble(layer.component(c), rng, stddev);
}

}  // namespace oracle
