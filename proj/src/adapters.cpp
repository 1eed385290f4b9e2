#include "cola/adapters.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "cola/random.hpp"

namespace cola {

AdapterMode adapter_mode_from_string(const std::string& name) {
  if (name == "none") return AdapterMode::None;
  if (name == "lora") return AdapterMode::LoRAOnly;
  if (name == "cola" || name == "non_shared") return AdapterMode::CoLA;
  if (name == "shared_a") return AdapterMode::SharedA;
  if (name == "shared_b") return AdapterMode::SharedB;
  if (name == "fully_shared") return AdapterMode::FullyShared;
  throw ConfigError("unknown adapter mode '" + name +
                    "' (expected none, lora, cola, shared_a, shared_b, fully_shared)");
}

std::string to_string(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::None: return "none";
    case AdapterMode::LoRAOnly: return "lora";
    case AdapterMode::CoLA: return "cola";
    case AdapterMode::SharedA: return "shared_a";
    case AdapterMode::SharedB: return "shared_b";
    case AdapterMode::FullyShared: return "fully_shared";
  }
  return "?";
}

bool AdapterConfig::has_intra() const {
  return mode == AdapterMode::LoRAOnly || mode == AdapterMode::CoLA || mode == AdapterMode::SharedA ||
         mode == AdapterMode::SharedB;
}

bool AdapterConfig::has_inter() const {
  return mode == AdapterMode::CoLA || mode == AdapterMode::SharedA || mode == AdapterMode::SharedB ||
         mode == AdapterMode::FullyShared;
}

void AdapterConfig::validate(std::size_t d_in, std::size_t d_out, std::size_t d_c) const {
  if (mode == AdapterMode::None) return;
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (rank >= std::min(d_in, d_out))
    throw ConfigError("adapter rank " + std::to_string(rank) + " must be below min(d_in, d_out) = " +
                      std::to_string(std::min(d_in, d_out)));
  if (!(alpha > 0.0)) throw ConfigError("adapter alpha must be positive");
  if (has_inter()) {
    if (gamma < 1) throw ConfigError("hypernet reduction gamma must be >= 1");
    if (gamma > d_c)
      throw ConfigError("hypernet reduction gamma " + std::to_string(gamma) + " exceeds cross dim " +
                        std::to_string(d_c));
  }
}

std::size_t hypernet_hidden(std::size_t d_c, std::size_t gamma) { return std::max<std::size_t>(1, d_c / gamma); }

// ---------------------------------------------------------------------------

Hypernet Hypernet::init(std::size_t d_c, const AdapterConfig& config, Rng& rng) {
  Hypernet hn;
  hn.d_c = d_c;
  hn.hidden = hypernet_hidden(d_c, config.gamma);
  hn.rank = config.rank;
  hn.act = config.activation;
  const std::size_t r2 = config.rank * config.rank;
  hn.w_down = xavier_uniform(rng, hn.hidden, d_c);
  hn.w_up = xavier_uniform(rng, r2, hn.hidden);
  if (config.hypernet_bias) {
    hn.b_down = Tensor::zeros({hn.hidden}, true);
    hn.b_up = Tensor::zeros({r2}, true);
  }
  if (config.hypernet_ln_affine) {
    hn.ln_inner_gain = Tensor::full({hn.hidden}, 1.0, true);
    hn.ln_inner_bias = Tensor::zeros({hn.hidden}, true);
    hn.ln_outer_gain = Tensor::full({r2}, 1.0, true);
    hn.ln_outer_bias = Tensor::zeros({r2}, true);
  }
  return hn;
}

Tensor Hypernet::forward(const Tensor& xbar) const {
  if (xbar.dim() == 0 || xbar.dim() > 2 || xbar.shape().back() != d_c)
    throw ShapeError("hypernet: expected pooled input of length " + std::to_string(d_c) + ", got " +
                     shape_str(xbar.shape()));
  const bool single = xbar.dim() == 1;
  const std::size_t batch = single ? 1 : xbar.shape()[0];
  Tensor v = single ? reshape(xbar, {1, d_c}) : xbar;
  Tensor h = activation(linear(v, w_down, b_down), act);
  h = layer_norm(h, ln_inner_gain, ln_inner_bias);
  Tensor p = layer_norm(linear(h, w_up, b_up), ln_outer_gain, ln_outer_bias);
  return reshape(p, single ? Shape{rank, rank} : Shape{batch, rank, rank});
}

std::vector<ParamRef> Hypernet::parameters() const {
  std::vector<ParamRef> out;
  auto push = [&](const char* name, const Tensor& t) {
    if (t.defined()) out.push_back({"hyper", name, t});
  };
  push("W_down", w_down);
  push("b_down", b_down);
  push("ln_inner_gain", ln_inner_gain);
  push("ln_inner_bias", ln_inner_bias);
  push("W_up", w_up);
  push("b_up", b_up);
  push("ln_outer_gain", ln_outer_gain);
  push("ln_outer_bias", ln_outer_bias);
  return out;
}

std::size_t Hypernet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

Tensor hypernet_forward(const Hypernet& hn, const Tensor& xbar) { return hn.forward(xbar); }

// ---------------------------------------------------------------------------

AdaptedLinear init_adapted_linear(Tensor w0, Tensor b0, std::size_t d_c, const AdapterConfig& config,
                                  std::uint64_t seed) {
  if (w0.dim() != 2) throw ShapeError("init_adapted_linear: W0 must be 2-D, got " + shape_str(w0.shape()));
  AdaptedLinear al;
  al.d_out = w0.shape()[0];
  al.d_in = w0.shape()[1];
  al.d_c = d_c;
  al.config = config;
  config.validate(al.d_in, al.d_out, d_c);
  if (b0.defined() && b0.numel() != al.d_out)
    throw ShapeError("init_adapted_linear: bias " + shape_str(b0.shape()) + " does not match d_out");
  al.w0 = std::move(w0);
  al.w0.set_requires_grad(false);
  if (b0.defined()) {
    al.b0 = std::move(b0);
    al.b0.set_requires_grad(false);
  }

  Rng rng(seed);
  const std::size_t r = config.rank;
  if (config.has_intra()) {
    LoraPath lora;
    lora.a = kaiming_uniform(rng, r, al.d_in);
    lora.b = Tensor::zeros({al.d_out, r}, true);
    al.lora = std::move(lora);
  }
  if (config.has_inter()) {
    ColaPath cola;
    switch (config.mode) {
      case AdapterMode::SharedA:
        cola.a = al.lora->a;
        cola.b = Tensor::zeros({al.d_out, r}, true);
        break;
      case AdapterMode::SharedB:
        cola.a = kaiming_uniform(rng, r, al.d_in);
        cola.b = al.lora->b;
        break;
      default:
        cola.a = kaiming_uniform(rng, r, al.d_in);
        cola.b = Tensor::zeros({al.d_out, r}, true);
        break;
    }
    if (config.has_lambda()) {
      cola.lambda = Tensor::scalar(config.lambda_init, true);
    } else {
      cola.fused_scale = config.scaling();
    }
    cola.hypernet = Hypernet::init(d_c, config, rng);
    al.cola = std::move(cola);
  }
  return al;
}

AdaptedLinear init_adapted_linear(std::size_t d_in, std::size_t d_out, std::size_t d_c,
                                  const AdapterConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "frozen"));
  Tensor w0 = rng.normal_tensor({d_out, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  Tensor b0 = rng.normal_tensor({d_out}, 0.02);
  return init_adapted_linear(std::move(w0), std::move(b0), d_c, config, seed);
}

Tensor AdaptedLinear::base_forward(const Tensor& x) const { return linear(x, w0, b0); }

Tensor AdaptedLinear::forward_intra(const Tensor& x) const {
  Tensor h = base_forward(x);
  if (lora) h = add(h, scale(linear(linear(x, lora->a), lora->b), config.scaling()));
  return h;
}

Tensor AdaptedLinear::forward(const Tensor& x, const std::optional<Tensor>& xbar) const {
  Tensor h = forward_intra(x);
  if (!cola) return h;
  if (!xbar || !xbar->defined())
    throw UsageError("adapted_forward: inter-modal pathway present but no pooled cross-modal input given");
  const bool batched = x.dim() == 3;
  const bool ok = batched ? (xbar->dim() == 2 && xbar->shape()[0] == x.shape()[0]) : (x.dim() == 2 && xbar->dim() == 1);
  if (!ok) throw ShapeError("adapted_forward: input " + shape_str(x.shape()) + " with pooled " + shape_str(xbar->shape()));
  Tensor phi = cola->hypernet.forward(*xbar);
  Tensor u = linear(matmul_nt(linear(x, cola->a), phi), cola->b);
  u = cola->lambda.defined() ? mul_scalar(u, cola->lambda) : scale(u, cola->fused_scale);
  return add(h, u);
}

Tensor adapted_forward(const AdaptedLinear& al, const Tensor& x, const std::optional<Tensor>& xbar) {
  return al.forward(x, xbar);
}

Tensor AdaptedLinear::intra_delta() const {
  if (!lora) throw UsageError("intra_delta: no intra-modal pathway");
  NoGradGuard no_grad;
  return scale(matmul(lora->b, lora->a), config.scaling());
}

Tensor AdaptedLinear::inter_delta(const Tensor& xbar) const {
  if (!cola) throw UsageError("inter_delta: no inter-modal pathway");
  if (xbar.dim() != 1) throw ShapeError("inter_delta: expects a single pooled vector, got " + shape_str(xbar.shape()));
  NoGradGuard no_grad;
  Tensor bpa = matmul(matmul(cola->b, cola->hypernet.forward(xbar)), cola->a);
  return cola->lambda.defined() ? mul_scalar(bpa, cola->lambda) : scale(bpa, cola->fused_scale);
}

AdaptedLinear AdaptedLinear::merge_intra() const {
  if (!lora) throw UsageError("merge_intra: adapted linear has no intra-modal pathway to merge");
  AdaptedLinear merged = *this;
  Tensor delta = intra_delta();
  Tensor w = w0.clone();
  for (std::size_t i = 0; i < w.numel(); ++i) w.values()[i] += delta.values()[i];
  merged.w0 = w.set_name(w0.name());
  merged.lora.reset();
  return merged;
}

AdaptedLinear merge_intra(const AdaptedLinear& al) { return al.merge_intra(); }

std::size_t numerical_rank(const Tensor& m, double rel_tol) {
  if (m.dim() != 2) throw ShapeError("numerical_rank: expects a matrix, got " + shape_str(m.shape()));
  const auto rows = static_cast<Eigen::Index>(m.shape()[0]);
  const auto cols = static_cast<Eigen::Index>(m.shape()[1]);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mat(m.values().data(), rows,
                                                                                                cols);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(mat);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double cutoff = rel_tol * sv(0);
  return static_cast<std::size_t>((sv.array() > cutoff).count());
}

DeltaRank AdaptedLinear::rank_of_delta(const std::optional<Tensor>& xbar) const {
  DeltaRank out;
  if (lora) out.intra = numerical_rank(intra_delta());
  if (cola && xbar) out.inter = numerical_rank(inter_delta(*xbar));
  return out;
}

DeltaRank rank_of_delta(const AdaptedLinear& al, const std::optional<Tensor>& xbar) { return al.rank_of_delta(xbar); }

std::vector<ParamRef> AdaptedLinear::parameters() const {
  std::vector<ParamRef> out;
  if (lora) {
    out.push_back({"lora", "A", lora->a});
    out.push_back({"lora", "B", lora->b});
  }
  if (cola) {
    const bool a_shared = lora && cola->a.same_storage(lora->a);
    const bool b_shared = lora && cola->b.same_storage(lora->b);
    if (!a_shared) out.push_back({"cola", "A", cola->a});
    if (!b_shared) out.push_back({"cola", "B", cola->b});
    if (cola->lambda.defined()) out.push_back({"cola", "lambda", cola->lambda});
    for (auto& p : cola->hypernet.parameters()) out.push_back(std::move(p));
  }
  return out;
}

std::size_t AdaptedLinear::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

std::vector<ParamRef> AdaptedLinear::frozen() const {
  std::vector<ParamRef> out{{"base", "W0", w0}};
  if (b0.defined()) out.push_back({"base", "b0", b0});
  return out;
}

bool AdaptedLinear::cross_active() const {
  if (!cola) return false;
  return !cola->lambda.defined() || cola->lambda.item() != 0.0;
}

double AdaptedLinear::lambda_value() const {
  if (!cola || !cola->lambda.defined()) throw UsageError("lambda_value: component has no learnable lambda");
  return cola->lambda.item();
}

}  // namespace cola
