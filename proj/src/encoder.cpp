#include "cola/encoder.hpp"

#include <cmath>

#include "cola/random.hpp"

namespace cola {

Pooling pooling_from_string(const std::string& name) {
  if (name == "mean") return Pooling::Mean;
  if (name == "cls") return Pooling::CLS;
  throw ConfigError("unknown pooling '" + name + "' (expected mean or cls)");
}

std::string to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "cls"; }

std::string to_string(Component c) {
  switch (c) {
    case Component::Q: return "q";
    case Component::K: return "k";
    case Component::V: return "v";
    case Component::O: return "o";
    case Component::Up: return "up";
    case Component::Down: return "down";
  }
  return "?";
}

EncoderConfig EncoderConfig::square(std::size_t d_model, std::size_t n_layers) {
  EncoderConfig c;
  c.d_model = c.d_k = c.d_v = d_model;
  c.d_ffn = 4 * d_model;
  c.n_layers = n_layers;
  return c;
}

void EncoderConfig::validate() const {
  if (d_model < 1 || d_k < 1 || d_v < 1 || d_ffn < 1 || n_layers < 1)
    throw ConfigError("encoder dimensions and layer count must be >= 1");
  if (d_ffn < d_model) throw ConfigError("encoder d_ffn must be >= d_model");
}

AdaptedLinear& EncoderLayer::component(Component c) {
  return const_cast<AdaptedLinear&>(static_cast<const EncoderLayer&>(*this).component(c));
}

const AdaptedLinear& EncoderLayer::component(Component c) const {
  switch (c) {
    case Component::Q: return wq;
    case Component::K: return wk;
    case Component::V: return wv;
    case Component::O: return wo;
    case Component::Up: return w_up;
    case Component::Down: return w_down;
  }
  throw UsageError("unknown component");
}

namespace {

Tensor apply(const AdaptedLinear& al, const Tensor& x, const std::optional<Tensor>& xbar) {
  return xbar ? al.forward(x, xbar) : al.forward_intra(x);
}

}  // namespace

AttentionResult EncoderLayer::attention(const Tensor& x, const std::optional<Tensor>& xbar) const {
  const Tensor in = pre_norm ? layer_norm(x, ln1_gain, ln1_bias) : x;
  Tensor q = apply(wq, in, xbar);
  Tensor k = apply(wk, in, xbar);
  Tensor v = apply(wv, in, xbar);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(wq.d_out));
  Tensor weights = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_dk));
  return {matmul(weights, v), weights};
}

Tensor EncoderLayer::attn_stage(const Tensor& x, const std::optional<Tensor>& xbar) const {
  return attention(x, xbar).output;
}

Tensor EncoderLayer::out_proj_stage(const Tensor& a, const std::optional<Tensor>& xbar, const Tensor& residual) const {
  Tensor o = add(apply(wo, a, xbar), residual);
  return pre_norm ? o : layer_norm(o, ln1_gain, ln1_bias);
}

Tensor EncoderLayer::ffn_stage(const Tensor& o, const std::optional<Tensor>& xbar) const {
  const Tensor in = pre_norm ? layer_norm(o, ln2_gain, ln2_bias) : o;
  Tensor hidden = activation(apply(w_up, in, xbar), act);
  Tensor x = add(apply(w_down, hidden, xbar), o);
  return pre_norm ? x : layer_norm(x, ln2_gain, ln2_bias);
}

Tensor EncoderLayer::forward(const Tensor& x, const std::optional<Tensor>& xbar) const {
  return ffn_stage(out_proj_stage(attn_stage(x, xbar), xbar, x), xbar);
}

bool EncoderLayer::has_cross() const {
  for (Component c : kComponents)
    if (component(c).cola) return true;
  return false;
}

bool Encoder::has_cross() const {
  for (const auto& l : layers)
    if (l.has_cross()) return true;
  return false;
}

Encoder Encoder::frozen_copy() const {
  Encoder e = *this;
  for (auto& l : e.layers)
    for (Component c : kComponents) {
      auto& al = l.component(c);
      al.lora.reset();
      al.cola.reset();
      al.config.mode = AdapterMode::None;
    }
  return e;
}

std::vector<ParamRef> Encoder::frozen_parameters() const {
  std::vector<ParamRef> out;
  for (const auto& l : layers) {
    for (Component c : kComponents)
      for (auto& p : l.component(c).frozen()) out.push_back(std::move(p));
    out.push_back({"base", "ln1_gain", l.ln1_gain});
    out.push_back({"base", "ln1_bias", l.ln1_bias});
    out.push_back({"base", "ln2_gain", l.ln2_gain});
    out.push_back({"base", "ln2_bias", l.ln2_bias});
  }
  return out;
}

EncoderLayer init_encoder_layer(const EncoderConfig& config, std::size_t d_c, const AdapterConfig& adapters,
                                std::uint64_t seed) {
  config.validate();
  EncoderLayer layer;
  layer.act = config.activation;
  layer.pre_norm = config.pre_norm;
  const std::size_t d = config.d_model;
  auto make = [&](Component c, std::size_t d_in, std::size_t d_out) {
    return init_adapted_linear(d_in, d_out, d_c, adapters, derive_seed(seed, to_string(c)));
  };
  layer.wq = make(Component::Q, d, config.d_k);
  layer.wk = make(Component::K, d, config.d_k);
  layer.wv = make(Component::V, d, config.d_v);
  layer.wo = make(Component::O, config.d_v, d);
  layer.w_up = make(Component::Up, d, config.d_ffn);
  layer.w_down = make(Component::Down, config.d_ffn, d);
  layer.ln1_gain = Tensor::full({d}, 1.0);
  layer.ln1_bias = Tensor::zeros({d});
  layer.ln2_gain = Tensor::full({d}, 1.0);
  layer.ln2_bias = Tensor::zeros({d});
  return layer;
}

Encoder init_encoder(const EncoderConfig& config, std::size_t d_c, const AdapterConfig& adapters, std::uint64_t seed) {
  config.validate();
  Encoder enc;
  enc.config = config;
  for (std::size_t l = 0; l < config.n_layers; ++l)
    enc.layers.push_back(init_encoder_layer(config, d_c, adapters, derive_seed(seed, "layer" + std::to_string(l))));
  return enc;
}

Tensor attn_stage(const EncoderLayer& layer, const Tensor& x, const std::optional<Tensor>& xbar) {
  return layer.attn_stage(x, xbar);
}

Tensor out_proj_stage(const EncoderLayer& layer, const Tensor& a, const std::optional<Tensor>& xbar,
                      const Tensor& residual) {
  return layer.out_proj_stage(a, xbar, residual);
}

Tensor ffn_stage(const EncoderLayer& layer, const Tensor& o, const std::optional<Tensor>& xbar) {
  return layer.ffn_stage(o, xbar);
}

Tensor pool(const Tensor& x, Pooling mode) { return mode == Pooling::Mean ? mean_tokens(x) : first_token(x); }

}  // namespace cola
