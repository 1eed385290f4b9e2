#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cola/adapters.hpp"

namespace cola {

enum class Pooling { Mean, CLS };

Pooling pooling_from_string(const std::string& name);
std::string to_string(Pooling p);

struct EncoderConfig {
  std::size_t d_model = 32;
  std::size_t d_k = 32;
  std::size_t d_v = 32;
  std::size_t d_ffn = 128;
  std::size_t n_layers = 2;
  Pooling pooling = Pooling::Mean;
  bool pre_norm = true;
  Activation activation = Activation::GELU;

  // d_k = d_v = d_model, d_ffn = 4 d_model.
  static EncoderConfig square(std::size_t d_model, std::size_t n_layers);
  void validate() const;
};

// The six adapter injection points of a layer.
enum class Component { Q, K, V, O, Up, Down };
inline constexpr std::array<Component, 6> kComponents{Component::Q, Component::K,  Component::V,
                                                      Component::O, Component::Up, Component::Down};
std::string to_string(Component c);

struct AttentionResult {
  Tensor output;   // [.., N, d_v]
  Tensor weights;  // [.., N, N], rows sum to one
};

// Single-head pre-norm (or post-norm) transformer layer. A pooled vector of
// std::nullopt runs only the frozen maps and the intra-modal pathways.
struct EncoderLayer {
  AdaptedLinear wq, wk, wv, wo, w_up, w_down;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  Activation act = Activation::GELU;
  bool pre_norm = true;

  AdaptedLinear& component(Component c);
  const AdaptedLinear& component(Component c) const;

  AttentionResult attention(const Tensor& x, const std::optional<Tensor>& xbar) const;
  Tensor attn_stage(const Tensor& x, const std::optional<Tensor>& xbar) const;
  Tensor out_proj_stage(const Tensor& a, const std::optional<Tensor>& xbar, const Tensor& residual) const;
  Tensor ffn_stage(const Tensor& o, const std::optional<Tensor>& xbar) const;
  Tensor forward(const Tensor& x, const std::optional<Tensor>& xbar) const;

  bool has_cross() const;
};

struct Encoder {
  EncoderConfig config;
  std::vector<EncoderLayer> layers;

  bool has_cross() const;
  // Copy sharing the frozen weights with every adapter pathway removed.
  Encoder frozen_copy() const;
  std::vector<ParamRef> frozen_parameters() const;
};

EncoderLayer init_encoder_layer(const EncoderConfig& config, std::size_t d_c, const AdapterConfig& adapters,
                                std::uint64_t seed);
Encoder init_encoder(const EncoderConfig& config, std::size_t d_c, const AdapterConfig& adapters, std::uint64_t seed);

Tensor attn_stage(const EncoderLayer& layer, const Tensor& x, const std::optional<Tensor>& xbar);
Tensor out_proj_stage(const EncoderLayer& layer, const Tensor& a, const std::optional<Tensor>& xbar,
                      const Tensor& residual);
Tensor ffn_stage(const EncoderLayer& layer, const Tensor& o, const std::optional<Tensor>& xbar);

// [N, d] -> [d], [B, N, d] -> [B, d]
Tensor pool(const Tensor& x, Pooling mode);

}  // namespace cola
