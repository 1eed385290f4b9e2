#pragma once

// Low-rank adapter pathways attached to a frozen linear map.
//
//   h = W0 x + b0 + (alpha / r) B_L A_L x + lambda B_C Phi(xbar_c) A_C x
//
// The first low-rank term is the intra-modal (LoRA) pathway. The second is the
// inter-modal pathway; Phi is an r x r matrix produced per forward pass by a
// small hypernetwork from a pooled summary xbar_c of the paired modality.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cola/tensor.hpp"

namespace cola {

// Which pathways exist and which low-rank factors they share.
//   LoRAOnly    intra pathway only
//   CoLA        separate intra and inter pathways
//   SharedA     both pathways read one A
//   SharedB     both pathways write through one B
//   FullyShared one pathway B Phi A with static alpha/r and no lambda
enum class AdapterMode { None, LoRAOnly, CoLA, SharedA, SharedB, FullyShared };

AdapterMode adapter_mode_from_string(const std::string& name);
std::string to_string(AdapterMode mode);

struct AdapterConfig {
  std::size_t rank = 16;
  double alpha = 8.0;
  double lambda_init = 0.5;
  std::size_t gamma = 16;
  AdapterMode mode = AdapterMode::CoLA;
  Activation activation = Activation::GELU;
  bool hypernet_bias = true;
  bool hypernet_ln_affine = true;

  double scaling() const { return alpha / static_cast<double>(rank); }
  bool has_intra() const;
  bool has_inter() const;
  bool has_lambda() const { return has_inter() && mode != AdapterMode::FullyShared; }
  // Throws ConfigError when the config cannot be attached to a d_in x d_out map.
  void validate(std::size_t d_in, std::size_t d_out, std::size_t d_c) const;
};

std::size_t hypernet_hidden(std::size_t d_c, std::size_t gamma);

struct ParamRef {
  std::string path;    // base | lora | cola | hyper
  std::string tensor;  // A, B, lambda, W_down, ...
  Tensor value;
};

class Rng;

struct Hypernet {
  std::size_t d_c = 0;
  std::size_t hidden = 0;
  std::size_t rank = 0;
  Activation act = Activation::GELU;
  Tensor w_down, b_down;
  Tensor ln_inner_gain, ln_inner_bias;
  Tensor w_up, b_up;
  Tensor ln_outer_gain, ln_outer_bias;

  static Hypernet init(std::size_t d_c, const AdapterConfig& config, Rng& rng);

  // [d_c] -> [r, r] or [B, d_c] -> [B, r, r]
  Tensor forward(const Tensor& xbar) const;
  std::vector<ParamRef> parameters() const;
  std::size_t parameter_count() const;
};

struct LoraPath {
  Tensor a;  // [r, d_in]
  Tensor b;  // [d_out, r]
};

struct ColaPath {
  Tensor a;       // [r, d_in]; aliases LoraPath::a under SharedA
  Tensor b;       // [d_out, r]; aliases LoraPath::b under SharedB
  Tensor lambda;  // [1]; undefined under FullyShared
  Hypernet hypernet;
  double fused_scale = 1.0;  // alpha / r when lambda is absent
};

struct DeltaRank {
  std::optional<std::size_t> intra;
  std::optional<std::size_t> inter;
};

class AdaptedLinear {
 public:
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t d_c = 0;
  AdapterConfig config;
  Tensor w0;  // [d_out, d_in], frozen
  Tensor b0;  // [d_out], frozen, optional
  std::optional<LoraPath> lora;
  std::optional<ColaPath> cola;

  // x: [N, d_in] with xbar [d_c], or [B, N, d_in] with xbar [B, d_c].
  Tensor forward(const Tensor& x, const std::optional<Tensor>& xbar) const;
  // Frozen map plus the intra pathway; ignores the inter pathway entirely.
  Tensor forward_intra(const Tensor& x) const;
  Tensor base_forward(const Tensor& x) const;

  // Folds (alpha/r) B_L A_L into W0. The inter pathway is kept as-is.
  AdaptedLinear merge_intra() const;

  // Materialized low-rank updates, [d_out, d_in].
  Tensor intra_delta() const;
  Tensor inter_delta(const Tensor& xbar) const;
  DeltaRank rank_of_delta(const std::optional<Tensor>& xbar = std::nullopt) const;

  // Trainable tensors, each storage listed once.
  std::vector<ParamRef> parameters() const;
  std::size_t trainable_count() const;
  std::vector<ParamRef> frozen() const;

  bool cross_active() const;
  double lambda_value() const;
};

AdaptedLinear init_adapted_linear(Tensor w0, Tensor b0, std::size_t d_c, const AdapterConfig& config,
                                  std::uint64_t seed);
// Draws the frozen weight from N(0, 1/d_in) and the bias from N(0, 0.02^2).
AdaptedLinear init_adapted_linear(std::size_t d_in, std::size_t d_out, std::size_t d_c,
                                  const AdapterConfig& config, std::uint64_t seed);

Tensor hypernet_forward(const Hypernet& hn, const Tensor& xbar);
Tensor adapted_forward(const AdaptedLinear& al, const Tensor& x, const std::optional<Tensor>& xbar);
AdaptedLinear merge_intra(const AdaptedLinear& al);
DeltaRank rank_of_delta(const AdaptedLinear& al, const std::optional<Tensor>& xbar = std::nullopt);

// Numerical rank: singular values above rel_tol * sigma_max.
std::size_t numerical_rank(const Tensor& m, double rel_tol = 1e-9);

}  // namespace cola
