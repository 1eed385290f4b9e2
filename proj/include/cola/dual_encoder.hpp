#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>

#include "cola/encoder.hpp"

namespace cola {

// How pooled cross-modal features reach the adapters of a layer.
//   Uniform      every component pools the other encoder's layer input
//   ModuleWise   attention components pool the layer input, FFN components
//                pool the other encoder's post-residual attention output
//   Progressive  q/k/v pool the layer input, o pools the raw attention output,
//                up/down pool the post-residual attention output
enum class Strategy { Uniform, ModuleWise, Progressive };

Strategy strategy_from_string(const std::string& name);
std::string to_string(Strategy s);

enum class Stage { Attention, OutProj, FFN };
enum class Side { M, C };

std::string to_string(Stage s);
std::string to_string(Side s);

struct PoolEvent {
  std::size_t layer;
  Stage stage;
  Side consumer;       // encoder whose adapters receive the vector
  std::string source;  // "x" layer input, "a" attention output, "o" post-residual
  Tensor pooled;
};

using PoolHook = std::function<void(const PoolEvent&)>;

struct DualEncoderModel {
  Encoder enc_m;
  Encoder enc_c;
  Strategy strategy = Strategy::Progressive;
  PoolHook hook;

  const Encoder& encoder(Side s) const { return s == Side::M ? enc_m : enc_c; }
  Encoder& encoder(Side s) { return s == Side::M ? enc_m : enc_c; }

  // Both stacks with every adapter removed; frozen weights are shared.
  DualEncoderModel frozen_backbone() const;
  void set_all_lambda(double value);
  void set_lambda(Side consumer, double value);
  std::size_t adapter_parameter_count() const;
};

// The m encoder's hypernets read pooled c features and vice versa.
DualEncoderModel init_dual_encoder(const EncoderConfig& m, const EncoderConfig& c, const AdapterConfig& adapters_m,
                                   const AdapterConfig& adapters_c, Strategy strategy, std::uint64_t seed);

// x_m: [N_m, d_m] or [B, N_m, d_m]; x_c likewise with matching batch.
std::pair<Tensor, Tensor> dual_forward(const DualEncoderModel& model, const Tensor& x_m, const Tensor& x_c);

// Single-encoder forward without any cross-modal input. Rejected when the
// chosen encoder has an active inter-modal pathway.
Tensor unimodal_forward(const DualEncoderModel& model, Side which, const Tensor& x);

struct StrategyOutputs {
  std::pair<Tensor, Tensor> uniform;
  std::pair<Tensor, Tensor> module_wise;
  std::pair<Tensor, Tensor> progressive;
};

StrategyOutputs strategy_compare(const DualEncoderModel& model, const Tensor& x_m, const Tensor& x_c);

}  // namespace cola
