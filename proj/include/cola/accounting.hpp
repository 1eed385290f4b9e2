#pragma once

// Analytic trainable-parameter and forward-MAC bookkeeping.
//
// Counts cover the two encoder stacks: frozen linear weights and biases,
// frozen layer norms, and every adapter tensor. Task heads are carried as an
// opaque `head_params` term. One MAC is two FLOPs.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cola/dual_encoder.hpp"

namespace cola {

struct ComponentDims {
  Component component;
  std::size_t d_in;
  std::size_t d_out;
};

struct EncoderArch {
  std::string name;
  std::size_t d_model = 0;
  std::size_t d_ffn = 0;
  std::size_t n_layers = 0;
  std::size_t d_cross = 0;  // model dim of the paired encoder
  std::vector<ComponentDims> components;

  static EncoderArch from_config(const std::string& name, const EncoderConfig& config, std::size_t d_cross);
};

struct ArchSpec {
  std::string name;
  std::array<EncoderArch, 2> encoders;
  std::size_t head_params = 0;

  // vitb-bertb, dinob-sslam, toy
  static ArchSpec preset(const std::string& name);
  static ArchSpec from_configs(const std::string& name, const EncoderConfig& m, const EncoderConfig& c);
  void validate() const;
};

std::size_t hypernet_param_count(std::size_t d_c, std::size_t gamma, std::size_t rank, bool bias, bool ln_affine);

enum class Pathway { Intra, Inter, Hypernet, Lambda };
std::string to_string(Pathway p);

struct ParamEntry {
  std::string encoder;
  std::size_t layer;
  Component component;
  Pathway pathway;
  std::size_t count;
};

struct ParamReport {
  std::string arch;
  AdapterMode mode = AdapterMode::CoLA;
  std::size_t rank = 0;
  std::vector<ParamEntry> entries;
  std::size_t intra = 0;
  std::size_t inter = 0;
  std::size_t hypernet = 0;
  std::size_t lambda = 0;
  std::size_t head = 0;
  std::size_t frozen = 0;

  std::size_t adapter_total() const { return intra + inter + hypernet + lambda; }
  std::size_t trainable() const { return adapter_total() + head; }
  double update_ratio() const;

  nlohmann::json to_json(bool millions = false) const;
  std::string to_table(bool millions = false) const;
};

ParamReport count_params(const ArchSpec& arch, const AdapterConfig& config, AdapterMode mode);

enum class FlopsPathway { Frozen, Attention, Intra, Inter, Hypernet, Pool };
std::string to_string(FlopsPathway p);

struct FlopsEntry {
  std::string encoder;
  std::size_t layer;
  std::string component;  // q..down, "attn" or "pool"
  FlopsPathway pathway;
  std::uint64_t macs;
};

struct FlopsReport {
  std::string arch;
  AdapterMode mode = AdapterMode::CoLA;
  std::size_t rank = 0;
  std::size_t n_m = 0;
  std::size_t n_c = 0;
  std::vector<FlopsEntry> entries;

  std::uint64_t total_macs() const;
  std::uint64_t macs(FlopsPathway p) const;
  double gflops() const { return 2.0 * static_cast<double>(total_macs()) / 1e9; }

  nlohmann::json to_json() const;
  std::string to_table() const;
};

FlopsReport flops_forward(const ArchSpec& arch, const AdapterConfig& config, std::size_t n_m, std::size_t n_c,
                          AdapterMode mode, Strategy strategy = Strategy::Progressive);

// Smallest LoRA rank whose adapter count reaches the CoLA count at `config.rank`.
std::size_t parameter_matched_lora_rank(const ArchSpec& arch, const AdapterConfig& config);

// ---------------------------------------------------------------------------
// Wall-clock measurement

struct BenchVariant {
  std::string name;
  DualEncoderModel model;
  std::size_t adapter_params = 0;
};

struct BenchRow {
  std::string name;
  std::size_t adapter_params = 0;
  double forward_median_ms = 0.0;
  double forward_iqr_ms = 0.0;
  double train_step_median_ms = 0.0;  // forward + backward
  double train_step_iqr_ms = 0.0;
  long peak_rss_delta_kb = 0;
};

struct BenchSummary {
  std::size_t repetitions = 0;
  std::vector<BenchRow> rows;

  const BenchRow& row(const std::string& name) const;
  nlohmann::json to_json() const;
  std::string to_table() const;
};

// LoRA(r), CoLA(r), LoRA(parameter-matched r), LoRA(r) merged.
std::vector<BenchVariant> make_bench_variants(const EncoderConfig& m, const EncoderConfig& c,
                                              const AdapterConfig& config, Strategy strategy, std::uint64_t seed);

BenchSummary wallclock_bench(const std::vector<BenchVariant>& variants, const Tensor& x_m, const Tensor& x_c,
                             std::size_t repetitions, std::size_t warmup = 2);

}  // namespace cola
