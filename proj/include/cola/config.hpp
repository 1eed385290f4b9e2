#pragma once

// Experiment configuration: a JSON document checked strictly against the
// known keys. Resolution order is defaults, then --profile, then the file,
// then individual command-line flags.

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "cola/harness.hpp"

namespace cola {

struct GradcheckSettings {
  std::size_t batch = 4;
  std::size_t max_coords = 0;
  double step = 1e-6;
  double tolerance = 1e-5;
};

struct BenchSettings {
  std::string preset = "vitb-bertb";  // analytic FLOPs architecture
  std::size_t rank = 16;              // rank and gamma for the analytic comparison
  std::size_t gamma = 16;
  std::size_t tokens_m = 197;
  std::size_t tokens_c = 40;
  std::size_t repetitions = 20;
  std::size_t warmup = 2;
  std::size_t batch = 8;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::string profile;  // empty, vl or av
  Strategy strategy = Strategy::Progressive;
  EncoderConfig encoder_m;
  EncoderConfig encoder_c;
  AdapterConfig adapter;
  RunConfig train;
  TaskSpec task;
  std::size_t n_train = 1024;
  std::size_t n_val = 256;
  std::size_t n_test = 512;
  GradcheckSettings gradcheck;
  BenchSettings bench;

  ExperimentConfig();
  void validate() const;
};

// vl: rank 16, alpha 8, lambda 0.5, gamma 16, AdamW wd 1e-4, lr 1e-4 / 2.5e-5,
//     150 epochs, batch 80.
// av: rank 16, alpha 8, lambda 0.1, gamma 16, Adam, lr 5e-6 / 4e-6, 50 epochs,
//     batch 2.
void apply_profile(ExperimentConfig& config, const std::string& name);

// Overlays the keys present in `text` onto `base`. Throws ConfigError with a
// line:column position for syntax errors and the dotted key path otherwise.
ExperimentConfig parse_config(const std::string& text, const std::string& source, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});

// Every field, defaults included; parse_config(to_json(c).dump()) == c.
nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace cola
