#pragma once

// Synthetic cross-modal task, classifier wrapper, training loop, lambda
// traces and the gradient-check suite.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cola/dual_encoder.hpp"

namespace cola {

// Label rule y = (y_m + y_c) mod C. Each modality renders its latent symbol
// as N tokens: the vocabulary is split into C equal bands and every token is
// drawn from the latent's band, except with probability `noise` where it is
// drawn uniformly from the whole vocabulary.
struct TaskSpec {
  std::size_t num_classes = 2;
  std::size_t vocab_size = 16;
  std::size_t tokens = 8;
  double noise = 0.1;

  void validate() const;
};

struct Example {
  std::vector<int> tokens_m;
  std::vector<int> tokens_c;
  int label = 0;
  int latent_m = 0;
  int latent_c = 0;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Example> train, val, test;
};

// Deterministic in (spec, sizes, seed). Labels are balanced within +-1 per
// split and no token pair appears in two splits.
Dataset gen_dataset(const TaskSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                    std::uint64_t seed);

// One JSON object per line: split, tokens_m, tokens_c, label, latent_m, latent_c.
void write_jsonl(const Dataset& data, const std::string& path);
Dataset read_jsonl(const std::string& path, const TaskSpec& spec);

// ---------------------------------------------------------------------------

// Token + position embeddings per modality, the dual encoder, and a linear
// head over the concatenated mean-pooled outputs.
struct CrossModalClassifier {
  DualEncoderModel dual;
  Tensor token_m, pos_m;  // [V, d_m], [N, d_m]
  Tensor token_c, pos_c;
  Tensor head_w;  // [C, d_m + d_c]
  Tensor head_b;  // [C]

  // logits [B, C]
  Tensor forward(const std::vector<const Example*>& batch) const;
};

CrossModalClassifier init_classifier(const EncoderConfig& m, const EncoderConfig& c, const AdapterConfig& adapters,
                                     Strategy strategy, const TaskSpec& task, std::uint64_t seed);

enum class ParamGroup { Adapter, Head };

struct NamedParam {
  std::string key;  // {enc}/{layer}/{comp}/{path}/{tensor}, embed/{enc}/{token|pos}, head/{W|b}
  std::string cls;  // A_L, B_L, A_C, B_C, lambda, hyper.weight, ..., embed.token, head.W
  ParamGroup group;
  Tensor value;
};

// Trainable tensors, each storage listed once.
std::vector<NamedParam> trainable_parameters(const CrossModalClassifier& model);
std::vector<NamedParam> frozen_parameters(const CrossModalClassifier& model);

// FNV-1a over the bytes of every frozen tensor.
std::uint64_t frozen_fingerprint(const CrossModalClassifier& model);
// Copies of every trainable tensor's values, keyed like NamedParam::key.
std::map<std::string, std::vector<double>> snapshot(const CrossModalClassifier& model);

// Redraws every adapter B factor from N(0, stddev^2) so that all pathways
// carry signal; B is zero at initialization.
void randomize_adapters(DualEncoderModel& model, std::uint64_t seed, double stddev = 0.5);

// ---------------------------------------------------------------------------

struct RunConfig {
  double lr_adapter = 3e-3;
  double lr_head = 3e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool freeze_lambda = false;

  void validate() const;
};

// Decoupled weight decay: theta <- theta (1 - lr wd), then the Adam step.
class AdamW {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 0.0;
  };

  AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay);
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<std::vector<double>>> m_, v_;
};

struct LambdaKey {
  std::string encoder;  // m | c
  std::size_t layer;
  Component component;
};

struct LambdaTrace {
  std::vector<LambdaKey> keys;
  std::vector<std::size_t> epochs;
  std::vector<std::vector<double>> values;  // [epoch row][key]

  void record(const DualEncoderModel& model, std::size_t epoch);
  std::size_t rows() const { return epochs.size() * keys.size(); }
};

std::vector<LambdaKey> lambda_keys(const DualEncoderModel& model);
std::string export_lambda(const LambdaTrace& trace);
LambdaTrace parse_lambda_csv(const std::string& csv);

struct EpochMetrics {
  std::size_t epoch;
  double train_loss, train_acc, val_loss, val_acc;
};

struct MetricsLog {
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  double test_acc = 0.0;
  double test_loss = 0.0;
  double wall_time_s = 0.0;

  // Everything except wall time, so reruns serialize identically.
  nlohmann::json to_json() const;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const CrossModalClassifier& model, const std::vector<Example>& split, std::size_t batch = 256);

struct TrainResult {
  MetricsLog metrics;
  LambdaTrace lambdas;
};

// Trains adapters, embeddings and head in place. Throws NumericError naming
// the first non-finite tensor when the loss stops being finite.
TrainResult train(CrossModalClassifier& model, const Dataset& data, const RunConfig& run);

// ---------------------------------------------------------------------------

struct GradcheckEntry {
  std::string cls;
  std::size_t tensors = 0;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
  std::string worst;  // key of the worst tensor
  bool finite = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-5;

  bool passed() const;
  std::vector<std::string> failing() const;
  const GradcheckEntry* find(const std::string& cls) const;
  std::string to_table() const;
};

struct GradcheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  std::size_t max_coords = 0;  // per tensor, 0 = all
  std::uint64_t seed = 0;
};

// Compares autodiff gradients of the task loss on `sample` with central
// differences. Error per class: max |g - g_fd| over the class divided by the
// largest gradient magnitude in the class.
GradcheckReport gradcheck_suite(const CrossModalClassifier& model, const std::vector<Example>& sample,
                                const GradcheckOptions& options = {});

// ---------------------------------------------------------------------------

// JSON container {"format","version","tensors":{key:{shape,data}}}.
void save_checkpoint(const CrossModalClassifier& model, const std::string& path);
// Overwrites the trainable tensors of `model`; keys and shapes must match.
void load_checkpoint(CrossModalClassifier& model, const std::string& path);

}  // namespace cola
