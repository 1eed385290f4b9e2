#include "cola/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "cola/random.hpp"

namespace cola {

void TaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("task.num_classes must be >= 2");
  if (vocab_size < num_classes || vocab_size % num_classes != 0)
    throw ConfigError("task.vocab_size must be a positive multiple of num_classes");
  if (tokens < 1) throw ConfigError("task.tokens must be >= 1");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("task.noise must lie in [0, 1]");
}

namespace {

std::vector<int> render(const TaskSpec& spec, int latent, Rng& rng) {
  const std::size_t band = spec.vocab_size / spec.num_classes;
  std::vector<int> out(spec.tokens);
  for (auto& t : out) {
    if (rng.bernoulli(spec.noise))
      t = static_cast<int>(rng.index(spec.vocab_size));
    else
      t = static_cast<int>(static_cast<std::size_t>(latent) * band + rng.index(band));
  }
  return out;
}

std::string pair_key(const Example& e) {
  std::string k;
  for (int t : e.tokens_m) k += static_cast<char>(t);
  k += '|';
  for (int t : e.tokens_c) k += static_cast<char>(t);
  return k;
}

}  // namespace

Dataset gen_dataset(const TaskSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                    std::uint64_t seed) {
  spec.validate();
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("dataset split sizes must be >= 1");
  if (spec.vocab_size > 255) throw ConfigError("task.vocab_size above 255 is not supported");
  Dataset data;
  data.spec = spec;
  Rng rng(derive_seed(seed, "dataset"));
  std::unordered_set<std::string> seen;
  const int C = static_cast<int>(spec.num_classes);
  auto fill = [&](std::vector<Example>& split, std::size_t n) {
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.num_classes);
    std::shuffle(labels.begin(), labels.end(), rng.engine());
    for (int y : labels) {
      Example e;
      e.label = y;
      e.latent_m = static_cast<int>(rng.index(spec.num_classes));
      e.latent_c = ((y - e.latent_m) % C + C) % C;
      for (int attempt = 0;; ++attempt) {
        if (attempt == 1000)
          throw ConfigError("task space too small for the requested number of distinct examples");
        e.tokens_m = render(spec, e.latent_m, rng);
        e.tokens_c = render(spec, e.latent_c, rng);
        if (seen.insert(pair_key(e)).second) break;
      }
      split.push_back(std::move(e));
    }
  };
  fill(data.train, n_train);
  fill(data.val, n_val);
  fill(data.test, n_test);
  return data;
}

void write_jsonl(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  auto dump = [&](const char* split, const std::vector<Example>& xs) {
    for (const auto& e : xs) {
      nlohmann::json j{{"split", split},          {"tokens_m", e.tokens_m}, {"tokens_c", e.tokens_c},
                       {"label", e.label},        {"latent_m", e.latent_m}, {"latent_c", e.latent_c}};
      out << j.dump() << '\n';
    }
  };
  dump("train", data.train);
  dump("val", data.val);
  dump("test", data.test);
}

Dataset read_jsonl(const std::string& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  Dataset data;
  data.spec = spec;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example e;
      e.tokens_m = j.at("tokens_m").get<std::vector<int>>();
      e.tokens_c = j.at("tokens_c").get<std::vector<int>>();
      e.label = j.at("label").get<int>();
      e.latent_m = j.value("latent_m", 0);
      e.latent_c = j.value("latent_c", 0);
      const auto split = j.at("split").get<std::string>();
      if (split == "train")
        data.train.push_back(std::move(e));
      else if (split == "val")
        data.val.push_back(std::move(e));
      else if (split == "test")
        data.test.push_back(std::move(e));
      else
        throw ConfigError("unknown split '" + split + "'");
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return data;
}

// ---------------------------------------------------------------------------

Tensor CrossModalClassifier::forward(const std::vector<const Example*>& batch) const {
  if (batch.empty()) throw UsageError("classifier forward on an empty batch");
  const std::size_t B = batch.size();
  const std::size_t n_m = pos_m.shape()[0], n_c = pos_c.shape()[0];
  std::vector<int> ids_m, ids_c;
  ids_m.reserve(B * n_m);
  ids_c.reserve(B * n_c);
  for (const Example* e : batch) {
    if (e->tokens_m.size() != n_m || e->tokens_c.size() != n_c)
      throw ShapeError("example token counts do not match the position tables");
    ids_m.insert(ids_m.end(), e->tokens_m.begin(), e->tokens_m.end());
    ids_c.insert(ids_c.end(), e->tokens_c.begin(), e->tokens_c.end());
  }
  Tensor x_m = add_tiled(embedding(token_m, ids_m, {B, n_m}), pos_m);
  Tensor x_c = add_tiled(embedding(token_c, ids_c, {B, n_c}), pos_c);
  auto [h_m, h_c] = dual_forward(dual, x_m, x_c);
  return linear(concat_last(mean_tokens(h_m), mean_tokens(h_c)), head_w, head_b);
}

CrossModalClassifier init_classifier(const EncoderConfig& m, const EncoderConfig& c, const AdapterConfig& adapters,
                                     Strategy strategy, const TaskSpec& task, std::uint64_t seed) {
  task.validate();
  CrossModalClassifier model;
  model.dual = init_dual_encoder(m, c, adapters, adapters, strategy, derive_seed(seed, "dual"));
  Rng rng(derive_seed(seed, "embed"));
  model.token_m = rng.normal_tensor({task.vocab_size, m.d_model}, 1.0, true);
  model.pos_m = rng.normal_tensor({task.tokens, m.d_model}, 0.1, true);
  model.token_c = rng.normal_tensor({task.vocab_size, c.d_model}, 1.0, true);
  model.pos_c = rng.normal_tensor({task.tokens, c.d_model}, 0.1, true);
  model.head_w = kaiming_uniform(rng, task.num_classes, m.d_model + c.d_model);
  model.head_b = Tensor::zeros({task.num_classes}, true);
  return model;
}

namespace {

std::string param_class(const std::string& path, const std::string& tensor) {
  if (path == "lora") return tensor == "A" ? "A_L" : "B_L";
  if (path == "cola") {
    if (tensor == "lambda") return "lambda";
    return tensor == "A" ? "A_C" : "B_C";
  }
  if (tensor.rfind("W_", 0) == 0) return "hyper.weight";
  if (tensor.rfind("b_", 0) == 0) return "hyper.bias";
  if (tensor.ends_with("_gain")) return "hyper.ln_gain";
  return "hyper.ln_bias";
}

template <typename Fn>
void for_each_component(const DualEncoderModel& model, Fn&& fn) {
  for (Side side : {Side::M, Side::C}) {
    const Encoder& enc = model.encoder(side);
    for (std::size_t l = 0; l < enc.layers.size(); ++l)
      for (Component c : kComponents)
        fn(to_string(side) + "/" + std::to_string(l) + "/" + to_string(c), enc.layers[l].component(c));
  }
}

}  // namespace

std::vector<NamedParam> trainable_parameters(const CrossModalClassifier& model) {
  std::vector<NamedParam> out;
  for_each_component(model.dual, [&](const std::string& prefix, const AdaptedLinear& al) {
    for (auto& p : al.parameters())
      if (p.value.requires_grad())
        out.push_back({prefix + "/" + p.path + "/" + p.tensor, param_class(p.path, p.tensor), ParamGroup::Adapter,
                       p.value});
  });
  out.push_back({"embed/m/token", "embed.token", ParamGroup::Adapter, model.token_m});
  out.push_back({"embed/m/pos", "embed.pos", ParamGroup::Adapter, model.pos_m});
  out.push_back({"embed/c/token", "embed.token", ParamGroup::Adapter, model.token_c});
  out.push_back({"embed/c/pos", "embed.pos", ParamGroup::Adapter, model.pos_c});
  out.push_back({"head/W", "head.W", ParamGroup::Head, model.head_w});
  out.push_back({"head/b", "head.b", ParamGroup::Head, model.head_b});
  return out;
}

std::vector<NamedParam> frozen_parameters(const CrossModalClassifier& model) {
  std::vector<NamedParam> out;
  for_each_component(model.dual, [&](const std::string& prefix, const AdaptedLinear& al) {
    for (auto& p : al.frozen()) out.push_back({prefix + "/" + p.path + "/" + p.tensor, "frozen", ParamGroup::Adapter, p.value});
  });
  for (Side side : {Side::M, Side::C}) {
    const Encoder& enc = model.dual.encoder(side);
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
      const auto& layer = enc.layers[l];
      const std::string prefix = to_string(side) + "/" + std::to_string(l) + "/";
      out.push_back({prefix + "ln1/base/gain", "frozen", ParamGroup::Adapter, layer.ln1_gain});
      out.push_back({prefix + "ln1/base/bias", "frozen", ParamGroup::Adapter, layer.ln1_bias});
      out.push_back({prefix + "ln2/base/gain", "frozen", ParamGroup::Adapter, layer.ln2_gain});
      out.push_back({prefix + "ln2/base/bias", "frozen", ParamGroup::Adapter, layer.ln2_bias});
    }
  }
  return out;
}

std::uint64_t frozen_fingerprint(const CrossModalClassifier& model) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : frozen_parameters(model)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.values().data());
    for (std::size_t i = 0; i < p.value.numel() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::map<std::string, std::vector<double>> snapshot(const CrossModalClassifier& model) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& p : trainable_parameters(model)) out[p.key] = p.value.values();
  return out;
}

void randomize_adapters(DualEncoderModel& model, std::uint64_t seed, double stddev) {
  Rng rng(derive_seed(seed, "randomize_adapters"));
  for_each_component(model, [&](const std::string&, const AdaptedLinear& al) {
    for (auto& p : al.parameters())
      if (p.tensor == "B")
        for (double& v : p.value.values()) v = rng.normal(0.0, stddev);
  });
}

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  if (!(lr_adapter >= 0.0) || !(lr_head >= 0.0)) throw ConfigError("train learning rates must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
}

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& g : groups_) {
    m_.emplace_back();
    v_.emplace_back();
    for (const auto& p : g.params) {
      m_.back().emplace_back(p.numel(), 0.0);
      v_.back().emplace_back(p.numel(), 0.0);
    }
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double sqrt_bc2 = std::sqrt(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const double lr = groups_[gi].lr;
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      Tensor& p = groups_[gi].params[pi];
      if (!p.has_grad()) continue;
      auto theta = p.data();
      auto g = p.grad();
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      const double decay = 1.0 - lr * wd_;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] *= decay;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        theta[i] -= (lr / bc1) * m[i] / (std::sqrt(v[i]) / sqrt_bc2 + eps_);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

// ---------------------------------------------------------------------------

std::vector<LambdaKey> lambda_keys(const DualEncoderModel& model) {
  std::vector<LambdaKey> keys;
  for (Side side : {Side::M, Side::C}) {
    const Encoder& enc = model.encoder(side);
    for (std::size_t l = 0; l < enc.layers.size(); ++l)
      for (Component c : kComponents) {
        const auto& al = enc.layers[l].component(c);
        if (al.cola && al.cola->lambda.defined()) keys.push_back({to_string(side), l, c});
      }
  }
  return keys;
}

void LambdaTrace::record(const DualEncoderModel& model, std::size_t epoch) {
  if (epochs.empty()) keys = lambda_keys(model);
  std::vector<double> row;
  row.reserve(keys.size());
  for (const auto& k : keys)
    row.push_back(model.encoder(k.encoder == "m" ? Side::M : Side::C).layers[k.layer].component(k.component).lambda_value());
  epochs.push_back(epoch);
  values.push_back(std::move(row));
}

std::string export_lambda(const LambdaTrace& trace) {
  std::string out = "epoch,encoder,layer,component,lambda\n";
  char buf[64];
  for (std::size_t r = 0; r < trace.epochs.size(); ++r)
    for (std::size_t k = 0; k < trace.keys.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", trace.values[r][k]);
      out += std::to_string(trace.epochs[r]) + "," + trace.keys[k].encoder + "," + std::to_string(trace.keys[k].layer) +
             "," + to_string(trace.keys[k].component) + "," + buf + "\n";
    }
  return out;
}

namespace {

Component component_from_string(const std::string& s) {
  for (Component c : kComponents)
    if (to_string(c) == s) return c;
  throw ConfigError("unknown component '" + s + "'");
}

}  // namespace

LambdaTrace parse_lambda_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,encoder,layer,component,lambda")
    throw ConfigError("lambda trace: missing or unexpected header");
  LambdaTrace trace;
  std::size_t key_index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw ConfigError("lambda trace: expected 5 fields in '" + line + "'");
    const std::size_t epoch = std::stoul(f[0]);
    LambdaKey key{f[1], std::stoul(f[2]), component_from_string(f[3])};
    const double value = std::strtod(f[4].c_str(), nullptr);
    if (trace.epochs.empty() || trace.epochs.back() != epoch) {
      trace.epochs.push_back(epoch);
      trace.values.emplace_back();
      key_index = 0;
    }
    if (trace.epochs.size() == 1) {
      trace.keys.push_back(key);
    } else {
      if (key_index >= trace.keys.size()) throw ConfigError("lambda trace: epoch rows differ in shape");
      const auto& k = trace.keys[key_index];
      if (k.encoder != key.encoder || k.layer != key.layer || k.component != key.component)
        throw ConfigError("lambda trace: epoch rows differ in key order");
    }
    trace.values.back().push_back(value);
    ++key_index;
  }
  return trace;
}

nlohmann::json MetricsLog::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  auto& rows = j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs)
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"train_acc", e.train_acc},
                    {"val_loss", e.val_loss},
                    {"val_acc", e.val_acc}});
  j["test_acc"] = test_acc;
  j["test_loss"] = test_loss;
  return j;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> labels_of(const std::vector<const Example*>& batch) {
  std::vector<int> y;
  y.reserve(batch.size());
  for (const Example* e : batch) y.push_back(e->label);
  return y;
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t C = logits.shape()[1];
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double* z = logits.values().data() + r * C;
    const auto pred = static_cast<int>(std::max_element(z, z + C) - z);
    correct += pred == labels[r];
  }
  return correct;
}

std::string first_non_finite(const CrossModalClassifier& model) {
  for (const auto& p : trainable_parameters(model))
    if (!all_finite(p.value)) return p.key;
  for (const auto& p : trainable_parameters(model))
    if (p.value.has_grad())
      for (double g : p.value.grad())
        if (!std::isfinite(g)) return p.key + " (gradient)";
  return "logits";
}

}  // namespace

EvalResult evaluate(const CrossModalClassifier& model, const std::vector<Example>& split, std::size_t batch) {
  if (split.empty()) return {};
  NoGradGuard no_grad;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.size(); start += batch) {
    std::vector<const Example*> b;
    for (std::size_t i = start; i < std::min(split.size(), start + batch); ++i) b.push_back(&split[i]);
    const auto y = labels_of(b);
    Tensor logits = model.forward(b);
    loss += cross_entropy(logits, y).item() * static_cast<double>(b.size());
    correct += count_correct(logits, y);
  }
  const auto n = static_cast<double>(split.size());
  return {loss / n, static_cast<double>(correct) / n};
}

TrainResult train(CrossModalClassifier& model, const Dataset& data, const RunConfig& run) {
  run.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  if (run.freeze_lambda)
    for_each_component(model.dual, [](const std::string&, const AdaptedLinear& al) {
      if (al.cola && al.cola->lambda.defined()) {
        Tensor lambda = al.cola->lambda;
        lambda.set_requires_grad(false);
      }
    });

  AdamW::Group adapters{{}, run.lr_adapter}, head{{}, run.lr_head};
  for (auto& p : trainable_parameters(model)) (p.group == ParamGroup::Head ? head : adapters).params.push_back(p.value);
  AdamW opt({adapters, head}, run.beta1, run.beta2, run.eps, run.weight_decay);

  TrainResult result;
  result.metrics.seed = run.seed;
  Rng shuffle_rng(derive_seed(run.seed, "shuffle"));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += run.batch_size) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + run.batch_size); ++i)
        batch.push_back(&data.train[order[i]]);
      const auto y = labels_of(batch);
      Tensor logits = model.forward(batch);
      Tensor loss = cross_entropy(logits, y);
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + "; first non-finite tensor: " +
                           first_non_finite(model));
      loss_sum += loss.item() * static_cast<double>(batch.size());
      correct += count_correct(logits, y);
      backward(loss);
      opt.step();
      opt.zero_grad();
    }
    const auto n = static_cast<double>(order.size());
    const EvalResult val = evaluate(model, data.val);
    result.metrics.epochs.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n, val.loss, val.accuracy});
    result.lambdas.record(model.dual, epoch);
  }
  const EvalResult test = evaluate(model, data.test);
  result.metrics.test_acc = test.accuracy;
  result.metrics.test_loss = test.loss;
  if (result.lambdas.epochs.empty()) result.lambdas.keys = lambda_keys(model.dual);
  result.metrics.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------

bool GradcheckReport::passed() const { return failing().empty() && !entries.empty(); }

std::vector<std::string> GradcheckReport::failing() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.finite || !(e.max_rel_error < tolerance)) out.push_back(e.cls);
  return out;
}

const GradcheckEntry* GradcheckReport::find(const std::string& cls) const {
  for (const auto& e : entries)
    if (e.cls == cls) return &e;
  return nullptr;
}

std::string GradcheckReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "class" << std::right << std::setw(8) << "tensors" << std::setw(9) << "coords"
     << std::setw(14) << "max_rel_err" << "  status\n";
  for (const auto& e : entries) {
    const bool ok = e.finite && e.max_rel_error < tolerance;
    os << std::left << std::setw(16) << e.cls << std::right << std::setw(8) << e.tensors << std::setw(9) << e.coords
       << std::setw(14) << std::scientific << std::setprecision(3) << e.max_rel_error << "  "
       << (ok ? "ok" : e.finite ? "FAIL" : "FAIL (non-finite)") << '\n';
  }
  return os.str();
}

GradcheckReport gradcheck_suite(const CrossModalClassifier& model, const std::vector<Example>& sample,
                                const GradcheckOptions& options) {
  if (sample.empty()) throw UsageError("gradcheck_suite needs a non-empty sample");
  std::vector<const Example*> batch;
  for (const auto& e : sample) batch.push_back(&e);
  const auto y = labels_of(batch);
  auto params = trainable_parameters(model);

  for (auto& p : params) p.value.zero_grad();
  {
    Tensor loss = cross_entropy(model.forward(batch), y);
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.value.numel(), 0.0);
    if (p.value.has_grad()) std::copy(p.value.grad().begin(), p.value.grad().end(), analytic.back().begin());
    p.value.zero_grad();
  }

  auto loss_at = [&]() {
    NoGradGuard no_grad;
    return cross_entropy(model.forward(batch), y).item();
  };

  struct Acc {
    std::size_t tensors = 0, coords = 0;
    double max_diff = 0.0, scale = 0.0, worst_diff = -1.0;
    std::string worst;
    bool finite = true;
  };
  std::map<std::string, Acc> acc;
  std::vector<std::string> order;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor theta = params[pi].value;
    const std::size_t n = theta.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords > 0 && n > options.max_coords) {
      Rng rng(derive_seed(options.seed, params[pi].key));
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(options.max_coords);
    }
    if (!acc.count(params[pi].cls)) order.push_back(params[pi].cls);
    Acc& a = acc[params[pi].cls];
    ++a.tensors;
    double tensor_diff = 0.0;
    for (std::size_t i : coords) {
      double& v = theta.values()[i];
      const double saved = v;
      v = saved + options.step;
      const double up = loss_at();
      v = saved - options.step;
      const double down = loss_at();
      v = saved;
      const double fd = (up - down) / (2.0 * options.step);
      const double g = analytic[pi][i];
      if (!std::isfinite(fd) || !std::isfinite(g)) {
        a.finite = false;
        continue;
      }
      tensor_diff = std::max(tensor_diff, std::abs(g - fd));
      a.scale = std::max({a.scale, std::abs(g), std::abs(fd)});
      ++a.coords;
    }
    a.max_diff = std::max(a.max_diff, tensor_diff);
    if (tensor_diff > a.worst_diff) {
      a.worst_diff = tensor_diff;
      a.worst = params[pi].key;
    }
  }

  GradcheckReport report;
  report.tolerance = options.tolerance;
  for (const auto& cls : order) {
    const Acc& a = acc[cls];
    GradcheckEntry e;
    e.cls = cls;
    e.tensors = a.tensors;
    e.coords = a.coords;
    e.worst = a.worst;
    e.finite = a.finite;
    e.max_rel_error = a.max_diff == 0.0 ? 0.0 : a.max_diff / std::max(a.scale, 1e-300);
    report.entries.push_back(e);
  }
  return report;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const CrossModalClassifier& model, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cola-checkpoint";
  j["version"] = 1;
  auto& tensors = j["tensors"] = nlohmann::json::object();
  for (const auto& p : trainable_parameters(model))
    tensors[p.key] = {{"shape", p.value.shape()}, {"data", p.value.values()}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump() << '\n';
}

void load_checkpoint(CrossModalClassifier& model, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path + ": " + ex.what());
  }
  if (j.value("format", "") != "cola-checkpoint" || j.value("version", 0) != 1)
    throw ConfigError(path + ": not a version-1 cola checkpoint");
  const auto& tensors = j.at("tensors");
  auto params = trainable_parameters(model);
  if (tensors.size() != params.size())
    throw ConfigError(path + ": checkpoint holds " + std::to_string(tensors.size()) + " tensors, model has " +
                      std::to_string(params.size()));
  for (auto& p : params) {
    if (!tensors.contains(p.key)) throw ConfigError(path + ": missing tensor " + p.key);
    const auto& t = tensors.at(p.key);
    if (t.at("shape").get<Shape>() != p.value.shape())
      throw ConfigError(path + ": shape mismatch for " + p.key);
    auto data = t.at("data").get<std::vector<double>>();
    if (data.size() != p.value.numel()) throw ConfigError(path + ": size mismatch for " + p.key);
    p.value.values() = std::move(data);
  }
}

}  // namespace cola
