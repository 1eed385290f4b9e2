#include "cola/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cola {

ExperimentConfig::ExperimentConfig() {
  encoder_m = EncoderConfig::square(32, 2);
  encoder_c = EncoderConfig::square(32, 2);
  adapter.rank = 4;
  adapter.gamma = 4;
  adapter.alpha = 8.0;
  adapter.lambda_init = 0.5;
  adapter.mode = AdapterMode::CoLA;
}

void ExperimentConfig::validate() const {
  encoder_m.validate();
  encoder_c.validate();
  task.validate();
  train.validate();
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("task split sizes must be >= 1");
  if (encoder_m.n_layers != encoder_c.n_layers) throw ConfigError("encoder_m and encoder_c need the same n_layers");
  if (adapter.mode != AdapterMode::None) {
    adapter.validate(encoder_m.d_model, std::min(encoder_m.d_k, encoder_m.d_v), encoder_c.d_model);
    adapter.validate(encoder_c.d_model, std::min(encoder_c.d_k, encoder_c.d_v), encoder_m.d_model);
  }
  if (gradcheck.batch < 1) throw ConfigError("gradcheck.batch must be >= 1");
  if (!(gradcheck.step > 0.0) || !(gradcheck.tolerance > 0.0))
    throw ConfigError("gradcheck.step and gradcheck.tolerance must be > 0");
  if (bench.rank < 1 || bench.gamma < 1) throw ConfigError("bench.rank and bench.gamma must be >= 1");
  if (bench.repetitions < 1 || bench.batch < 1 || bench.tokens_m < 1 || bench.tokens_c < 1)
    throw ConfigError("bench repetitions, batch and token counts must be >= 1");
  if (!profile.empty() && profile != "vl" && profile != "av") throw ConfigError("profile must be vl or av");
}

void apply_profile(ExperimentConfig& config, const std::string& name) {
  if (name == "vl") {
    config.adapter.lambda_init = 0.5;
    config.train.weight_decay = 1e-4;
    config.train.lr_adapter = 1e-4;
    config.train.lr_head = 2.5e-5;
    config.train.epochs = 150;
    config.train.batch_size = 80;
  } else if (name == "av") {
    config.adapter.lambda_init = 0.1;
    config.train.weight_decay = 0.0;  // plain Adam
    config.train.lr_adapter = 5e-6;
    config.train.lr_head = 4e-6;
    config.train.epochs = 50;
    config.train.batch_size = 2;
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected vl or av)");
  }
  config.adapter.rank = 16;
  config.adapter.alpha = 8.0;
  config.adapter.gamma = 16;
  config.profile = name;
}

namespace {

using nlohmann::json;

struct Position {
  std::size_t line = 1, column = 1;
};

Position position_of(const std::string& text, std::size_t offset) {
  Position p;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++p.line;
      p.column = 1;
    } else {
      ++p.column;
    }
  }
  return p;
}

class Reader {
 public:
  Reader(const std::string& text, const std::string& source) : text_(text), source_(source) {}

  [[noreturn]] void fail(const std::string& path, const std::string& what) const {
    const std::string leaf = path.substr(path.rfind('.') + 1);
    std::string where = source_;
    const auto at = text_.find("\"" + leaf + "\"");
    if (at != std::string::npos) where += ":" + std::to_string(position_of(text_, at).line);
    throw ConfigError(where + ": key '" + path + "': " + what);
  }

  double number(const json& v, const std::string& path) const {
    if (!v.is_number()) fail(path, "expected a number");
    return v.get<double>();
  }
  std::size_t count(const json& v, const std::string& path) const {
    if (!v.is_number_integer() || v.get<long long>() < 0) fail(path, "expected a non-negative integer");
    return v.get<std::size_t>();
  }
  bool boolean(const json& v, const std::string& path) const {
    if (!v.is_boolean()) fail(path, "expected true or false");
    return v.get<bool>();
  }
  std::string string(const json& v, const std::string& path) const {
    if (!v.is_string()) fail(path, "expected a string");
    return v.get<std::string>();
  }

  using Handler = std::function<void(const json&, const std::string&)>;

  void object(const json& v, const std::string& path, const std::map<std::string, Handler>& handlers) const {
    if (!v.is_object()) fail(path.empty() ? "<root>" : path, "expected an object");
    for (const auto& [key, value] : v.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      auto it = handlers.find(key);
      if (it == handlers.end()) {
        std::string known;
        for (const auto& [k, h] : handlers) known += (known.empty() ? "" : ", ") + k;
        fail(sub, "unknown key (expected one of: " + known + ")");
      }
      try {
        it->second(value, sub);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& ex) {
        fail(sub, ex.what());
      }
    }
  }

  template <typename Fn>
  auto enum_value(const json& v, const std::string& path, Fn&& from_string) const {
    const std::string s = string(v, path);
    try {
      return from_string(s);
    } catch (const ConfigError& ex) {
      fail(path, ex.what());
    }
  }

 private:
  const std::string& text_;
  std::string source_;
};

void read_encoder(const Reader& r, const json& v, const std::string& path, EncoderConfig& e) {
  r.object(v, path,
           {{"d_model", [&](const json& x, const std::string& p) { e.d_model = r.count(x, p); }},
            {"d_k", [&](const json& x, const std::string& p) { e.d_k = r.count(x, p); }},
            {"d_v", [&](const json& x, const std::string& p) { e.d_v = r.count(x, p); }},
            {"d_ffn", [&](const json& x, const std::string& p) { e.d_ffn = r.count(x, p); }},
            {"n_layers", [&](const json& x, const std::string& p) { e.n_layers = r.count(x, p); }},
            {"pre_norm", [&](const json& x, const std::string& p) { e.pre_norm = r.boolean(x, p); }},
            {"pooling", [&](const json& x, const std::string& p) { e.pooling = r.enum_value(x, p, pooling_from_string); }},
            {"activation",
             [&](const json& x, const std::string& p) { e.activation = r.enum_value(x, p, activation_from_string); }}});
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source, ExperimentConfig base) {
  json doc;
  try {
    doc = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& ex) {
    const Position p = position_of(text, ex.byte > 0 ? ex.byte - 1 : 0);
    std::string msg = ex.what();
    if (auto at = msg.find("syntax error"); at != std::string::npos) msg = msg.substr(at);
    throw ConfigError(source + ":" + std::to_string(p.line) + ":" + std::to_string(p.column) + ": " + msg);
  }
  ExperimentConfig c = std::move(base);
  const Reader r(text, source);
  using H = Reader::Handler;
  // A profile named in the file sits below every other key of the file.
  if (doc.is_object() && doc.contains("profile")) {
    const std::string name = r.string(doc["profile"], "profile");
    if (!name.empty() && name != c.profile) {
      try {
        apply_profile(c, name);
      } catch (const ConfigError& ex) {
        r.fail("profile", ex.what());
      }
    }
  }
  r.object(
      doc, "",
      {{"seed", H([&](const json& x, const std::string& p) { c.seed = r.count(x, p); })},
       {"output_dir", H([&](const json& x, const std::string& p) { c.output_dir = r.string(x, p); })},
       {"profile", H([](const json&, const std::string&) {})},  // applied above
       {"strategy",
        H([&](const json& x, const std::string& p) { c.strategy = r.enum_value(x, p, strategy_from_string); })},
       {"encoder_m", H([&](const json& x, const std::string& p) { read_encoder(r, x, p, c.encoder_m); })},
       {"encoder_c", H([&](const json& x, const std::string& p) { read_encoder(r, x, p, c.encoder_c); })},
       {"adapter",
        H([&](const json& x, const std::string& path) {
          auto& a = c.adapter;
          r.object(x, path,
                   {{"mode", [&](const json& v, const std::string& p) {
                       a.mode = r.enum_value(v, p, adapter_mode_from_string);
                     }},
                    {"rank", [&](const json& v, const std::string& p) { a.rank = r.count(v, p); }},
                    {"alpha", [&](const json& v, const std::string& p) { a.alpha = r.number(v, p); }},
                    {"lambda_init", [&](const json& v, const std::string& p) { a.lambda_init = r.number(v, p); }},
                    {"gamma", [&](const json& v, const std::string& p) { a.gamma = r.count(v, p); }},
                    {"activation", [&](const json& v, const std::string& p) {
                       a.activation = r.enum_value(v, p, activation_from_string);
                     }},
                    {"hypernet_bias", [&](const json& v, const std::string& p) { a.hypernet_bias = r.boolean(v, p); }},
                    {"hypernet_ln_affine",
                     [&](const json& v, const std::string& p) { a.hypernet_ln_affine = r.boolean(v, p); }}});
        })},
       {"train",
        H([&](const json& x, const std::string& path) {
          auto& t = c.train;
          r.object(x, path,
                   {{"lr_adapter", [&](const json& v, const std::string& p) { t.lr_adapter = r.number(v, p); }},
                    {"lr_head", [&](const json& v, const std::string& p) { t.lr_head = r.number(v, p); }},
                    {"weight_decay", [&](const json& v, const std::string& p) { t.weight_decay = r.number(v, p); }},
                    {"beta1", [&](const json& v, const std::string& p) { t.beta1 = r.number(v, p); }},
                    {"beta2", [&](const json& v, const std::string& p) { t.beta2 = r.number(v, p); }},
                    {"eps", [&](const json& v, const std::string& p) { t.eps = r.number(v, p); }},
                    {"epochs", [&](const json& v, const std::string& p) { t.epochs = r.count(v, p); }},
                    {"batch_size", [&](const json& v, const std::string& p) { t.batch_size = r.count(v, p); }},
                    {"freeze_lambda", [&](const json& v, const std::string& p) { t.freeze_lambda = r.boolean(v, p); }}});
        })},
       {"task",
        H([&](const json& x, const std::string& path) {
          auto& t = c.task;
          r.object(x, path,
                   {{"num_classes", [&](const json& v, const std::string& p) { t.num_classes = r.count(v, p); }},
                    {"vocab_size", [&](const json& v, const std::string& p) { t.vocab_size = r.count(v, p); }},
                    {"tokens", [&](const json& v, const std::string& p) { t.tokens = r.count(v, p); }},
                    {"noise", [&](const json& v, const std::string& p) { t.noise = r.number(v, p); }},
                    {"n_train", [&](const json& v, const std::string& p) { c.n_train = r.count(v, p); }},
                    {"n_val", [&](const json& v, const std::string& p) { c.n_val = r.count(v, p); }},
                    {"n_test", [&](const json& v, const std::string& p) { c.n_test = r.count(v, p); }}});
        })},
       {"gradcheck",
        H([&](const json& x, const std::string& path) {
          auto& g = c.gradcheck;
          r.object(x, path,
                   {{"batch", [&](const json& v, const std::string& p) { g.batch = r.count(v, p); }},
                    {"max_coords", [&](const json& v, const std::string& p) { g.max_coords = r.count(v, p); }},
                    {"step", [&](const json& v, const std::string& p) { g.step = r.number(v, p); }},
                    {"tolerance", [&](const json& v, const std::string& p) { g.tolerance = r.number(v, p); }}});
        })},
       {"bench", H([&](const json& x, const std::string& path) {
          auto& b = c.bench;
          r.object(x, path,
                   {{"preset", [&](const json& v, const std::string& p) { b.preset = r.string(v, p); }},
                    {"rank", [&](const json& v, const std::string& p) { b.rank = r.count(v, p); }},
                    {"gamma", [&](const json& v, const std::string& p) { b.gamma = r.count(v, p); }},
                    {"tokens_m", [&](const json& v, const std::string& p) { b.tokens_m = r.count(v, p); }},
                    {"tokens_c", [&](const json& v, const std::string& p) { b.tokens_c = r.count(v, p); }},
                    {"repetitions", [&](const json& v, const std::string& p) { b.repetitions = r.count(v, p); }},
                    {"warmup", [&](const json& v, const std::string& p) { b.warmup = r.count(v, p); }},
                    {"batch", [&](const json& v, const std::string& p) { b.batch = r.count(v, p); }}});
        })}});
  c.train.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path, std::move(base));
}

namespace {

json encoder_json(const EncoderConfig& e) {
  return {{"d_model", e.d_model},     {"d_k", e.d_k},
          {"d_v", e.d_v},             {"d_ffn", e.d_ffn},
          {"n_layers", e.n_layers},   {"pre_norm", e.pre_norm},
          {"pooling", to_string(e.pooling)}, {"activation", to_string(e.activation)}};
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["profile"] = c.profile;
  j["strategy"] = to_string(c.strategy);
  j["encoder_m"] = encoder_json(c.encoder_m);
  j["encoder_c"] = encoder_json(c.encoder_c);
  const auto& a = c.adapter;
  j["adapter"] = {{"mode", to_string(a.mode)},
                  {"rank", a.rank},
                  {"alpha", a.alpha},
                  {"lambda_init", a.lambda_init},
                  {"gamma", a.gamma},
                  {"activation", to_string(a.activation)},
                  {"hypernet_bias", a.hypernet_bias},
                  {"hypernet_ln_affine", a.hypernet_ln_affine}};
  const auto& t = c.train;
  j["train"] = {{"lr_adapter", t.lr_adapter}, {"lr_head", t.lr_head}, {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},           {"beta2", t.beta2},     {"eps", t.eps},
                {"epochs", t.epochs},         {"batch_size", t.batch_size}, {"freeze_lambda", t.freeze_lambda}};
  j["task"] = {{"num_classes", c.task.num_classes},
               {"vocab_size", c.task.vocab_size},
               {"tokens", c.task.tokens},
               {"noise", c.task.noise},
               {"n_train", c.n_train},
               {"n_val", c.n_val},
               {"n_test", c.n_test}};
  j["gradcheck"] = {{"batch", c.gradcheck.batch},
                    {"max_coords", c.gradcheck.max_coords},
                    {"step", c.gradcheck.step},
                    {"tolerance", c.gradcheck.tolerance}};
  j["bench"] = {{"preset", c.bench.preset},         {"rank", c.bench.rank}, {"gamma", c.bench.gamma},         {"tokens_m", c.bench.tokens_m}, {"tokens_c", c.bench.tokens_c},
                {"repetitions", c.bench.repetitions}, {"warmup", c.bench.warmup}, {"batch", c.bench.batch}};
  return j;
}

}  // namespace cola
