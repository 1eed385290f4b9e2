#include "cola/dual_encoder.hpp"

#include "cola/random.hpp"

namespace cola {

Strategy strategy_from_string(const std::string& name) {
  if (name == "uniform") return Strategy::Uniform;
  if (name == "module_wise" || name == "modulewise") return Strategy::ModuleWise;
  if (name == "progressive") return Strategy::Progressive;
  throw ConfigError("unknown strategy '" + name + "' (expected uniform, module_wise, progressive)");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Uniform: return "uniform";
    case Strategy::ModuleWise: return "module_wise";
    case Strategy::Progressive: return "progressive";
  }
  return "?";
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Attention: return "attention";
    case Stage::OutProj: return "out_proj";
    case Stage::FFN: return "ffn";
  }
  return "?";
}

std::string to_string(Side s) { return s == Side::M ? "m" : "c"; }

DualEncoderModel DualEncoderModel::frozen_backbone() const {
  DualEncoderModel out;
  out.enc_m = enc_m.frozen_copy();
  out.enc_c = enc_c.frozen_copy();
  out.strategy = strategy;
  return out;
}

void DualEncoderModel::set_lambda(Side consumer, double value) {
  for (auto& layer : encoder(consumer).layers)
    for (Component c : kComponents) {
      auto& al = layer.component(c);
      if (al.cola && al.cola->lambda.defined()) al.cola->lambda.values()[0] = value;
    }
}

void DualEncoderModel::set_all_lambda(double value) {
  set_lambda(Side::M, value);
  set_lambda(Side::C, value);
}

std::size_t DualEncoderModel::adapter_parameter_count() const {
  std::size_t n = 0;
  for (const Encoder* e : {&enc_m, &enc_c})
    for (const auto& layer : e->layers)
      for (Component c : kComponents) n += layer.component(c).trainable_count();
  return n;
}

DualEncoderModel init_dual_encoder(const EncoderConfig& m, const EncoderConfig& c, const AdapterConfig& adapters_m,
                                   const AdapterConfig& adapters_c, Strategy strategy, std::uint64_t seed) {
  if (m.n_layers != c.n_layers)
    throw ConfigError("dual encoder stacks must have equal depth (" + std::to_string(m.n_layers) + " vs " +
                      std::to_string(c.n_layers) + ")");
  if (adapters_m.has_inter() && c.d_v != c.d_model)
    throw ConfigError("inter-modal pooling of attention outputs needs d_v == d_model in the source encoder");
  if (adapters_c.has_inter() && m.d_v != m.d_model)
    throw ConfigError("inter-modal pooling of attention outputs needs d_v == d_model in the source encoder");
  DualEncoderModel model;
  model.enc_m = init_encoder(m, c.d_model, adapters_m, derive_seed(seed, "encoder_m"));
  model.enc_c = init_encoder(c, m.d_model, adapters_c, derive_seed(seed, "encoder_c"));
  model.strategy = strategy;
  return model;
}

namespace {

void check_inputs(const DualEncoderModel& model, const Tensor& x_m, const Tensor& x_c) {
  auto check = [](const Encoder& e, const Tensor& x, const char* tag) {
    if ((x.dim() != 2 && x.dim() != 3) || x.shape().back() != e.config.d_model)
      throw ShapeError(std::string("dual_forward: input ") + tag + " " + shape_str(x.shape()) +
                       " does not match d_model " + std::to_string(e.config.d_model));
  };
  check(model.enc_m, x_m, "x_m");
  check(model.enc_c, x_c, "x_c");
  if (x_m.dim() != x_c.dim() || (x_m.dim() == 3 && x_m.shape()[0] != x_c.shape()[0]))
    throw ShapeError("dual_forward: batch layout differs between " + shape_str(x_m.shape()) + " and " +
                     shape_str(x_c.shape()));
}

// Pools `source` of the producer encoder for the consumer, if the consumer
// has inter-modal pathways at all.
std::optional<Tensor> pooled_for(const DualEncoderModel& model, Side consumer, std::size_t layer, Stage stage,
                                 const char* source_name, const Tensor& source) {
  if (!model.encoder(consumer).layers[layer].has_cross()) return std::nullopt;
  const Side producer = consumer == Side::M ? Side::C : Side::M;
  Tensor p = pool(source, model.encoder(producer).config.pooling);
  if (model.hook) model.hook(PoolEvent{layer, stage, consumer, source_name, p});
  return p;
}

// Hands an already pooled vector to a later stage.
std::optional<Tensor> reuse(const DualEncoderModel& model, Side consumer, std::size_t layer, Stage stage,
                            const char* source_name, const std::optional<Tensor>& pooled) {
  if (pooled && model.hook) model.hook(PoolEvent{layer, stage, consumer, source_name, *pooled});
  return pooled;
}

}  // namespace

std::pair<Tensor, Tensor> dual_forward(const DualEncoderModel& model, const Tensor& x_m, const Tensor& x_c) {
  check_inputs(model, x_m, x_c);
  Tensor xm = x_m, xc = x_c;
  for (std::size_t l = 0; l < model.enc_m.layers.size(); ++l) {
    const EncoderLayer& lm = model.enc_m.layers[l];
    const EncoderLayer& lc = model.enc_c.layers[l];

    // Both encoders finish a stage before either starts the next.
    auto in_for_m = pooled_for(model, Side::M, l, Stage::Attention, "x", xc);
    auto in_for_c = pooled_for(model, Side::C, l, Stage::Attention, "x", xm);
    Tensor a_m = lm.attn_stage(xm, in_for_m);
    Tensor a_c = lc.attn_stage(xc, in_for_c);

    std::optional<Tensor> o_for_m, o_for_c;
    if (model.strategy == Strategy::Progressive) {
      o_for_m = pooled_for(model, Side::M, l, Stage::OutProj, "a", a_c);
      o_for_c = pooled_for(model, Side::C, l, Stage::OutProj, "a", a_m);
    } else {
      o_for_m = reuse(model, Side::M, l, Stage::OutProj, "x", in_for_m);
      o_for_c = reuse(model, Side::C, l, Stage::OutProj, "x", in_for_c);
    }
    Tensor o_m = lm.out_proj_stage(a_m, o_for_m, xm);
    Tensor o_c = lc.out_proj_stage(a_c, o_for_c, xc);

    std::optional<Tensor> f_for_m, f_for_c;
    if (model.strategy == Strategy::Uniform) {
      f_for_m = reuse(model, Side::M, l, Stage::FFN, "x", in_for_m);
      f_for_c = reuse(model, Side::C, l, Stage::FFN, "x", in_for_c);
    } else {
      f_for_m = pooled_for(model, Side::M, l, Stage::FFN, "o", o_c);
      f_for_c = pooled_for(model, Side::C, l, Stage::FFN, "o", o_m);
    }
    xm = lm.ffn_stage(o_m, f_for_m);
    xc = lc.ffn_stage(o_c, f_for_c);
  }
  return {xm, xc};
}

Tensor unimodal_forward(const DualEncoderModel& model, Side which, const Tensor& x) {
  const Encoder& enc = model.encoder(which);
  if ((x.dim() != 2 && x.dim() != 3) || x.shape().back() != enc.config.d_model)
    throw ShapeError("unimodal_forward: input " + shape_str(x.shape()) + " does not match d_model " +
                     std::to_string(enc.config.d_model));
  for (std::size_t l = 0; l < enc.layers.size(); ++l)
    for (Component c : kComponents)
      if (enc.layers[l].component(c).cross_active())
        throw UsageError("unimodal_forward: encoder " + to_string(which) + " layer " + std::to_string(l) + " component " +
                         to_string(c) + " has an active inter-modal pathway; its output would depend on the other modality");
  Tensor h = x;
  for (const auto& layer : enc.layers) h = layer.forward(h, std::nullopt);
  return h;
}

StrategyOutputs strategy_compare(const DualEncoderModel& model, const Tensor& x_m, const Tensor& x_c) {
  DualEncoderModel variant = model;
  variant.hook = nullptr;
  StrategyOutputs out;
  variant.strategy = Strategy::Uniform;
  out.uniform = dual_forward(variant, x_m, x_c);
  variant.strategy = Strategy::ModuleWise;
  out.module_wise = dual_forward(variant, x_m, x_c);
  variant.strategy = Strategy::Progressive;
  out.progressive = dual_forward(variant, x_m, x_c);
  return out;
}

}  // namespace cola
