#include "cola/accounting.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

#include "cola/random.hpp"

namespace cola {

EncoderArch EncoderArch::from_config(const std::string& name, const EncoderConfig& config, std::size_t d_cross) {
  EncoderArch e;
  e.name = name;
  e.d_model = config.d_model;
  e.d_ffn = config.d_ffn;
  e.n_layers = config.n_layers;
  e.d_cross = d_cross;
  e.components = {{Component::Q, config.d_model, config.d_k},   {Component::K, config.d_model, config.d_k},
                  {Component::V, config.d_model, config.d_v},   {Component::O, config.d_v, config.d_model},
                  {Component::Up, config.d_model, config.d_ffn}, {Component::Down, config.d_ffn, config.d_model}};
  return e;
}

ArchSpec ArchSpec::from_configs(const std::string& name, const EncoderConfig& m, const EncoderConfig& c) {
  ArchSpec a;
  a.name = name;
  a.encoders = {EncoderArch::from_config("m", m, c.d_model), EncoderArch::from_config("c", c, m.d_model)};
  return a;
}

ArchSpec ArchSpec::preset(const std::string& name) {
  if (name == "vitb-bertb" || name == "dinob-sslam") {
    // Base-size transformers on both sides: d = 768, d_ffn = 3072, 12 layers.
    const EncoderConfig base = EncoderConfig::square(768, 12);
    ArchSpec a = from_configs(name, base, base);
    a.encoders[0].name = name == "vitb-bertb" ? "vit-b" : "dinov2-b";
    a.encoders[1].name = name == "vitb-bertb" ? "bert-b" : "sslam";
    return a;
  }
  if (name == "toy") return from_configs("toy", EncoderConfig::square(32, 2), EncoderConfig::square(32, 2));
  throw ConfigError("unknown architecture preset '" + name + "' (expected vitb-bertb, dinob-sslam, toy)");
}

void ArchSpec::validate() const {
  for (const auto& e : encoders)
    for (const auto& c : e.components)
      if (c.d_in == 0 || c.d_out == 0) throw ConfigError("architecture " + name + " has a zero-sized component");
}

std::size_t hypernet_param_count(std::size_t d_c, std::size_t gamma, std::size_t rank, bool bias, bool ln_affine) {
  const std::size_t h = hypernet_hidden(d_c, gamma);
  const std::size_t r2 = rank * rank;
  std::size_t n = d_c * h + r2 * h;
  if (bias) n += h + r2;
  if (ln_affine) n += 2 * h + 2 * r2;
  return n;
}

std::string to_string(Pathway p) {
  switch (p) {
    case Pathway::Intra: return "intra";
    case Pathway::Inter: return "inter";
    case Pathway::Hypernet: return "hypernet";
    case Pathway::Lambda: return "lambda";
  }
  return "?";
}

double ParamReport::update_ratio() const {
  const double t = static_cast<double>(trainable());
  const double total = t + static_cast<double>(frozen);
  return total > 0.0 ? t / total : 0.0;
}

ParamReport count_params(const ArchSpec& arch, const AdapterConfig& config, AdapterMode mode) {
  arch.validate();
  ParamReport rep;
  rep.arch = arch.name;
  rep.mode = mode;
  rep.rank = config.rank;
  rep.head = arch.head_params;
  const std::size_t r = config.rank;
  AdapterConfig cfg = config;
  cfg.mode = mode;

  for (const auto& enc : arch.encoders) {
    for (std::size_t l = 0; l < enc.n_layers; ++l) {
      rep.frozen += 4 * enc.d_model;  // two layer norms, gain + bias
      for (const auto& c : enc.components) {
        rep.frozen += c.d_in * c.d_out + c.d_out;
        if (mode == AdapterMode::None) continue;
        const std::size_t a = r * c.d_in, b = r * c.d_out;
        std::size_t intra = a + b, inter = 0;
        switch (mode) {
          case AdapterMode::CoLA: inter = a + b; break;
          case AdapterMode::SharedA: inter = b; break;
          case AdapterMode::SharedB: inter = a; break;
          default: break;
        }
        const std::size_t hyper =
            cfg.has_inter() ? hypernet_param_count(enc.d_cross, cfg.gamma, r, cfg.hypernet_bias, cfg.hypernet_ln_affine) : 0;
        const std::size_t lam = cfg.has_lambda() ? 1 : 0;
        const std::pair<Pathway, std::size_t> parts[] = {
            {Pathway::Intra, intra}, {Pathway::Inter, inter}, {Pathway::Hypernet, hyper}, {Pathway::Lambda, lam}};
        for (const auto& [pw, n] : parts) {
          if (n == 0) continue;
          rep.entries.push_back({enc.name, l, c.component, pw, n});
        }
        rep.intra += intra;
        rep.inter += inter;
        rep.hypernet += hyper;
        rep.lambda += lam;
      }
    }
  }
  return rep;
}

namespace {

double scaled(std::size_t n, bool millions) {
  return millions ? static_cast<double>(n) / 1e6 : static_cast<double>(n);
}

std::string fmt_count(std::size_t n, bool millions) {
  std::ostringstream os;
  if (millions)
    os << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e6 << "M";
  else
    os << n;
  return os.str();
}

}  // namespace

nlohmann::json ParamReport::to_json(bool millions) const {
  nlohmann::json j;
  j["arch"] = arch;
  j["mode"] = to_string(mode);
  j["rank"] = rank;
  j["units"] = millions ? "millions" : "parameters";
  j["totals"] = {{"intra", scaled(intra, millions)},       {"inter", scaled(inter, millions)},
                 {"hypernet", scaled(hypernet, millions)}, {"lambda", scaled(lambda, millions)},
                 {"adapter", scaled(adapter_total(), millions)}, {"head", scaled(head, millions)},
                 {"trainable", scaled(trainable(), millions)},   {"frozen", scaled(frozen, millions)}};
  j["update_ratio"] = update_ratio();
  auto& rows = j["entries"] = nlohmann::json::array();
  for (const auto& e : entries)
    rows.push_back({{"encoder", e.encoder},
                    {"layer", e.layer},
                    {"component", to_string(e.component)},
                    {"pathway", to_string(e.pathway)},
                    {"count", scaled(e.count, millions)}});
  return j;
}

std::string ParamReport::to_table(bool millions) const {
  std::ostringstream os;
  os << "# parameters  arch=" << arch << "  mode=" << to_string(mode) << "  rank=" << rank << '\n';
  // Per (encoder, component, pathway), summed over layers.
  std::map<std::tuple<std::string, int, int>, std::size_t> agg;
  for (const auto& e : entries)
    agg[{e.encoder, static_cast<int>(e.component), static_cast<int>(e.pathway)}] += e.count;
  os << std::left << std::setw(10) << "encoder" << std::setw(11) << "component" << std::setw(10) << "pathway"
     << std::right << std::setw(14) << "params" << '\n';
  for (const auto& [key, n] : agg)
    os << std::left << std::setw(10) << std::get<0>(key) << std::setw(11)
       << to_string(static_cast<Component>(std::get<1>(key))) << std::setw(10)
       << to_string(static_cast<Pathway>(std::get<2>(key))) << std::right << std::setw(14) << fmt_count(n, millions)
       << '\n';
  const std::pair<const char*, std::size_t> totals[] = {{"intra", intra},       {"inter", inter},
                                                        {"hypernet", hypernet}, {"lambda", lambda},
                                                        {"adapter", adapter_total()}, {"head", head},
                                                        {"trainable", trainable()},   {"frozen", frozen}};
  for (const auto& [name, n] : totals)
    os << std::left << std::setw(31) << (std::string("total ") + name) << std::right << std::setw(14)
       << fmt_count(n, millions) << '\n';
  os << std::left << std::setw(31) << "update ratio" << std::right << std::setw(13) << std::fixed
     << std::setprecision(2) << 100.0 * update_ratio() << "%\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::string to_string(FlopsPathway p) {
  switch (p) {
    case FlopsPathway::Frozen: return "frozen";
    case FlopsPathway::Attention: return "attention";
    case FlopsPathway::Intra: return "intra";
    case FlopsPathway::Inter: return "inter";
    case FlopsPathway::Hypernet: return "hypernet";
    case FlopsPathway::Pool: return "pool";
  }
  return "?";
}

std::uint64_t FlopsReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& e : entries) n += e.macs;
  return n;
}

std::uint64_t FlopsReport::macs(FlopsPathway p) const {
  std::uint64_t n = 0;
  for (const auto& e : entries)
    if (e.pathway == p) n += e.macs;
  return n;
}

FlopsReport flops_forward(const ArchSpec& arch, const AdapterConfig& config, std::size_t n_m, std::size_t n_c,
                          AdapterMode mode, Strategy strategy) {
  if (n_m < 1 || n_c < 1) throw ConfigError("flops_forward: token counts must be >= 1");
  arch.validate();
  FlopsReport rep;
  rep.arch = arch.name;
  rep.mode = mode;
  rep.rank = config.rank;
  rep.n_m = n_m;
  rep.n_c = n_c;
  AdapterConfig cfg = config;
  cfg.mode = mode;
  const std::uint64_t r = config.rank;
  const std::size_t pools_per_layer = strategy == Strategy::Progressive ? 3 : strategy == Strategy::ModuleWise ? 2 : 1;

  for (std::size_t side = 0; side < 2; ++side) {
    const EncoderArch& enc = arch.encoders[side];
    const EncoderArch& other = arch.encoders[1 - side];
    const std::uint64_t n = side == 0 ? n_m : n_c;
    const std::uint64_t n_other = side == 0 ? n_c : n_m;
    for (std::size_t l = 0; l < enc.n_layers; ++l) {
      std::uint64_t d_k = 0, d_v = 0;
      for (const auto& c : enc.components) {
        if (c.component == Component::Q) d_k = c.d_out;
        if (c.component == Component::V) d_v = c.d_out;
        const std::string comp = to_string(c.component);
        rep.entries.push_back({enc.name, l, comp, FlopsPathway::Frozen, n * c.d_in * c.d_out});
        const std::uint64_t chain = n * r * (c.d_in + c.d_out);
        if (cfg.has_intra()) rep.entries.push_back({enc.name, l, comp, FlopsPathway::Intra, chain});
        if (cfg.has_inter()) {
          // Phi is applied inside the low-rank chain: N r^2 on top of A and B.
          rep.entries.push_back({enc.name, l, comp, FlopsPathway::Inter, chain + n * r * r});
          const std::uint64_t h = hypernet_hidden(enc.d_cross, cfg.gamma);
          rep.entries.push_back({enc.name, l, comp, FlopsPathway::Hypernet, enc.d_cross * h + h * r * r});
        }
      }
      rep.entries.push_back({enc.name, l, "attn", FlopsPathway::Attention, n * n * d_k + n * n * d_v});
      if (cfg.has_inter())
        rep.entries.push_back({enc.name, l, "pool", FlopsPathway::Pool, pools_per_layer * n_other * other.d_model});
    }
  }
  return rep;
}

nlohmann::json FlopsReport::to_json() const {
  nlohmann::json j;
  j["arch"] = arch;
  j["mode"] = to_string(mode);
  j["rank"] = rank;
  j["tokens"] = {{"m", n_m}, {"c", n_c}};
  j["convention"] = "1 MAC = 2 FLOPs";
  nlohmann::json totals;
  for (auto p : {FlopsPathway::Frozen, FlopsPathway::Attention, FlopsPathway::Intra, FlopsPathway::Inter,
                 FlopsPathway::Hypernet, FlopsPathway::Pool})
    totals[to_string(p)] = macs(p);
  j["total_macs"] = totals;
  j["macs"] = total_macs();
  j["gflops"] = gflops();
  auto& rows = j["entries"] = nlohmann::json::array();
  for (const auto& e : entries)
    rows.push_back({{"encoder", e.encoder},
                    {"layer", e.layer},
                    {"component", e.component},
                    {"pathway", to_string(e.pathway)},
                    {"macs", e.macs}});
  return j;
}

std::string FlopsReport::to_table() const {
  std::ostringstream os;
  os << "# forward MACs (1 MAC = 2 FLOPs)  arch=" << arch << "  mode=" << to_string(mode) << "  rank=" << rank
     << "  N_m=" << n_m << "  N_c=" << n_c << '\n';
  for (auto p : {FlopsPathway::Frozen, FlopsPathway::Attention, FlopsPathway::Intra, FlopsPathway::Inter,
                 FlopsPathway::Hypernet, FlopsPathway::Pool})
    os << std::left << std::setw(12) << to_string(p) << std::right << std::setw(18) << macs(p) << '\n';
  os << std::left << std::setw(12) << "total" << std::right << std::setw(18) << total_macs() << '\n';
  os << std::left << std::setw(12) << "GFLOPs" << std::right << std::setw(18) << std::fixed << std::setprecision(4)
     << gflops() << '\n';
  return os.str();
}

std::size_t parameter_matched_lora_rank(const ArchSpec& arch, const AdapterConfig& config) {
  const std::size_t target = count_params(arch, config, AdapterMode::CoLA).adapter_total();
  AdapterConfig probe = config;
  for (std::size_t r = 1;; ++r) {
    probe.rank = r;
    if (count_params(arch, probe, AdapterMode::LoRAOnly).adapter_total() >= target) return r;
  }
}

// ---------------------------------------------------------------------------

namespace {

long peak_rss_kb() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return usage.ru_maxrss;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

DualEncoderModel merged_copy(const DualEncoderModel& model) {
  DualEncoderModel out = model;
  for (Encoder* e : {&out.enc_m, &out.enc_c})
    for (auto& layer : e->layers)
      for (Component c : kComponents) {
        auto& al = layer.component(c);
        if (al.lora) al = al.merge_intra();
      }
  return out;
}

void clear_grads(const DualEncoderModel& model) {
  for (const Encoder* e : {&model.enc_m, &model.enc_c})
    for (const auto& layer : e->layers)
      for (Component c : kComponents)
        for (auto p : layer.component(c).parameters()) p.value.zero_grad();
}

}  // namespace

std::vector<BenchVariant> make_bench_variants(const EncoderConfig& m, const EncoderConfig& c,
                                              const AdapterConfig& config, Strategy strategy, std::uint64_t seed) {
  const ArchSpec arch = ArchSpec::from_configs("bench", m, c);
  std::vector<BenchVariant> out;
  auto build = [&](const std::string& name, AdapterMode mode, std::size_t rank) {
    AdapterConfig cfg = config;
    cfg.mode = mode;
    cfg.rank = rank;
    DualEncoderModel model = init_dual_encoder(m, c, cfg, cfg, strategy, seed);
    // Nonzero B factors so every pathway does real arithmetic.
    Rng rng(derive_seed(seed, name));
    for (Encoder* e : {&model.enc_m, &model.enc_c})
      for (auto& layer : e->layers)
        for (Component comp : kComponents)
          for (auto& p : layer.component(comp).parameters())
            if (p.tensor == "B")
              for (double& v : p.value.values()) v = rng.normal(0.0, 0.02);
    out.push_back({name, model, count_params(arch, cfg, mode).adapter_total()});
  };
  const std::size_t r = config.rank;
  const std::size_t r_match = parameter_matched_lora_rank(arch, config);
  build("lora_r" + std::to_string(r), AdapterMode::LoRAOnly, r);
  build("cola_r" + std::to_string(r), AdapterMode::CoLA, r);
  if (r_match < std::min(m.d_model, c.d_model)) build("lora_r" + std::to_string(r_match), AdapterMode::LoRAOnly, r_match);
  BenchVariant merged{"lora_r" + std::to_string(r) + "_merged", merged_copy(out.front().model), 0};
  out.push_back(std::move(merged));
  return out;
}

BenchSummary wallclock_bench(const std::vector<BenchVariant>& variants, const Tensor& x_m, const Tensor& x_c,
                             std::size_t repetitions, std::size_t warmup) {
  using clock = std::chrono::steady_clock;
  BenchSummary summary;
  summary.repetitions = repetitions;
  for (const auto& v : variants) {
    BenchRow row;
    row.name = v.name;
    row.adapter_params = v.adapter_params;
    const long rss_before = peak_rss_kb();
    std::vector<double> fwd, step;
    for (std::size_t i = 0; i < warmup + repetitions; ++i) {
      const auto t0 = clock::now();
      {
        NoGradGuard no_grad;
        auto out = dual_forward(v.model, x_m, x_c);
      }
      const auto t1 = clock::now();
      {
        auto [hm, hc] = dual_forward(v.model, x_m, x_c);
        Tensor loss = add(sum(hm), sum(hc));
        if (loss.requires_grad()) backward(loss);
      }
      const auto t2 = clock::now();
      clear_grads(v.model);
      if (i < warmup) continue;
      fwd.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      step.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
    }
    row.forward_median_ms = quantile(fwd, 0.5);
    row.forward_iqr_ms = quantile(fwd, 0.75) - quantile(fwd, 0.25);
    row.train_step_median_ms = quantile(step, 0.5);
    row.train_step_iqr_ms = quantile(step, 0.75) - quantile(step, 0.25);
    row.peak_rss_delta_kb = peak_rss_kb() - rss_before;
    summary.rows.push_back(row);
  }
  return summary;
}

const BenchRow& BenchSummary::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw UsageError("bench summary has no row named " + name);
}

nlohmann::json BenchSummary::to_json() const {
  nlohmann::json j;
  j["repetitions"] = repetitions;
  auto& arr = j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"name", r.name},
                   {"adapter_params", r.adapter_params},
                   {"forward_median_ms", r.forward_median_ms},
                   {"forward_iqr_ms", r.forward_iqr_ms},
                   {"train_step_median_ms", r.train_step_median_ms},
                   {"train_step_iqr_ms", r.train_step_iqr_ms},
                   {"peak_rss_delta_kb", r.peak_rss_delta_kb}});
  return j;
}

std::string BenchSummary::to_table() const {
  std::ostringstream os;
  os << "# wall clock over " << repetitions << " repetitions (median / IQR, ms)\n";
  os << std::left << std::setw(22) << "variant" << std::right << std::setw(12) << "params" << std::setw(12) << "fwd"
     << std::setw(10) << "iqr" << std::setw(12) << "fwd+bwd" << std::setw(10) << "iqr" << std::setw(12) << "rss+kB"
     << '\n';
  for (const auto& r : rows)
    os << std::left << std::setw(22) << r.name << std::right << std::setw(12) << r.adapter_params << std::fixed
       << std::setprecision(3) << std::setw(12) << r.forward_median_ms << std::setw(10) << r.forward_iqr_ms
       << std::setw(12) << r.train_step_median_ms << std::setw(10) << r.train_step_iqr_ms << std::setw(12)
       << r.peak_rss_delta_kb << '\n';
  return os.str();
}

}  // namespace cola
