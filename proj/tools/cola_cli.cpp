// cola: train, ablate, count, gradcheck and bench entry points.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric abort,
// 4 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cola/accounting.hpp"
#include "cola/config.hpp"
#include "cola/random.hpp"

namespace fs = std::filesystem;
using namespace cola;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericAbort = 3;
constexpr int kVerificationFailure = 4;

struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy, mode, profile, out;
  std::optional<std::size_t> rank;
  std::optional<double> lambda_init;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Root seed for every random stream");
  cmd->add_option("--strategy", o.strategy, "uniform | module_wise | progressive");
  cmd->add_option("--mode", o.mode, "lora | cola | shared_a | shared_b | fully_shared");
  cmd->add_option("--rank", o.rank, "Adapter rank r");
  cmd->add_option("--lambda-init", o.lambda_init, "Initial lambda");
  cmd->add_option("--profile", o.profile, "vl | av hyperparameter defaults");
  cmd->add_option("--out", o.out, "Output directory");
}

ExperimentConfig resolve(const std::string& path, const Overrides& o) {
  ExperimentConfig base;
  if (o.profile) apply_profile(base, *o.profile);
  ExperimentConfig c = load_config(path, base);
  if (o.seed) c.seed = *o.seed;
  if (o.strategy) c.strategy = strategy_from_string(*o.strategy);
  if (o.mode) c.adapter.mode = adapter_mode_from_string(*o.mode);
  if (o.rank) c.adapter.rank = *o.rank;
  if (o.lambda_init) c.adapter.lambda_init = *o.lambda_init;
  if (o.out) c.output_dir = *o.out;
  c.train.seed = c.seed;
  c.validate();
  std::cout << "# resolved config\n" << to_json(c).dump(2) << "\n";
  return c;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

fs::path prepare_output(const ExperimentConfig& c) {
  fs::path dir(c.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

struct RunOutcome {
  TrainResult result;
  CrossModalClassifier model;
};

RunOutcome run_experiment(const ExperimentConfig& c, const Dataset& data) {
  RunOutcome out{{}, init_classifier(c.encoder_m, c.encoder_c, c.adapter, c.strategy, c.task, c.seed)};
  const auto before = frozen_fingerprint(out.model);
  out.result = train(out.model, data, c.train);
  if (frozen_fingerprint(out.model) != before) throw VerificationFailure("frozen weights changed during training");
  return out;
}

Dataset make_data(const ExperimentConfig& c) {
  return gen_dataset(c.task, c.n_train, c.n_val, c.n_test, derive_seed(c.seed, "data"));
}

void print_epochs(const MetricsLog& m) {
  for (const auto& e : m.epochs)
    std::printf("epoch %3zu  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f\n", e.epoch, e.train_loss,
                e.train_acc, e.val_loss, e.val_acc);
  std::printf("test_acc %.4f  test_loss %.4f  wall %.2fs\n", m.test_acc, m.test_loss, m.wall_time_s);
}

int cmd_train(const std::string& path, const Overrides& o) {
  const ExperimentConfig c = resolve(path, o);
  const fs::path dir = prepare_output(c);
  const Dataset data = make_data(c);
  const RunOutcome run = run_experiment(c, data);
  print_epochs(run.result.metrics);

  nlohmann::json metrics = run.result.metrics.to_json();
  metrics["mode"] = to_string(c.adapter.mode);
  metrics["strategy"] = to_string(c.strategy);
  metrics["adapter_params"] = run.model.dual.adapter_parameter_count();
  write_file(dir / "metrics.json", metrics.dump(2) + "\n");
  write_file(dir / "timing.json", nlohmann::json{{"wall_time_s", run.result.metrics.wall_time_s}}.dump(2) + "\n");
  write_file(dir / "lambda_trace.csv", export_lambda(run.result.lambdas));
  save_checkpoint(run.model, (dir / "checkpoint.json").string());
  write_file(dir / "config.json", to_json(c).dump(2) + "\n");
  std::cout << "wrote " << (dir / "metrics.json").string() << ", lambda_trace.csv, checkpoint.json\n";
  return kOk;
}

int cmd_ablate(const std::string& path, const std::string& axis, bool lambda_zero, const Overrides& o) {
  ExperimentConfig c = resolve(path, o);
  if (lambda_zero) {
    c.adapter.lambda_init = 0.0;
    c.train.freeze_lambda = true;
  }
  const fs::path dir = prepare_output(c);
  const Dataset data = make_data(c);
  const ArchSpec arch = ArchSpec::from_configs("config", c.encoder_m, c.encoder_c);

  struct Row {
    std::string name;
    double test_acc;
    std::size_t params;
  };
  std::vector<Row> rows;
  auto run_variant = [&](const std::string& name, const ExperimentConfig& v) {
    const RunOutcome run = run_experiment(v, data);
    const std::size_t analytic = count_params(arch, v.adapter, v.adapter.mode).adapter_total();
    const std::size_t instantiated = run.model.dual.adapter_parameter_count();
    if (analytic != instantiated)
      throw VerificationFailure(name + ": analytic adapter count " + std::to_string(analytic) +
                                " differs from instantiated " + std::to_string(instantiated));
    std::printf("%-12s test_acc %.4f  adapter_params %zu\n", name.c_str(), run.result.metrics.test_acc, analytic);
    rows.push_back({name, run.result.metrics.test_acc, analytic});
  };

  if (axis == "sharing") {
    const std::pair<const char*, AdapterMode> variants[] = {{"FullyShared", AdapterMode::FullyShared},
                                                            {"SharedA", AdapterMode::SharedA},
                                                            {"SharedB", AdapterMode::SharedB},
                                                            {"NonShared", AdapterMode::CoLA}};
    for (const auto& [name, mode] : variants) {
      ExperimentConfig v = c;
      v.adapter.mode = mode;
      run_variant(name, v);
    }
  } else if (axis == "propagation") {
    const std::pair<const char*, Strategy> variants[] = {
        {"Uniform", Strategy::Uniform}, {"ModuleWise", Strategy::ModuleWise}, {"Progressive", Strategy::Progressive}};
    for (const auto& [name, strategy] : variants) {
      ExperimentConfig v = c;
      v.strategy = strategy;
      run_variant(name, v);
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (expected sharing or propagation)");
  }

  std::ostringstream table;
  table << "variant\ttest_acc\tadapter_params\n";
  nlohmann::json j{{"axis", axis}, {"lambda_zero", lambda_zero}, {"seed", c.seed}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) {
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.4f", r.test_acc);
    table << r.name << '\t' << acc << '\t' << r.params << '\n';
    j["rows"].push_back({{"variant", r.name}, {"test_acc", r.test_acc}, {"adapter_params", r.params}});
  }
  std::cout << "\n" << table.str();
  write_file(dir / ("ablation_" + axis + ".tsv"), table.str());
  write_file(dir / ("ablation_" + axis + ".json"), j.dump(2) + "\n");
  return kOk;
}

std::pair<AdapterMode, std::size_t> parse_mode_rank(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ConfigError("--delta expects mode:rank, got '" + spec + "'");
  std::size_t rank = 0;
  try {
    rank = std::stoul(spec.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--delta rank is not an integer in '" + spec + "'");
  }
  return {adapter_mode_from_string(spec.substr(0, colon)), rank};
}

struct CountArgs {
  std::string preset = "vitb-bertb";
  std::string mode = "cola";
  std::size_t rank = 16;
  std::size_t gamma = 16;
  double alpha = 8.0;
  std::optional<std::string> delta;
  std::optional<std::string> out;
  bool millions = false;
  bool json = false;
};

int cmd_count(const CountArgs& a) {
  const ArchSpec arch = ArchSpec::preset(a.preset);
  AdapterConfig cfg;
  cfg.rank = a.rank;
  cfg.gamma = a.gamma;
  cfg.alpha = a.alpha;
  cfg.mode = adapter_mode_from_string(a.mode);
  std::cout << "# resolved config\n"
            << nlohmann::json{{"preset", a.preset}, {"mode", to_string(cfg.mode)}, {"rank", a.rank},
                              {"gamma", a.gamma},   {"alpha", a.alpha},           {"millions", a.millions}}
                   .dump(2)
            << "\n";
  const ParamReport report = count_params(arch, cfg, cfg.mode);
  nlohmann::json j = report.to_json(a.millions);
  if (a.json)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << report.to_table(a.millions);

  if (a.delta) {
    const auto [other_mode, other_rank] = parse_mode_rank(*a.delta);
    AdapterConfig other = cfg;
    other.mode = other_mode;
    other.rank = other_rank;
    const auto lhs = static_cast<long long>(report.adapter_total());
    const auto rhs = static_cast<long long>(count_params(arch, other, other_mode).adapter_total());
    const long long diff = lhs - rhs;
    std::printf("delta %s:%zu - %s:%zu = %lld params = %.3fM\n", to_string(cfg.mode).c_str(), a.rank,
                to_string(other_mode).c_str(), other_rank, diff, static_cast<double>(diff) / 1e6);
    j["delta"] = {{"other_mode", to_string(other_mode)}, {"other_rank", other_rank}, {"params", diff},
                  {"millions", static_cast<double>(diff) / 1e6}};
  }
  if (a.out) {
    fs::create_directories(*a.out);
    write_file(fs::path(*a.out) / "params.json", j.dump(2) + "\n");
  }
  return kOk;
}

int cmd_gradcheck(const std::string& path, const Overrides& o) {
  const ExperimentConfig c = resolve(path, o);
  CrossModalClassifier model = init_classifier(c.encoder_m, c.encoder_c, c.adapter, c.strategy, c.task, c.seed);
  randomize_adapters(model.dual, derive_seed(c.seed, "gradcheck"));
  const Dataset data = gen_dataset(c.task, c.gradcheck.batch, 1, 1, derive_seed(c.seed, "gradcheck-data"));
  GradcheckOptions opt;
  opt.step = c.gradcheck.step;
  opt.tolerance = c.gradcheck.tolerance;
  opt.max_coords = c.gradcheck.max_coords;
  opt.seed = c.seed;
  const GradcheckReport report = gradcheck_suite(model, data.train, opt);
  std::cout << report.to_table();
  if (!report.passed()) {
    std::string bad;
    for (const auto& cls : report.failing()) bad += (bad.empty() ? "" : ", ") + cls;
    std::cout << "gradcheck FAILED; offending classes: " << bad << "\n";
    return kVerificationFailure;
  }
  std::cout << "gradcheck passed (tolerance " << opt.tolerance << ")\n";
  return kOk;
}

int cmd_bench(const std::string& path, const Overrides& o) {
  const ExperimentConfig c = resolve(path, o);
  const fs::path dir = prepare_output(c);

  const ArchSpec arch = ArchSpec::preset(c.bench.preset);
  AdapterConfig analytic = c.adapter;
  analytic.rank = c.bench.rank;
  analytic.gamma = c.bench.gamma;
  const FlopsReport lora = flops_forward(arch, analytic, c.bench.tokens_m, c.bench.tokens_c, AdapterMode::LoRAOnly,
                                         c.strategy);
  const FlopsReport cola = flops_forward(arch, analytic, c.bench.tokens_m, c.bench.tokens_c, AdapterMode::CoLA,
                                         c.strategy);
  const double ratio = cola.gflops() / lora.gflops();
  std::cout << lora.to_table() << cola.to_table();
  std::printf("CoLA / LoRA forward GFLOPs at r=%zu on %s: %.4f\n", analytic.rank, arch.name.c_str(), ratio);

  auto variants = make_bench_variants(c.encoder_m, c.encoder_c, c.adapter, c.strategy, c.seed);
  Rng rng(derive_seed(c.seed, "bench-input"));
  const Tensor x_m = rng.normal_tensor({c.bench.batch, c.task.tokens, c.encoder_m.d_model}, 1.0);
  const Tensor x_c = rng.normal_tensor({c.bench.batch, c.task.tokens, c.encoder_c.d_model}, 1.0);
  const BenchSummary summary = wallclock_bench(variants, x_m, x_c, c.bench.repetitions, c.bench.warmup);
  std::cout << summary.to_table();
  const std::string r = std::to_string(c.adapter.rank);
  const double lora_fwd = summary.row("lora_r" + r).forward_median_ms;
  std::printf("CoLA vs LoRA median forward: %.3f ms vs %.3f ms\n", summary.row("cola_r" + r).forward_median_ms,
              lora_fwd);
  std::printf("merged vs unmerged LoRA median forward: %.3f ms vs %.3f ms\n",
              summary.row("lora_r" + r + "_merged").forward_median_ms, lora_fwd);

  nlohmann::json flops{{"lora", lora.to_json()}, {"cola", cola.to_json()}, {"gflops_ratio", ratio}};
  write_file(dir / "flops.json", flops.dump(2) + "\n");
  write_file(dir / "bench.json", summary.to_json().dump(2) + "\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal low-rank adapters for dual-encoder transformers"};
  app.require_subcommand(1);

  Overrides train_o, ablate_o, grad_o, bench_o;
  std::string train_cfg, ablate_cfg, grad_cfg, bench_cfg, axis;
  bool lambda_zero = false;
  CountArgs count;

  auto* train_cmd = app.add_subcommand("train", "Train one model and write metrics, lambda trace and checkpoint");
  train_cmd->add_option("config", train_cfg, "Experiment config (JSON)")->required();
  add_overrides(train_cmd, train_o);

  auto* ablate_cmd = app.add_subcommand("ablate", "Run every variant along one ablation axis");
  ablate_cmd->add_option("config", ablate_cfg, "Experiment config (JSON)")->required();
  ablate_cmd->add_option("--axis", axis, "sharing | propagation")->required();
  ablate_cmd->add_flag("--lambda-zero", lambda_zero, "Pin every lambda at 0");
  add_overrides(ablate_cmd, ablate_o);

  auto* count_cmd = app.add_subcommand("count", "Print analytic adapter parameter counts");
  count_cmd->add_option("--preset", count.preset, "vitb-bertb | dinob-sslam | toy");
  count_cmd->add_option("--mode", count.mode, "lora | cola | shared_a | shared_b | fully_shared");
  count_cmd->add_option("--rank", count.rank, "Adapter rank r");
  count_cmd->add_option("--gamma", count.gamma, "Hypernet reduction factor");
  count_cmd->add_option("--alpha", count.alpha, "LoRA scaling alpha");
  count_cmd->add_option("--delta", count.delta, "mode:rank to subtract from the primary count");
  count_cmd->add_option("--out", count.out, "Directory for params.json");
  count_cmd->add_flag("--millions", count.millions, "Report in millions");
  count_cmd->add_flag("--json", count.json, "Print the report as JSON");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare autodiff with finite differences per parameter class");
  grad_cmd->add_option("config", grad_cfg, "Experiment config (JSON)")->required();
  add_overrides(grad_cmd, grad_o);

  auto* bench_cmd = app.add_subcommand("bench", "Analytic FLOPs and wall-clock comparison");
  bench_cmd->add_option("config", bench_cfg, "Experiment config (JSON)")->required();
  add_overrides(bench_cmd, bench_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(train_cfg, train_o);
    if (*ablate_cmd) return cmd_ablate(ablate_cfg, axis, lambda_zero, ablate_o);
    if (*count_cmd) return cmd_count(count);
    if (*grad_cmd) return cmd_gradcheck(grad_cfg, grad_o);
    if (*bench_cmd) return cmd_bench(bench_cfg, bench_o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
