#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cola/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(COLA_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cola_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A model small enough that a full train run takes well under a second.
json tiny_config(const fs::path& out) {
  const json enc{{"d_model", 8}, {"d_k", 8}, {"d_v", 8}, {"d_ffn", 16}, {"n_layers", 2}};
  return {{"seed", 3},
          {"output_dir", out.string()},
          {"encoder_m", enc},
          {"encoder_c", enc},
          {"adapter", {{"mode", "cola"}, {"rank", 2}, {"gamma", 4}, {"alpha", 4}}},
          {"train", {{"epochs", 2}, {"batch_size", 16}}},
          {"task", {{"vocab_size", 8}, {"tokens", 4}, {"n_train", 64}, {"n_val", 16}, {"n_test", 16}}}};
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("count reproduces the reference deltas") {
  const Result lora = run("count --preset vitb-bertb --mode lora --rank 54 --delta lora:16 --millions");
  CHECK(lora.code == 0);
  CHECK(lora.output.find("= 12607488 params = 12.607M") != std::string::npos);
  const Result cola = run("count --preset vitb-bertb --mode cola --rank 16 --delta lora:16");
  CHECK(cola.output.find("= 12517776 params = 12.518M") != std::string::npos);
  CHECK(cola.output.find("# resolved config") != std::string::npos);

  const fs::path dir = scratch("count");
  const Result js = run("count --mode fully_shared --json --out " + dir.string());
  CHECK(js.code == 0);
  const json params = json::parse(slurp(dir / "params.json"));
  CHECK(params.at("totals").at("adapter").get<long>() == 12517632);
}

TEST_CASE("configuration errors exit with 2") {
  const fs::path dir = scratch("errors");
  CHECK(run("count --preset vit-h").code == 2);
  CHECK(run("count --delta lora").code == 2);
  CHECK(run("train " + (dir / "missing.json").string()).code == 2);
  CHECK(run("frobnicate").code == 2);

  const fs::path syntax = write_config(dir, "syntax.json", "{\n  \"seed\": 1,\n  \"adapter\": {\"rank\": }\n}\n");
  const Result s = run("train " + syntax.string());
  CHECK(s.code == 2);
  CHECK(s.output.find("syntax.json:3:") != std::string::npos);

  const fs::path unknown = write_config(dir, "unknown.json", "{\n  \"seed\": 1,\n  \"adapter\": {\n    \"rnak\": 4\n  }\n}\n");
  const Result u = run("train " + unknown.string());
  CHECK(u.code == 2);
  CHECK(u.output.find("unknown.json:4") != std::string::npos);
  CHECK(u.output.find("adapter.rnak") != std::string::npos);

  const fs::path type = write_config(dir, "type.json", "{\"train\": {\"epochs\": \"many\"}}");
  CHECK(run("train " + type.string()).output.find("train.epochs") != std::string::npos);

  json big_rank = tiny_config(dir);
  big_rank["adapter"]["rank"] = 8;
  const fs::path bad = write_config(dir, "rank.json", big_rank.dump());
  CHECK(run("train " + bad.string()).code == 2);
}

TEST_CASE("a diverging run exits with 3") {
  const fs::path dir = scratch("nan");
  json c = tiny_config(dir / "out");
  c["train"]["lr_adapter"] = 1e200;
  c["train"]["lr_head"] = 1e200;
  c["train"]["weight_decay"] = 0.0;
  const Result r = run("train " + write_config(dir, "c.json", c.dump()).string());
  CHECK(r.code == 3);
  CHECK(r.output.find("non-finite") != std::string::npos);
}

TEST_CASE("gradcheck passes on the toy config and fails with exit 4 at an impossible tolerance") {
  const Result ok = run("gradcheck " + std::string(COLA_CONFIG_DIR) + "/gradcheck_toy.json");
  CHECK(ok.code == 0);
  CHECK(ok.output.find("hyper.ln_gain") != std::string::npos);

  const fs::path dir = scratch("gradcheck");
  json c = json::parse(slurp(fs::path(COLA_CONFIG_DIR) / "gradcheck_toy.json"), nullptr, true, true);
  c["gradcheck"]["tolerance"] = 1e-300;
  c["gradcheck"]["max_coords"] = 2;
  const Result bad = run("gradcheck " + write_config(dir, "c.json", c.dump()).string());
  CHECK(bad.code == 4);
  CHECK(bad.output.find("lambda") != std::string::npos);
}

TEST_CASE("train writes every artifact and reruns byte-identically") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_config(dir, "c.json", tiny_config(dir / "a").dump());
  const Result a = run("train " + cfg.string());
  REQUIRE(a.code == 0);
  const Result b = run("train " + cfg.string() + " --out " + (dir / "b").string());
  REQUIRE(b.code == 0);
  for (const char* f : {"metrics.json", "lambda_trace.csv", "checkpoint.json"}) {
    INFO(f);
    CHECK(fs::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  CHECK(fs::exists(dir / "a" / "timing.json"));

  const json metrics = json::parse(slurp(dir / "a" / "metrics.json"));
  CHECK(metrics.at("epochs").size() == 2);
  CHECK(metrics.contains("test_acc"));
  CHECK_FALSE(metrics.contains("wall_time_s"));

  const std::string csv = slurp(dir / "a" / "lambda_trace.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 2 * 6);

  // The echoed config reloads to the same configuration.
  const cola::ExperimentConfig echoed = cola::load_config((dir / "a" / "config.json").string());
  CHECK(cola::to_json(echoed) == json::parse(slurp(dir / "a" / "config.json")));
  CHECK(echoed.adapter.rank == 2);

  const Result seeded = run("train " + cfg.string() + " --seed 4 --out " + (dir / "c").string());
  CHECK(slurp(dir / "c" / "checkpoint.json") != slurp(dir / "a" / "checkpoint.json"));
  CHECK(seeded.output.find("\"seed\": 4") != std::string::npos);
}

TEST_CASE("ablation rows") {
  const fs::path dir = scratch("ablate");
  const fs::path cfg = write_config(dir, "c.json", tiny_config(dir / "out").dump());
  const Result sharing = run("ablate " + cfg.string() + " --axis sharing");
  REQUIRE(sharing.code == 0);
  const json sj = json::parse(slurp(dir / "out" / "ablation_sharing.json"));
  REQUIRE(sj.at("rows").size() == 4);
  CHECK(sj["rows"][0]["variant"] == "FullyShared");
  CHECK(sj["rows"][3]["variant"] == "NonShared");
  CHECK(sj["rows"][1]["adapter_params"] == sj["rows"][2]["adapter_params"]);
  CHECK(sj["rows"][0]["adapter_params"].get<long>() < sj["rows"][1]["adapter_params"].get<long>());
  CHECK(sj["rows"][1]["adapter_params"].get<long>() < sj["rows"][3]["adapter_params"].get<long>());
  CHECK(fs::exists(dir / "out" / "ablation_sharing.tsv"));

  const Result zero = run("ablate " + cfg.string() + " --axis propagation --lambda-zero");
  REQUIRE(zero.code == 0);
  const json pj = json::parse(slurp(dir / "out" / "ablation_propagation.json"));
  REQUIRE(pj.at("rows").size() == 3);
  CHECK(pj["rows"][0]["test_acc"] == pj["rows"][1]["test_acc"]);
  CHECK(pj["rows"][1]["test_acc"] == pj["rows"][2]["test_acc"]);
  CHECK(pj["lambda_zero"] == true);

  CHECK(run("ablate " + cfg.string() + " --axis depth").code == 2);
}

TEST_CASE("bench prints the analytic ratio and the wall-clock table") {
  const fs::path dir = scratch("bench");
  json c = tiny_config(dir / "out");
  c["bench"] = {{"repetitions", 2}, {"warmup", 0}, {"batch", 2}};
  const Result r = run("bench " + write_config(dir, "c.json", c.dump()).string());
  REQUIRE(r.code == 0);
  CHECK(r.output.find("CoLA / LoRA forward GFLOPs") != std::string::npos);
  const json flops = json::parse(slurp(dir / "out" / "flops.json"));
  const json bench = json::parse(slurp(dir / "out" / "bench.json"));
  CHECK(bench.at("rows").size() >= 3);
  CHECK_FALSE(flops.empty());
}

TEST_CASE("profile defaults sit under the file and the flags") {
  const fs::path dir = scratch("profile");
  json c = tiny_config(dir / "out");
  c["profile"] = "vl";
  c["train"]["epochs"] = 1;
  const cola::ExperimentConfig parsed = cola::parse_config(c.dump(), "inline");
  CHECK(parsed.train.epochs == 1);          // file beats profile
  CHECK(parsed.train.batch_size == 16);     // file beats profile
  CHECK(parsed.train.lr_adapter == 1e-4);   // profile beats default
  CHECK(parsed.adapter.lambda_init == 0.5);

  cola::ExperimentConfig av;
  cola::apply_profile(av, "av");
  CHECK(av.adapter.lambda_init == 0.1);
  CHECK(av.train.weight_decay == 0.0);
  CHECK(av.adapter.gamma == 16);
  CHECK_THROWS_AS(cola::apply_profile(av, "speech"), cola::ConfigError);

  const Result flag = run("train " + write_config(dir, "c.json", c.dump()).string() + " --lambda-init 0.25");
  CHECK(flag.code == 0);
  CHECK(flag.output.find("\"lambda_init\": 0.25") != std::string::npos);
}

TEST_CASE("config json round trip") {
  cola::ExperimentConfig c;
  c.seed = 17;
  c.adapter.rank = 3;
  c.strategy = cola::Strategy::ModuleWise;
  c.task.noise = 0.25;
  c.bench.gamma = 8;
  const json j = cola::to_json(c);
  CHECK(cola::to_json(cola::parse_config(j.dump(), "roundtrip")) == j);
  const cola::ExperimentConfig xor_cfg = cola::load_config(std::string(COLA_CONFIG_DIR) + "/xor.json");
  CHECK(xor_cfg.adapter.rank == 4);
  CHECK(xor_cfg.encoder_m.d_model == 32);
}
