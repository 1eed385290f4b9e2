#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>

#include "cola/dual_encoder.hpp"
#include "cola/random.hpp"
#include "oracles.hpp"

using namespace cola;

namespace {

constexpr Strategy kStrategies[] = {Strategy::Uniform, Strategy::ModuleWise, Strategy::Progressive};

EncoderConfig enc(std::size_t d, bool pre_norm = true, Pooling pooling = Pooling::Mean) {
  EncoderConfig e = EncoderConfig::square(d, 2);
  e.d_ffn = 2 * d;
  e.pre_norm = pre_norm;
  e.pooling = pooling;
  return e;
}

AdapterConfig adapters(AdapterMode mode = AdapterMode::CoLA) {
  AdapterConfig c;
  c.rank = 2;
  c.gamma = 2;
  c.mode = mode;
  return c;
}

DualEncoderModel model(Strategy s, std::uint64_t seed, bool pre_norm = true, AdapterMode mode = AdapterMode::CoLA) {
  // Different widths and poolings on the two sides catch swapped directions.
  DualEncoderModel m = init_dual_encoder(enc(6, pre_norm, Pooling::Mean), enc(4, pre_norm, Pooling::CLS),
                                         adapters(mode), adapters(mode), s, seed);
  oracle::scramble(m, derive_seed(seed, "scramble"));
  return m;
}

struct Inputs {
  Tensor xm, xc;
};

Inputs inputs(std::uint64_t seed, std::size_t nm = 5, std::size_t nc = 3) {
  Rng rng(seed);
  return {rng.normal_tensor({nm, 6}, 1.0), rng.normal_tensor({nc, 4}, 1.0)};
}

}  // namespace

TEST_CASE("zero lambda reduces to two independent unimodal forwards") {
  for (Strategy s : kStrategies) {
    DualEncoderModel m = model(s, 1);
    m.set_all_lambda(0.0);
    const Inputs in = inputs(2);
    const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
    CHECK(ym.values() == unimodal_forward(m, Side::M, in.xm).values());
    CHECK(yc.values() == unimodal_forward(m, Side::C, in.xc).values());
  }
}

TEST_CASE("a freshly initialized model equals its frozen backbone") {
  for (Strategy s : kStrategies) {
    const DualEncoderModel m = init_dual_encoder(enc(6), enc(4), adapters(), adapters(), s, 3);
    const DualEncoderModel backbone = m.frozen_backbone();
    CHECK_FALSE(backbone.enc_m.has_cross());
    CHECK(backbone.adapter_parameter_count() == 0u);
    const Inputs in = inputs(4);
    const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
    const auto [bm, bc] = dual_forward(backbone, in.xm, in.xc);
    CHECK(oracle::rel_error(ym.values(), bm.values()) < 1e-14);
    CHECK(oracle::rel_error(yc.values(), bc.values()) < 1e-14);
    CHECK(m.enc_m.layers[0].wq.w0.same_storage(backbone.enc_m.layers[0].wq.w0));
  }
}

TEST_CASE("dual forward matches the written-out schedule for every strategy") {
  for (Strategy s : kStrategies)
    for (bool pre : {true, false})
      for (std::uint64_t seed = 5; seed < 8; ++seed) {
        const DualEncoderModel m = model(s, seed, pre);
        const Inputs in = inputs(seed + 100);
        const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
        const auto [rm, rc] = oracle::dual(m, oracle::from(in.xm), oracle::from(in.xc));
        INFO(to_string(s) << " pre_norm " << pre << " seed " << seed);
        CHECK(oracle::rel_error(ym.values(), rm.v) < 1e-10);
        CHECK(oracle::rel_error(yc.values(), rc.v) < 1e-10);
      }
}

TEST_CASE("strategies differ once adapters are active") {
  const DualEncoderModel m = model(Strategy::Progressive, 9);
  const Inputs in = inputs(10);
  const StrategyOutputs out = strategy_compare(m, in.xm, in.xc);
  CHECK(oracle::max_abs_diff(out.uniform.first.values(), out.module_wise.first.values()) > 1e-8);
  CHECK(oracle::max_abs_diff(out.module_wise.first.values(), out.progressive.first.values()) > 1e-8);
  CHECK(out.progressive.first.values() == dual_forward(m, in.xm, in.xc).first.values());

  DualEncoderModel off = m;
  off.set_all_lambda(0.0);
  const StrategyOutputs same = strategy_compare(off, in.xm, in.xc);
  CHECK(same.uniform.first.values() == same.progressive.first.values());
  CHECK(same.module_wise.second.values() == same.progressive.second.values());
}

TEST_CASE("unimodal forward refuses an encoder with live cross-modal pathways") {
  const DualEncoderModel m = model(Strategy::Progressive, 11);
  const Inputs in = inputs(12);
  CHECK_THROWS_AS(unimodal_forward(m, Side::M, in.xm), UsageError);
  CHECK_THROWS_AS(unimodal_forward(m.frozen_backbone(), Side::M, in.xc), ShapeError);
  CHECK_THROWS_AS(dual_forward(m, in.xc, in.xm), ShapeError);
  CHECK_THROWS_AS(dual_forward(m, Tensor::zeros({2, 3, 6}), Tensor::zeros({3, 3, 4})), ShapeError);
  CHECK_THROWS_AS(init_dual_encoder(enc(6), EncoderConfig::square(4, 3), adapters(), adapters(), Strategy::Uniform, 0),
                  ConfigError);
}

TEST_CASE("pool hooks follow the stage order of each strategy") {
  const std::map<Strategy, std::vector<std::string>> expected{
      {Strategy::Uniform, {"x", "x", "x"}},
      {Strategy::ModuleWise, {"x", "x", "o"}},
      {Strategy::Progressive, {"x", "a", "o"}},
  };
  for (Strategy s : kStrategies) {
    DualEncoderModel m = model(s, 13);
    std::vector<PoolEvent> events;
    m.hook = [&](const PoolEvent& e) { events.push_back(e); };
    const Inputs in = inputs(14);
    dual_forward(m, in.xm, in.xc);
    REQUIRE(events.size() == 2 * 3 * 2);
    std::size_t i = 0;
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t stage = 0; stage < 3; ++stage)
        for (Side consumer : {Side::M, Side::C}) {
          const PoolEvent& e = events[i++];
          CHECK(e.layer == l);
          CHECK(static_cast<std::size_t>(e.stage) == stage);
          CHECK(e.consumer == consumer);
          CHECK(e.source == expected.at(s)[stage]);
          // m reads pooled c features (width 4), c reads pooled m (width 6).
          CHECK(e.pooled.shape() == Shape{consumer == Side::M ? 4u : 6u});
        }
  }
}

TEST_CASE("swapping the roles of the encoders swaps the outputs") {
  for (Strategy s : kStrategies) {
    const DualEncoderModel m = model(s, 15);
    DualEncoderModel swapped = m;
    std::swap(swapped.enc_m, swapped.enc_c);
    const Inputs in = inputs(16);
    const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
    const auto [sm, sc] = dual_forward(swapped, in.xc, in.xm);
    CHECK(ym.values() == sc.values());
    CHECK(yc.values() == sm.values());
  }
}

TEST_CASE("gating one direction leaves the other unaffected") {
  for (Strategy s : kStrategies) {
    DualEncoderModel m = model(s, 17);
    const Inputs in = inputs(18);
    const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
    m.set_lambda(Side::M, 0.0);
    const auto [gm, gc] = dual_forward(m, in.xm, in.xc);
    // m no longer listens to c, so it runs unimodally ...
    CHECK(gm.values() == unimodal_forward(m, Side::M, in.xm).values());
    CHECK(oracle::max_abs_diff(gm.values(), ym.values()) > 1e-8);
    // ... while c still sees m, whose features changed.
    CHECK(oracle::max_abs_diff(gc.values(), yc.values()) > 1e-8);
    // Perturbing x_c cannot reach y_m any more.
    Inputs other = in;
    other.xc = Rng(19).normal_tensor({3, 4}, 1.0);
    CHECK(dual_forward(m, other.xm, other.xc).first.values() == gm.values());
  }
}

TEST_CASE("batched forward equals per-example forwards") {
  for (Strategy s : kStrategies) {
    const DualEncoderModel m = model(s, 20);
    Rng rng(21);
    const Tensor xm = rng.normal_tensor({3, 5, 6}, 1.0);
    const Tensor xc = rng.normal_tensor({3, 2, 4}, 1.0);
    const auto [ym, yc] = dual_forward(m, xm, xc);
    for (std::size_t b = 0; b < 3; ++b) {
      const auto [sm, sc] =
          dual_forward(m, Tensor::from({5, 6}, oracle::slice(xm, b).v), Tensor::from({2, 4}, oracle::slice(xc, b).v));
      CHECK(oracle::max_abs_diff(oracle::slice(ym, b).v, sm.values()) < 1e-13);
      CHECK(oracle::max_abs_diff(oracle::slice(yc, b).v, sc.values()) < 1e-13);
    }
  }
}

TEST_CASE("every adapter tensor receives a gradient through the dual forward") {
  for (AdapterMode mode : {AdapterMode::CoLA, AdapterMode::SharedA, AdapterMode::SharedB, AdapterMode::FullyShared}) {
    const DualEncoderModel m = model(Strategy::Progressive, 22, true, mode);
    const Inputs in = inputs(23);
    const auto [ym, yc] = dual_forward(m, in.xm, in.xc);
    backward(add(sum(mul(ym, ym)), sum(yc)));
    for (const Encoder* e : {&m.enc_m, &m.enc_c})
      for (const auto& layer : e->layers)
        for (Component c : kComponents)
          for (const auto& p : layer.component(c).parameters()) {
            INFO(to_string(mode) << " " << to_string(c) << " " << p.path << "/" << p.tensor);
            CHECK(p.value.has_grad());
          }
  }
}

TEST_CASE("strategy names") {
  for (Strategy s : kStrategies) CHECK(strategy_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(strategy_from_string("bottom_up"), ConfigError);
}
