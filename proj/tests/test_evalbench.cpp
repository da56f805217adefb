#include <gtest/gtest.h>

#include <sstream>

#include "latref/errors.hpp"
#include "latref/evalbench.hpp"
#include "latref/synthlab.hpp"
#include "test_util.hpp"

using namespace latref;
using namespace latref::evalbench;

namespace {

ProbeConfig tiny_probe() {
  ProbeConfig c;
  c.d_in = 16;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 16;
  c.swiglu_hidden = 16;
  c.max_len = 8;
  c.dropout = 0.0;
  return c;
}

class Ablation : public ::testing::Test {
 protected:
  void SetUp() override {
    synth::SynthConfig c;
    c.seed = 2;
    c.num_examples = 80;
    c.tokens = 8;
    c.d_in = 16;
    c.signal_scale = 3.0;
    c.layer_count = 3;
    c.signal_layer = 1;
    manifest = synth::gen_synthetic(c, dir.path());
    req.probe = tiny_probe();
    req.train.epochs = 3;
    req.train.batch_size = 8;
    req.train.optimizer.lr = 3e-3;
    req.train.seed = 4;
    req.manifest = manifest;
    req.layer_index = -2;
    req.latency_iters = 0;
  }

  testutil::TempDir dir{"abl"};
  std::filesystem::path manifest;
  AblationRequest req;
};

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Axis, ParseAndPrint) {
  for (auto a : {Axis::GateVariant, Axis::LayerIndex, Axis::Depth, Axis::Loss, Axis::Dropout})
    EXPECT_EQ(parse_axis(to_string(a)), a);
  EXPECT_EQ(to_string(Axis::GateVariant), "GATE_VARIANT");
  EXPECT_THROW(parse_axis("WIDTH"), ConfigError);
}

TEST(Settings, GateVariantRowsFollowTheArchitectureTable) {
  AblationRequest r;
  const auto s = ablation_settings(r);
  ASSERT_EQ(s.size(), 6u);
  const std::vector<std::string> labels{"TRGE (Full)",     "w/o SwiGLU",     "SwiGLU -> MLP",
                                        "SwiGLU -> GLU",   "SwiGLU -> GeGLU", "Linear Probe"};
  const std::vector<GateVariant> gates{GateVariant::SwiGLU, GateVariant::None,  GateVariant::MLP,
                                       GateVariant::GLU,    GateVariant::GEGLU, GateVariant::LinearProbe};
  const std::vector<double> f1{87.1, 85.4, 83.0, 75.5, 85.1, 70.4};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(s[i].label, labels[i]);
    EXPECT_EQ(s[i].probe.gate, gates[i]);
    EXPECT_EQ(*s[i].reference_f1, f1[i]);
  }
}

TEST(Settings, OtherAxes) {
  AblationRequest r;
  r.axis = Axis::LayerIndex;
  r.layers = {-1, -16, -3};
  auto s = ablation_settings(r);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(*s[1].layer_index, -16);
  EXPECT_EQ(*s[1].reference_f1, 87.0);
  EXPECT_FALSE(s[2].reference_f1);

  r.axis = Axis::Depth;
  r.depths = {1, 2, 4};
  s = ablation_settings(r);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[2].probe.layers, 4u);
  EXPECT_EQ(*s[2].reference_f1, 87.09);
  EXPECT_EQ(*s[2].reference_aux, 2.60);

  r.axis = Axis::Loss;
  s = ablation_settings(r);
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].train.loss.kind, LossKind::LabelSmooth);
  EXPECT_EQ(s[0].train.loss.epsilon, 0.1);
  EXPECT_EQ(s[3].train.loss.gamma, 1.0);
  EXPECT_EQ(s[4].train.loss.kind, LossKind::BCE);

  r.axis = Axis::Dropout;
  s = ablation_settings(r);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[3].probe.dropout, 0.3);
  EXPECT_EQ(s[2].label, "Dropout = 0.2");

  r.axis = Axis::Depth;
  r.depths.clear();
  EXPECT_THROW(ablation_settings(r), ConfigError);
}

TEST_F(Ablation, DepthParamsAreMonotone) {
  req.axis = Axis::Depth;
  req.latency_iters = 10;
  const auto t = run_ablation(req);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_LT(t.rows[0].params, t.rows[1].params);
  EXPECT_LT(t.rows[1].params, t.rows[2].params);
  for (const auto& r : t.rows) {
    EXPECT_TRUE(r.time_ms);
    EXPECT_EQ(r.params, param_count(ablation_settings(req)[&r - t.rows.data()].probe));
  }
  EXPECT_EQ(t.eval_split, "test");
  const auto text = lines(to_text(t));
  ASSERT_EQ(text.size(), 5u);
  EXPECT_EQ(text[0].rfind("Layers", 0), 0u);
  for (const auto& l : text) EXPECT_EQ(l.size(), text[0].size());
  const auto csv = lines(to_csv(t));
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(csv[0], "Layers,Params,F1 (%),Time (ms),Ref F1 (%),Ref Time (ms)");
}

TEST_F(Ablation, LayerAxisFindsThePlantedLayer) {
  req.axis = Axis::LayerIndex;
  req.train.epochs = 4;
  const auto t = run_ablation(req);
  ASSERT_EQ(t.rows.size(), 3u);
  const auto best = t.strict_best_by_dev_f1();
  ASSERT_TRUE(best);
  EXPECT_EQ(t.rows[*best].label, "-2");
  EXPECT_FALSE(t.rows[0].time_ms);
}

TEST_F(Ablation, BitReproducible) {
  req.axis = Axis::Loss;
  req.train.epochs = 2;
  const auto a = to_json(run_ablation(req));
  const auto b = to_json(run_ablation(req));
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a.at("rows").size(), 5u);
}

TEST_F(Ablation, UnknownLayerYieldsError) {
  req.axis = Axis::LayerIndex;
  req.layers = {-7};
  EXPECT_THROW(run_ablation(req), DataError);
}

TEST(StrictBest, TiesHaveNoWinner) {
  AblationTable t;
  t.rows.resize(3);
  t.rows[0].dev_f1 = 0.8;
  t.rows[1].dev_f1 = 0.9;
  t.rows[2].dev_f1 = 0.7;
  EXPECT_EQ(*t.strict_best_by_dev_f1(), 1u);
  t.rows[2].dev_f1 = 0.9;
  EXPECT_FALSE(t.strict_best_by_dev_f1());
  EXPECT_FALSE(AblationTable{}.strict_best_by_dev_f1());
}

TEST(CsvQuoting, CommasAndQuotes) {
  AblationTable t;
  t.axis = Axis::Loss;
  AblationRow r;
  r.label = "Focal (\"g\", 2)";
  t.rows.push_back(r);
  const auto csv = lines(to_csv(t));
  EXPECT_EQ(csv[1].rfind("\"Focal (\"\"g\"\", 2)\"", 0), 0u);
}

TEST(Latency, ReportShape) {
  ProbeModel m(tiny_probe(), 1);
  const auto r = bench_latency(m, 8, 12, 2);
  EXPECT_EQ(r.iters, 12u);
  EXPECT_EQ(r.warmup, 2u);
  EXPECT_EQ(r.batch_size, 1u);
  EXPECT_EQ(r.samples_ms.size(), 12u);
  EXPECT_EQ(r.tokens, 8u);
  EXPECT_GE(r.p95_ms, r.median_ms);
  EXPECT_GT(r.median_ms, 0.0);
  EXPECT_FALSE(r.hardware.empty());
  const nlohmann::json j = r;
  for (const char* k : {"mean_ms", "median_ms", "p95_ms", "batch_size", "warmup", "iters", "hardware"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_THROW(bench_latency(m, 8, 9), ConfigError);
}

TEST(Latency, RepeatedRunsAreStable) {
  ProbeConfig c = tiny_probe();
  c.d_model = 64;
  c.heads = 4;
  c.ffn_dim = 128;
  c.swiglu_hidden = 128;
  c.max_len = 64;
  ProbeModel m(c, 1);
  const auto a = bench_latency(m, 64, 30, 3);
  const auto b = bench_latency(m, 64, 30, 3);
  EXPECT_LT(std::abs(a.median_ms - b.median_ms), 0.5 * std::max(a.median_ms, b.median_ms));
}
