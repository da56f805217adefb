#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "httplib.h"
#include "latref/base64.hpp"
#include "latref/errors.hpp"
#include "latref/gateway.hpp"
#include "test_util.hpp"

using namespace latref;
using namespace latref::gateway;
using nlohmann::json;
using testutil::random_matrix;

namespace {

ProbeConfig small_probe() {
  ProbeConfig c;
  c.d_in = 8;
  c.d_model = 4;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 8;
  c.swiglu_hidden = 8;
  c.max_len = 16;
  return c;
}

// LINEAR_PROBE with zero weights: p = sigmoid(bias) whatever the input.
ProbeModel constant_probe(double bias) {
  ProbeConfig c = small_probe();
  c.gate = GateVariant::LinearProbe;
  ProbeModel m(c, 1);
  m.parameter("head.weight").value.fill(0.0);
  m.parameter("head.bias").value(0, 0) = bias;
  return m;
}

LoadedProbe loaded(ProbeModel m) { return LoadedProbe{std::move(m), "test-model"}; }

}  // namespace

TEST(Decide, StrictThreshold) {
  EXPECT_EQ(decide(0.3, 0.5), Verdict::Refuse);
  EXPECT_EQ(decide(0.5, 0.5), Verdict::Answer);
  for (double tau : {0.1, 0.5, 0.9, 0.99}) EXPECT_EQ(decide(0.996, tau), Verdict::Answer);
  EXPECT_EQ(to_string(Verdict::Hallucination), "HALLUCINATION");
}

TEST(Gate, DecisionFollowsProbe) {
  std::mt19937_64 rng(1);
  const LoadedProbe refuse = loaded(constant_probe(std::log(0.3 / 0.7)));
  const auto d = gate(random_matrix(rng, 4, 8), refuse, 0.5);
  EXPECT_NEAR(d.answerable_prob, 0.3, 1e-12);
  EXPECT_EQ(d.verdict, Verdict::Refuse);
  EXPECT_EQ(d.threshold, 0.5);
  EXPECT_EQ(d.model_id, "test-model");
  EXPECT_GE(d.latency_ms, 0.0);
  const json j = d;
  EXPECT_EQ(j.at("verdict"), "REFUSE");
  EXPECT_EQ(j.size(), 5u);
}

TEST(Gate, DeterministicAndMatchesLoaderPath) {
  std::mt19937_64 rng(2);
  const LoadedProbe p = loaded(ProbeModel(small_probe(), 3));
  Matrix raw = random_matrix(rng, 5, 8, 4.0);
  raw(1, 1) = std::numeric_limits<double>::quiet_NaN();
  const auto a = gate(raw, p, 0.5);
  const auto b = gate(raw, p, 0.5);
  EXPECT_EQ(a.answerable_prob, b.answerable_prob);
  EXPECT_EQ(a.verdict, b.verdict);
  const Matrix safe = hsio::token_normalize(hsio::sanitize(raw));
  EXPECT_EQ(a.answerable_prob, probe_forward(p.model, safe).prob);
}

TEST(Gate, FromFile) {
  std::mt19937_64 rng(3);
  testutil::TempDir dir("gate");
  const Matrix raw = random_matrix(rng, 5, 8);
  hsio::write_tensor(dir.path() / "x.lrhs", raw);
  const LoadedProbe p = loaded(ProbeModel(small_probe(), 3));
  EXPECT_EQ(gate(dir.path() / "x.lrhs", p, 0.5).answerable_prob, gate(hsio::read_matrix(dir.path() / "x.lrhs"), p, 0.5).answerable_prob);
  EXPECT_THROW(gate(dir.path() / "missing.lrhs", p, 0.5), DataError);
}

TEST(Gate, Errors) {
  const LoadedProbe p = loaded(ProbeModel(small_probe(), 3));
  EXPECT_THROW(gate(Matrix(0, 8), p, 0.5), EmptySequenceError);
  EXPECT_THROW(gate(Matrix(3, 5), p, 0.5), ShapeError);
  EXPECT_THROW(gate(Matrix(17, 8), p, 0.5), LengthError);
  EXPECT_THROW(gate(Matrix(3, 8), p, 0.0), ConfigError);
  EXPECT_THROW(gate(Matrix(3, 8), p, 1.0), ConfigError);
}

TEST(Pipeline, StageOneRefusalNeverCallsTheHook) {
  int calls = 0;
  const GeneratorHook hook = [&](const Matrix& h) {
    ++calls;
    return Generation{"SELECT 1", Matrix(2, h.cols())};
  };
  const auto out = refusal_aware_pipeline(Matrix(3, 8, 1.0), constant_probe(-3.0), constant_probe(0.0), 0.5, 0.5, hook);
  EXPECT_EQ(out.verdict, Verdict::Refuse);
  EXPECT_EQ(calls, 0);
  EXPECT_FALSE(out.response);
  EXPECT_FALSE(out.hallucination_prob);
}

TEST(Pipeline, AnswerCarriesResponse) {
  int calls = 0;
  const GeneratorHook hook = [&](const Matrix& h) {
    ++calls;
    return Generation{"SELECT 1", Matrix(2, h.cols(), 0.5)};
  };
  const auto out = refusal_aware_pipeline(Matrix(3, 8, 1.0), constant_probe(3.0), constant_probe(-40.0), 0.5, 0.5, hook);
  EXPECT_EQ(out.verdict, Verdict::Answer);
  EXPECT_EQ(calls, 1);
  ASSERT_TRUE(out.response);
  EXPECT_EQ(*out.response, "SELECT 1");
  EXPECT_LT(*out.hallucination_prob, 1e-12);
}

TEST(Pipeline, HighHallucinationScoreWithholdsResponse) {
  const GeneratorHook hook = [](const Matrix& h) { return Generation{"SELECT 1", Matrix(2, h.cols())}; };
  const auto out = refusal_aware_pipeline(Matrix(3, 8, 1.0), constant_probe(3.0),
                                          constant_probe(std::log(0.9 / 0.1)), 0.5, 0.5, hook);
  EXPECT_EQ(out.verdict, Verdict::Hallucination);
  EXPECT_NEAR(*out.hallucination_prob, 0.9, 1e-12);
  EXPECT_FALSE(out.response);
}

TEST(Pipeline, HallucinationProbeSeesPromptAndGeneratedStates) {
  std::mt19937_64 rng(4);
  const Matrix prompt = random_matrix(rng, 3, 8);
  const Matrix gen = random_matrix(rng, 2, 8);
  ProbeConfig c = small_probe();
  c.gate = GateVariant::LinearProbe;
  const ProbeModel hal(c, 9);
  const auto out = refusal_aware_pipeline(prompt, constant_probe(3.0), hal, 0.5, 0.999,
                                          [&](const Matrix&) { return Generation{"x", gen}; });
  Matrix stacked(5, 8);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 8; ++j) stacked(r, j) = r < 3 ? prompt(r, j) : gen(r - 3, j);
  EXPECT_EQ(*out.hallucination_prob, probe_forward(hal, hsio::token_normalize(hsio::sanitize(stacked))).prob);
}

TEST(Pipeline, MissingHookIsAnError) {
  EXPECT_THROW(refusal_aware_pipeline(Matrix(3, 8, 1.0), constant_probe(3.0), constant_probe(0.0), 0.5, 0.5, {}),
               ConfigError);
  EXPECT_NO_THROW(refusal_aware_pipeline(Matrix(3, 8, 1.0), constant_probe(-3.0), constant_probe(0.0), 0.5, 0.5, {}));
}

TEST(Base64, KnownVectors) {
  const std::string text = "foobar";
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  EXPECT_EQ(base64::encode(bytes), "Zm9vYmFy");
  EXPECT_EQ(base64::encode(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 4)), "Zm9vYg==");
  EXPECT_EQ(base64::decode("Zm9vYg=="), std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 4));
  EXPECT_TRUE(base64::decode("").empty());
  EXPECT_THROW(base64::decode("Zm9vY"), DataError);
  EXPECT_THROW(base64::decode("!!!!"), DataError);
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> blob(1000);
  for (auto& b : blob) b = static_cast<std::uint8_t>(rng());
  EXPECT_EQ(base64::decode(base64::encode(blob)), blob);
}

TEST(HandleRequest, StatusMapping) {
  std::mt19937_64 rng(6);
  const LoadedProbe p = loaded(ProbeModel(small_probe(), 3));
  const auto ok = handle_gate_request(json{{"tensor_b64", base64::encode(hsio::encode_matrix(random_matrix(rng, 4, 8)))}}.dump(), p, 0.5);
  EXPECT_EQ(ok.status, 200);
  EXPECT_EQ(ok.body.size(), 4u);
  for (const char* k : {"answerable_prob", "verdict", "threshold", "latency_ms"}) EXPECT_TRUE(ok.body.contains(k)) << k;

  EXPECT_EQ(handle_gate_request("not json", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request("[1]", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request(R"({"tensor_b64": "@@@"})", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request(R"({"tensor_b64": 5})", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request(R"({"tensor_b64": "QUJDRA=="})", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request(R"({"tensor_path": "/nonexistent/x.lrhs"})", p, 0.5).status, 400);
  EXPECT_EQ(handle_gate_request(R"({})", p, 0.5).status, 400);
  const auto wide = json{{"tensor_b64", base64::encode(hsio::encode_matrix(Matrix(3, 5)))}}.dump();
  EXPECT_EQ(handle_gate_request(wide, p, 0.5).status, 400);
  const auto long_seq = json{{"tensor_b64", base64::encode(hsio::encode_matrix(Matrix(17, 8)))}}.dump();
  EXPECT_EQ(handle_gate_request(long_seq, p, 0.5).status, 413);
  const auto empty = json{{"tensor_b64", base64::encode(hsio::encode_matrix(Matrix(0, 8)))}}.dump();
  EXPECT_EQ(handle_gate_request(empty, p, 0.5).status, 400);
}

class Server : public ::testing::Test {
 protected:
  void SetUp() override {
    server = std::make_unique<GateServer>(loaded(ProbeModel(small_probe(), 3)), 0.5);
    port = server->bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    thread = std::thread([this] { server->listen_after_bind(); });
    server->wait_until_ready();
  }
  void TearDown() override {
    server->stop();
    if (thread.joinable()) thread.join();
  }

  std::unique_ptr<GateServer> server;
  int port = -1;
  std::thread thread;
};

TEST_F(Server, Healthz) {
  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j.at("status"), "ok");
  EXPECT_EQ(j.at("model_id"), "test-model");
}

TEST_F(Server, GateMatchesLibraryCall) {
  std::mt19937_64 rng(7);
  testutil::TempDir dir("srv");
  httplib::Client cli("127.0.0.1", port);
  const LoadedProbe p = loaded(ProbeModel(small_probe(), 3));
  for (int i = 0; i < 5; ++i) {
    const Matrix raw = random_matrix(rng, 3 + i, 8);
    const auto path = dir.path() / ("t" + std::to_string(i) + ".lrhs");
    hsio::write_tensor(path, raw);
    const auto expect = gate(path, p, 0.5);
    for (const json& body : {json{{"tensor_b64", base64::encode(hsio::encode_matrix(hsio::read_matrix(path)))}},
                             json{{"tensor_path", path.string()}}}) {
      const auto res = cli.Post("/gate", body.dump(), "application/json");
      ASSERT_TRUE(res);
      ASSERT_EQ(res->status, 200);
      const auto j = json::parse(res->body);
      EXPECT_EQ(j.at("answerable_prob").get<double>(), expect.answerable_prob);
      EXPECT_EQ(j.at("verdict"), to_string(expect.verdict));
      EXPECT_EQ(j.at("threshold").get<double>(), 0.5);
    }
  }
  EXPECT_EQ(server->requests_served(), 10u);
}

TEST_F(Server, GarbageIsRejected) {
  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Post("/gate", R"({"tensor_b64": "not base64!"})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_TRUE(json::parse(res->body).contains("error"));
  const auto big = cli.Post("/gate", json{{"tensor_b64", base64::encode(hsio::encode_matrix(Matrix(20, 8)))}}.dump(),
                            "application/json");
  ASSERT_TRUE(big);
  EXPECT_EQ(big->status, 413);
}

TEST_F(Server, ConcurrentClientsAgree) {
  std::mt19937_64 rng(8);
  const Matrix raw = random_matrix(rng, 6, 8);
  const std::string body = json{{"tensor_b64", base64::encode(hsio::encode_matrix(raw))}}.dump();
  std::vector<double> probs(8);
  std::vector<std::thread> clients;
  for (int i = 0; i < 8; ++i) {
    clients.emplace_back([&, i] {
      httplib::Client cli("127.0.0.1", port);
      const auto res = cli.Post("/gate", body, "application/json");
      probs[i] = res && res->status == 200 ? json::parse(res->body).at("answerable_prob").get<double>() : -1.0;
    });
  }
  for (auto& t : clients) t.join();
  for (double p : probs) EXPECT_EQ(p, probs[0]);
  EXPECT_GT(probs[0], 0.0);
}
