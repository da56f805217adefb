#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "latref/hsio.hpp"
#include "latref/matrix.hpp"
#include "latref/probe.hpp"

namespace latref::gateway {

enum class Verdict { Answer, Refuse, Hallucination };

std::string to_string(Verdict v);

// REFUSE iff p < tau. p == tau answers.
Verdict decide(double answerable_prob, double tau);

struct GateDecision {
  double answerable_prob = 0.5;
  double threshold = 0.5;
  Verdict verdict = Verdict::Answer;
  double latency_ms = 0.0;
  std::string model_id;
};

// Keys: answerable_prob, verdict, threshold, latency_ms, model_id.
void to_json(nlohmann::json& j, const GateDecision& d);

struct LoadedProbe {
  ProbeModel model;
  std::string model_id;
};

LoadedProbe load_probe(const std::filesystem::path& checkpoint_dir);

// `raw` is the stored hidden-state matrix; it goes through the same
// sanitize -> token-normalize path as training data before the forward pass.
GateDecision gate(const Matrix& raw, const LoadedProbe& probe, double tau,
                  const hsio::SanitizeConfig& sanitize = {});
GateDecision gate(const std::filesystem::path& hidden_state_file, const LoadedProbe& probe, double tau,
                  const hsio::SanitizeConfig& sanitize = {});

struct Generation {
  std::string response;
  Matrix post_hidden;  // hidden states over the generated tokens
};

using GeneratorHook = std::function<Generation(const Matrix& prompt_hidden)>;

struct PipelineOutcome {
  Verdict verdict = Verdict::Refuse;
  double answerable_prob = 0.0;
  std::optional<double> hallucination_prob;
  std::optional<std::string> response;  // only set for ANSWER
};

// Stage 1 refuses when p_ans < tau_r without touching the hook. Otherwise the
// hook generates, the hallucination probe scores the prompt and generated
// states stacked along the token axis, and p_hal > tau_h flags HALLUCINATION.
PipelineOutcome refusal_aware_pipeline(const Matrix& prompt_hidden, const ProbeModel& refusal_probe,
                                       const ProbeModel& hallucination_probe, double tau_r, double tau_h,
                                       const GeneratorHook& hook);

// HTTP service over a single immutable probe:
//   GET  /healthz -> {"status": "ok", "model_id": ...}
//   POST /gate    {"tensor_b64": ...} or {"tensor_path": ...}
//              -> {"answerable_prob", "verdict", "threshold", "latency_ms"}
class GateServer {
 public:
  GateServer(LoadedProbe probe, double tau);
  ~GateServer();
  GateServer(const GateServer&) = delete;
  GateServer& operator=(const GateServer&) = delete;

  // Blocking.
  bool listen(const std::string& host, int port);
  // Binds an ephemeral port and returns it (or -1); follow with listen_after_bind.
  int bind_to_any_port(const std::string& host);
  bool listen_after_bind();
  void wait_until_ready() const;
  void stop();

  std::size_t requests_served() const { return served_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::atomic<std::size_t> served_{0};
};

// Handles one /gate body; exposed so the HTTP mapping is testable without sockets.
struct GateResponse {
  int status = 200;
  nlohmann::json body;
};

GateResponse handle_gate_request(const std::string& body, const LoadedProbe& probe, double tau);

}  // namespace latref::gateway
