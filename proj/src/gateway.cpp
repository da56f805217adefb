#include "latref/gateway.hpp"

#include <chrono>

#include "httplib.h"
#include "latref/base64.hpp"
#include "latref/errors.hpp"

namespace latref::gateway {

using json = nlohmann::json;

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Answer: return "ANSWER";
    case Verdict::Refuse: return "REFUSE";
    case Verdict::Hallucination: return "HALLUCINATION";
  }
  return "REFUSE";
}

Verdict decide(double answerable_prob, double tau) {
  return answerable_prob < tau ? Verdict::Refuse : Verdict::Answer;
}

void to_json(json& j, const GateDecision& d) {
  j = json{{"answerable_prob", d.answerable_prob},
           {"verdict", to_string(d.verdict)},
           {"threshold", d.threshold},
           {"latency_ms", d.latency_ms},
           {"model_id", d.model_id}};
}

LoadedProbe load_probe(const std::filesystem::path& checkpoint_dir) {
  return LoadedProbe{load_checkpoint(checkpoint_dir), checkpoint_model_id(checkpoint_dir)};
}

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
}

Matrix prepare(const Matrix& raw, const hsio::SanitizeConfig& sanitize) {
  if (raw.rows() == 0) throw EmptySequenceError("hidden-state tensor has no tokens");
  return hsio::token_normalize(hsio::sanitize(raw, sanitize));
}

double score(const ProbeModel& model, const Matrix& raw, const hsio::SanitizeConfig& sanitize = {}) {
  const Matrix h = prepare(raw, sanitize);
  const PadMask mask(h.rows(), 0);
  return probe_forward(model, h, mask).prob;
}

}  // namespace

GateDecision gate(const Matrix& raw, const LoadedProbe& probe, double tau,
                  const hsio::SanitizeConfig& sanitize) {
  check_tau(tau);
  const auto t0 = std::chrono::steady_clock::now();
  GateDecision d;
  d.answerable_prob = score(probe.model, raw, sanitize);
  const auto t1 = std::chrono::steady_clock::now();
  d.threshold = tau;
  d.verdict = decide(d.answerable_prob, tau);
  d.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  d.model_id = probe.model_id;
  return d;
}

GateDecision gate(const std::filesystem::path& hidden_state_file, const LoadedProbe& probe, double tau,
                  const hsio::SanitizeConfig& sanitize) {
  return gate(hsio::read_matrix(hidden_state_file), probe, tau, sanitize);
}

PipelineOutcome refusal_aware_pipeline(const Matrix& prompt_hidden, const ProbeModel& refusal_probe,
                                       const ProbeModel& hallucination_probe, double tau_r, double tau_h,
                                       const GeneratorHook& hook) {
  check_tau(tau_r);
  check_tau(tau_h);
  PipelineOutcome out;
  out.answerable_prob = score(refusal_probe, prompt_hidden);
  if (decide(out.answerable_prob, tau_r) == Verdict::Refuse) {
    out.verdict = Verdict::Refuse;
    return out;
  }
  if (!hook) throw ConfigError("refusal-aware pipeline passed stage 1 but no generator hook is set");

  Generation gen = hook(prompt_hidden);
  if (gen.post_hidden.rows() > 0 && gen.post_hidden.cols() != prompt_hidden.cols()) {
    throw ShapeError("generated hidden states have width " + std::to_string(gen.post_hidden.cols()) +
                     ", prompt has " + std::to_string(prompt_hidden.cols()));
  }
  Matrix stacked(prompt_hidden.rows() + gen.post_hidden.rows(), prompt_hidden.cols());
  auto dst = stacked.data();
  std::copy(prompt_hidden.data().begin(), prompt_hidden.data().end(), dst.begin());
  std::copy(gen.post_hidden.data().begin(), gen.post_hidden.data().end(),
            dst.begin() + static_cast<std::ptrdiff_t>(prompt_hidden.data().size()));

  const double p_hal = score(hallucination_probe, stacked);
  out.hallucination_prob = p_hal;
  if (p_hal > tau_h) {
    out.verdict = Verdict::Hallucination;
    return out;
  }
  out.verdict = Verdict::Answer;
  out.response = std::move(gen.response);
  return out;
}

GateResponse handle_gate_request(const std::string& body, const LoadedProbe& probe, double tau) {
  auto error = [](int status, const std::string& message) {
    return GateResponse{status, json{{"error", message}}};
  };
  try {
    const json req = json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (req.is_discarded() || !req.is_object()) return error(400, "body must be a JSON object");
    Matrix raw;
    if (auto it = req.find("tensor_b64"); it != req.end()) {
      if (!it->is_string()) return error(400, "tensor_b64 must be a string");
      const auto bytes = base64::decode(it->get<std::string>());
      raw = hsio::decode_matrix(bytes);
    } else if (auto p = req.find("tensor_path"); p != req.end()) {
      if (!p->is_string()) return error(400, "tensor_path must be a string");
      const std::filesystem::path path = p->get<std::string>();
      if (!std::filesystem::is_regular_file(path)) return error(400, "tensor_path is not a readable file");
      raw = hsio::read_matrix(path);
    } else {
      return error(400, "expected tensor_b64 or tensor_path");
    }
    const GateDecision d = gate(raw, probe, tau);
    return GateResponse{200, json{{"answerable_prob", d.answerable_prob},
                                  {"verdict", to_string(d.verdict)},
                                  {"threshold", d.threshold},
                                  {"latency_ms", d.latency_ms}}};
  } catch (const LengthError& e) {
    return error(413, e.what());
  } catch (const DataError& e) {
    return error(400, e.what());
  } catch (const ShapeError& e) {
    return error(400, e.what());
  } catch (...) {
    return error(500, "internal error");
  }
}

struct GateServer::Impl {
  Impl(LoadedProbe p, double t) : probe(std::move(p)), tau(t) {}
  LoadedProbe probe;
  double tau;
  httplib::Server server;
};

GateServer::GateServer(LoadedProbe probe, double tau)
    : impl_(std::make_unique<Impl>(std::move(probe), tau)) {
  check_tau(tau);
  Impl* impl = impl_.get();
  impl->server.Get("/healthz", [impl](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"status", "ok"}, {"model_id", impl->probe.model_id}}.dump(), "application/json");
  });
  impl->server.Post("/gate", [this, impl](const httplib::Request& req, httplib::Response& res) {
    const GateResponse r = handle_gate_request(req.body, impl->probe, impl->tau);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
    ++served_;
  });
  impl->server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    res.status = 500;
    res.set_content(json{{"error", "internal error"}}.dump(), "application/json");
  });
}

GateServer::~GateServer() { stop(); }

bool GateServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int GateServer::bind_to_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool GateServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void GateServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

void GateServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace latref::gateway
