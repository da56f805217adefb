#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latref/hsio.hpp"
#include "latref/matrix.hpp"

// Synthetic hidden states with a planted answerability cue.
//
// Every token starts as N(0, noise^2) noise. k fixed token positions (drawn
// once per dataset) carry the cue along orthonormal, zero-mean directions:
//   LINEAR: unanswerable examples add s * u_(i mod m) at the i-th cue position.
//   XOR:    every example adds s * (a u_0 + b u_1) with a, b = +-1 at all cue
//           positions; answerable iff a * b = +1.
namespace latref::synth {

enum class InteractionMode { Linear, Xor };

std::string to_string(InteractionMode m);
InteractionMode parse_mode(const std::string& s);

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t num_examples = 200;
  std::size_t tokens = 32;  // T
  std::size_t d_in = 64;
  double noise_scale = 1.0;        // sigma_n
  std::size_t num_directions = 1;  // m (XOR uses 2 regardless)
  double signal_scale = 2.0;       // s
  std::size_t signal_positions = 4;  // k
  InteractionMode mode = InteractionMode::Linear;
  std::size_t layer_count = 1;
  std::size_t signal_layer = 0;  // absolute, 0-based; manifests store it as signal_layer - layer_count
  double train_fraction = 0.6;
  double dev_fraction = 0.2;
  std::string domain = "synthetic";
  hsio::DType dtype = hsio::DType::F32;

  void validate() const;
  std::size_t directions() const { return mode == InteractionMode::Xor ? 2 : num_directions; }
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SynthSample {
  hsio::LabeledExample meta;
  Matrix h;  // raw (pre-sanitize) hidden states, T x d_in
};

// Positions and directions shared by every example of a dataset.
struct Plant {
  std::vector<std::size_t> positions;  // sorted, size k
  std::vector<std::vector<double>> directions;
};

Plant make_plant(const SynthConfig& config);

// One sample per (example, layer), ordered by example then layer.
std::vector<SynthSample> generate(const SynthConfig& config);

// Writes tensors/, manifest.jsonl and synth_config.json under `dir`; returns
// the manifest path.
std::filesystem::path gen_synthetic(const SynthConfig& config, const std::filesystem::path& dir);

// In-memory equivalent of load_dataset over generate() output.
hsio::Dataset to_dataset(const std::vector<SynthSample>& samples, hsio::Split split,
                         std::optional<long> layer_index = std::nullopt);

struct OracleResult {
  double accuracy = 0.5;
  double standard_error = 0.0;  // 0 for closed forms
  double closed_form = 0.5;
  std::size_t draws = 0;  // Monte Carlo draws, 0 when unused
  std::string rule;
};

void to_json(nlohmann::json& j, const OracleResult& r);

// Accuracy of the Bayes-optimal rule on the signal layer.
// LINEAR: Phi(sqrt(k) s / (2 sigma)).
// XOR: Monte Carlo of sign(P0 * P1) with P_i the summed projections;
//      the closed form q^2 + (1-q)^2, q = Phi(sqrt(k) s / sigma), is reported alongside.
OracleResult bayes_oracle(const SynthConfig& config, std::size_t draws = 1'000'000);

double normal_cdf(double x);

}  // namespace latref::synth
