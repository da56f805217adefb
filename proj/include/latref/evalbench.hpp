#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latref/hsio.hpp"
#include "latref/metrics.hpp"
#include "latref/probe.hpp"
#include "latref/training.hpp"

namespace latref::evalbench {

struct LatencyReport {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t batch_size = 1;
  std::size_t warmup = 0;
  std::size_t iters = 0;
  std::size_t tokens = 0;
  std::size_t layers = 0;
  std::size_t threads = 1;
  std::string hardware;
  std::vector<double> samples_ms;
};

void to_json(nlohmann::json& j, const LatencyReport& r);

std::string hardware_descriptor();

// Times eval-mode probe_forward on a random T x d_in input, warmup excluded.
LatencyReport bench_latency(const ProbeModel& model, std::size_t tokens, std::size_t iters,
                            std::size_t warmup = 2, std::uint64_t seed = 0);

enum class Axis { GateVariant, LayerIndex, Depth, Loss, Dropout };

std::string to_string(Axis a);
Axis parse_axis(const std::string& s);

struct AblationRequest {
  Axis axis = Axis::GateVariant;
  ProbeConfig probe;
  TrainConfig train;
  std::filesystem::path manifest;
  // Layer used by every axis except LAYER_INDEX; unset keeps all entries.
  std::optional<long> layer_index;
  std::vector<long> layers = {-1, -2, -3};
  std::vector<std::size_t> depths = {1, 2, 4};
  // 0 disables the Time column.
  std::size_t latency_iters = 10;
};

struct AblationSetting {
  std::string label;
  ProbeConfig probe;
  TrainConfig train;
  std::optional<long> layer_index;
  // Reference numbers, rendered for comparison only.
  std::optional<double> reference_f1;
  std::optional<double> reference_aux;
};

std::vector<AblationSetting> ablation_settings(const AblationRequest& request);

struct AblationRow {
  std::string label;
  std::optional<long> layer_index;
  std::size_t params = 0;
  std::size_t layers = 0;
  std::size_t best_epoch = 0;
  double dev_f1 = 0.0;     // at the selected epoch, tau = 0.5
  MetricsReport metrics;   // held-out split, tau = 0.5
  std::optional<double> time_ms;
  std::optional<double> reference_f1;
  std::optional<double> reference_aux;
};

struct AblationTable {
  Axis axis = Axis::GateVariant;
  std::string eval_split;
  std::vector<AblationRow> rows;

  // Index of the row with the highest dev F1 when it is strictly the highest.
  std::optional<std::size_t> strict_best_by_dev_f1() const;
};

// Trains and evaluates every setting with the request's seed. Rows come out in
// setting order; the held-out split is test, or dev when test is empty.
AblationTable run_ablation(const AblationRequest& request);

nlohmann::json to_json(const AblationTable& t);
std::string to_text(const AblationTable& t);
std::string to_csv(const AblationTable& t);

}  // namespace latref::evalbench
