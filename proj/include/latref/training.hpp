#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "latref/hsio.hpp"
#include "latref/metrics.hpp"
#include "latref/probe.hpp"

namespace latref {

enum class LossKind { BCE, LabelSmooth, Focal };

struct LossSpec {
  LossKind kind = LossKind::BCE;
  double epsilon = 0.1;  // label smoothing
  double gamma = 2.0;    // focal
  double alpha = 1.0;    // focal

  void validate() const;
  std::string label() const;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  AdamWConfig optimizer;
  LossSpec loss;
  std::uint64_t seed = 0;
  // Optional per-epoch learning-rate multipliers; missing entries mean 1.
  std::vector<double> epoch_lr_scale;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossSpec& l);
void from_json(const nlohmann::json& j, LossSpec& l);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// --- Losses over probabilities. p is clamped to [1e-12, 1 - 1e-12]. ---
inline constexpr double kProbClamp = 1e-12;

double bce_loss(std::span<const double> p, std::span<const int> y);
// Symmetric two-class smoothing: y' = y(1 - eps) + eps/2.
double smoothed_target(int y, double epsilon);
double label_smoothed_bce_loss(std::span<const double> p, std::span<const int> y, double epsilon);
// -alpha (1 - p_t)^gamma log p_t, p_t = p if y = 1 else 1 - p.
double focal_loss(std::span<const double> p, std::span<const int> y, double gamma, double alpha = 1.0);

// d(loss)/d(logit) for plain BCE: sigmoid(s) - y.
double logit_gradient(double s, int y);

// Per-example loss recorded on the tape from a 1×1 logit, computed in logit
// space so it stays finite for saturated logits.
Var loss_from_logit(Var logit, int label, const LossSpec& loss);

class AdamW {
 public:
  AdamW(const AdamWConfig& config, const std::vector<Parameter>& params);

  // Decoupled weight decay; applied to every parameter.
  void step(std::vector<Parameter>& params, const std::vector<Matrix>& grads, double lr_scale = 1.0);
  std::size_t steps() const { return t_; }

 private:
  AdamWConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

// Runs one example forward and backward and adds scale * d(loss)/d(param)
// into `accum` (one matrix per parameter). Returns the example loss.
double accumulate_example_gradients(const ProbeModel& model, const hsio::Example& example,
                                    const LossSpec& loss, const DropoutContext& dropout,
                                    double scale, std::vector<Matrix>& accum);

std::vector<Matrix> zero_gradients(const ProbeModel& model);

// Answerability probabilities in dataset order.
std::vector<double> predict(const ProbeModel& model, const hsio::Dataset& data);
std::vector<int> labels_of(const hsio::Dataset& data);

inline constexpr double kSelectionThreshold = 0.5;

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double lr_scale = 1.0;
  double dev_f1 = 0.0;  // refusal-positive, tau = 0.5
  double dev_accuracy = 0.0;
  bool selected = false;  // became the running best
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct TrainResult {
  ProbeModel best_model;
  std::size_t best_epoch = 0;
  double best_f1 = 0.0;
  std::vector<EpochRecord> history;
};

// Trains with AdamW and keeps the parameters of the epoch with the highest
// dev F1 (strict improvement; the first epoch is always taken).
TrainResult train_probe(const hsio::Dataset& train, const hsio::Dataset& dev,
                        const ProbeConfig& probe_config, const TrainConfig& train_config);

enum class CalibrationObjective { MaxF1, RecallAtBoundedFpr };

struct GateConfig {
  double tau = 0.5;
  CalibrationObjective objective = CalibrationObjective::MaxF1;
  double target_recall = 0.95;      // refusal recall on unanswerable queries
  double max_false_refusal = 0.10;  // fraction of answerable queries refused
};

void to_json(nlohmann::json& j, const GateConfig& g);
void from_json(const nlohmann::json& j, GateConfig& g);

struct CalibrationResult {
  bool feasible = true;
  double tau = 0.5;
  std::string objective;
  double refusal_f1 = 0.0;
  double refusal_recall = 0.0;
  double false_refusal_rate = 0.0;
  std::string note;
};

void to_json(nlohmann::json& j, const CalibrationResult& c);

// Sorted candidates: midpoints between consecutive distinct scores, 0.5, and
// one threshold below / above every score (refuse nothing / everything), all
// restricted to the open interval (0, 1).
std::vector<double> candidate_thresholds(std::span<const double> scores);

// MAX_F1 maximizes refusal F1, ties going to the smallest tau.
// RECALL_AT_BOUNDED_FPR returns the smallest tau whose refusal recall meets the
// target; it is infeasible when that tau refuses too many answerable queries.
CalibrationResult calibrate_threshold(std::span<const double> scores, std::span<const int> labels,
                                      const GateConfig& config);
CalibrationResult calibrate_threshold(const ProbeModel& model, const hsio::Dataset& dev,
                                      const GateConfig& config);

struct DomainData {
  std::string name;
  hsio::Dataset train;
  hsio::Dataset dev;
  hsio::Dataset test;
};

struct DomainResult {
  std::string name;
  TrainResult training;
  double test_f1 = 0.0;
};

struct MultiDomainResult {
  std::vector<DomainResult> domains;
  // cross_f1(i, j): refusal F1 of domain i's probe on domain j's test split.
  Matrix cross_f1;
};

// One independent probe per domain.
MultiDomainResult multi_domain_train(std::span<const DomainData> domains,
                                     const ProbeConfig& probe_config, const TrainConfig& train_config);

// Writes <dir>/<domain>/checkpoint for every domain; returns the checkpoint dirs.
std::vector<std::filesystem::path> save_domain_checkpoints(const MultiDomainResult& result,
                                                           const std::filesystem::path& dir);

}  // namespace latref
