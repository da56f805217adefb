#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "json.hpp"

namespace latref {

// Which class counts as "positive". Refusal-positive treats unanswerable
// queries (label 0) as positives and a refusal (score < tau) as a positive
// prediction.
enum class Orientation { RefusalPositive, AnswerablePositive };

std::string to_string(Orientation o);

struct MetricsReport {
  Orientation orientation = Orientation::RefusalPositive;
  double threshold = 0.5;
  std::size_t n = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;  // absent when only one class is present
};

void to_json(nlohmann::json& j, const MetricsReport& r);

// `scores` are answerability probabilities; `labels` are 1 = answerable.
// Hard decision: refuse iff score < tau.
MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels,
                              double tau, Orientation orientation);

// Rank-statistic AUC with tied scores contributing 1/2.
std::optional<double> auc(std::span<const double> scores, std::span<const int> labels,
                          Orientation orientation);

// 2PR/(P+R), or 0 when P+R = 0.
double f1_score(double precision, double recall);

}  // namespace latref
