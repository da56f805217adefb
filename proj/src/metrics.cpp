#include "latref/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "latref/errors.hpp"

namespace latref {

std::string to_string(Orientation o) {
  return o == Orientation::RefusalPositive ? "refusal_positive" : "answerable_positive";
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"orientation", to_string(r.orientation)},
                     {"threshold", r.threshold},
                     {"n", r.n},
                     {"tp", r.tp},
                     {"fp", r.fp},
                     {"tn", r.tn},
                     {"fn", r.fn},
                     {"accuracy", r.accuracy},
                     {"precision", r.precision},
                     {"recall", r.recall},
                     {"f1", r.f1}};
  j["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
}

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  if (scores.empty()) throw DataError("metrics need at least one example");
  for (int y : labels)
    if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
}

}  // namespace

std::optional<double> auc(std::span<const double> scores, std::span<const int> labels,
                          Orientation orientation) {
  check_inputs(scores, labels);
  const bool refusal = orientation == Orientation::RefusalPositive;
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items(scores.size());
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool positive = refusal ? labels[i] == 0 : labels[i] == 1;
    // Refusal-positive ranks by -score: lower answerability means more likely unanswerable.
    items[i] = {refusal ? -scores[i] : scores[i], positive};
    pos += positive;
  }
  const std::uint64_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  std::uint64_t concordant = 0;
  std::uint64_t ties = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < items.size() && items[j].score == items[i].score) {
      (items[j].positive ? p : n) += 1;
      ++j;
    }
    concordant += p * neg_below;
    ties += p * n;
    neg_below += n;
    i = j;
  }
  return static_cast<double>(2 * concordant + ties) / static_cast<double>(2 * pos * neg);
}

MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels,
                              double tau, Orientation orientation) {
  check_inputs(scores, labels);
  MetricsReport r;
  r.orientation = orientation;
  r.threshold = tau;
  r.n = scores.size();
  const bool refusal = orientation == Orientation::RefusalPositive;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool refuse = scores[i] < tau;
    const bool predicted = refusal ? refuse : !refuse;
    const bool actual = refusal ? labels[i] == 0 : labels[i] == 1;
    if (predicted && actual) ++r.tp;
    else if (predicted) ++r.fp;
    else if (actual) ++r.fn;
    else ++r.tn;
  }
  const auto d = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  r.accuracy = d(r.tp + r.tn, r.n);
  r.precision = d(r.tp, r.tp + r.fp);
  r.recall = d(r.tp, r.tp + r.fn);
  r.f1 = f1_score(r.precision, r.recall);
  r.auc = auc(scores, labels, orientation);
  return r;
}

}  // namespace latref
