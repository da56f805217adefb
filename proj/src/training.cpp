#include "latref/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "latref/errors.hpp"
#include "latref/kernels.hpp"

namespace latref {

using json = nlohmann::json;

void LossSpec::validate() const {
  if (epsilon < 0.0 || epsilon >= 0.5) throw ConfigError("label smoothing epsilon must lie in [0, 0.5)");
  if (gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("focal alpha must be > 0");
}

std::string LossSpec::label() const {
  char buf[64];
  switch (kind) {
    case LossKind::BCE: return "BCE Loss";
    case LossKind::LabelSmooth:
      std::snprintf(buf, sizeof buf, "Label Smoothing (eps=%g)", epsilon);
      return buf;
    case LossKind::Focal:
      std::snprintf(buf, sizeof buf, "Focal Loss (gamma=%g)", gamma);
      return buf;
  }
  return "BCE Loss";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
  loss.validate();
}

void to_json(json& j, const LossSpec& l) {
  static const char* names[] = {"BCE", "LABEL_SMOOTH", "FOCAL"};
  j = json{{"kind", names[static_cast<int>(l.kind)]},
           {"epsilon", l.epsilon},
           {"gamma", l.gamma},
           {"alpha", l.alpha}};
}

void from_json(const json& j, LossSpec& l) {
  const std::string kind = j.value("kind", std::string("BCE"));
  if (kind == "BCE") l.kind = LossKind::BCE;
  else if (kind == "LABEL_SMOOTH") l.kind = LossKind::LabelSmooth;
  else if (kind == "FOCAL") l.kind = LossKind::Focal;
  else throw ConfigError("unknown loss kind '" + kind + "'");
  l.epsilon = j.value("epsilon", 0.1);
  l.gamma = j.value("gamma", 2.0);
  l.alpha = j.value("alpha", 1.0);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.optimizer.lr},
           {"beta1", c.optimizer.beta1},
           {"beta2", c.optimizer.beta2},
           {"weight_decay", c.optimizer.weight_decay},
           {"adam_eps", c.optimizer.eps},
           {"loss", c.loss},
           {"seed", c.seed},
           {"epoch_lr_scale", c.epoch_lr_scale}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.optimizer.lr = j.value("lr", d.optimizer.lr);
  c.optimizer.beta1 = j.value("beta1", d.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", d.optimizer.beta2);
  c.optimizer.weight_decay = j.value("weight_decay", d.optimizer.weight_decay);
  c.optimizer.eps = j.value("adam_eps", d.optimizer.eps);
  c.loss = j.contains("loss") ? j.at("loss").get<LossSpec>() : LossSpec{};
  c.seed = j.value("seed", d.seed);
  c.epoch_lr_scale = j.value("epoch_lr_scale", std::vector<double>{});
}

namespace {

void check_batch(std::span<const double> p, std::span<const int> y) {
  if (p.empty()) throw DataError("loss over an empty batch");
  if (p.size() != y.size()) throw ShapeError("probabilities and labels differ in length");
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double soft_bce(std::span<const double> p, std::span<const int> y, double epsilon) {
  check_batch(p, y);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i]);
    const double t = smoothed_target(y[i], epsilon);
    total += t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
  }
  return -total / static_cast<double>(p.size());
}

}  // namespace

double smoothed_target(int y, double epsilon) { return y * (1.0 - epsilon) + epsilon / 2.0; }

double bce_loss(std::span<const double> p, std::span<const int> y) { return soft_bce(p, y, 0.0); }

double label_smoothed_bce_loss(std::span<const double> p, std::span<const int> y, double epsilon) {
  return soft_bce(p, y, epsilon);
}

double focal_loss(std::span<const double> p, std::span<const int> y, double gamma, double alpha) {
  check_batch(p, y);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i]);
    const double pt = y[i] == 1 ? q : 1.0 - q;
    total += -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  return total / static_cast<double>(p.size());
}

double logit_gradient(double s, int y) { return kernels::sigmoid(s) - y; }

Var loss_from_logit(Var logit, int label, const LossSpec& loss) {
  if (logit.value().size() != 1) throw ShapeError("loss_from_logit expects a 1x1 logit");
  const double s = logit.value()(0, 0);
  double value = 0.0;
  double dlds = 0.0;
  if (loss.kind == LossKind::Focal) {
    // p_t = sigmoid(sign * s); d/ds = sign * alpha (1-p_t)^gamma (gamma p_t log p_t - (1-p_t)).
    const double sign = label == 1 ? 1.0 : -1.0;
    const double pt = kernels::sigmoid(sign * s);
    const double log_pt = -kernels::softplus(-sign * s);
    const double w = std::pow(1.0 - pt, loss.gamma);
    value = -loss.alpha * w * log_pt;
    dlds = sign * loss.alpha * w * (loss.gamma * pt * log_pt - (1.0 - pt));
  } else {
    // -(t log sigmoid(s) + (1-t) log(1 - sigmoid(s))) = softplus(s) - t s.
    const double t = loss.kind == LossKind::LabelSmooth ? smoothed_target(label, loss.epsilon)
                                                         : static_cast<double>(label);
    value = kernels::softplus(s) - t * s;
    dlds = kernels::sigmoid(s) - t;
  }
  return logit.tape().record(Matrix(1, 1, value), {logit},
                             [logit, dlds](Tape& tape, const Matrix& g, const Matrix&) {
                               tape.accumulate(logit, Matrix(1, 1, g(0, 0) * dlds));
                             });
}

AdamW::AdamW(const AdamWConfig& config, const std::vector<Parameter>& params) : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.value.rows(), p.value.cols());
    v_.emplace_back(p.value.rows(), p.value.cols());
  }
}

void AdamW::step(std::vector<Parameter>& params, const std::vector<Matrix>& grads, double lr_scale) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ShapeError("AdamW: parameter/gradient count changed");
  }
  ++t_;
  const double lr = config_.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[k]);
    }
  }
}

std::vector<Matrix> zero_gradients(const ProbeModel& model) {
  std::vector<Matrix> g;
  g.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) g.emplace_back(p.value.rows(), p.value.cols());
  return g;
}

double accumulate_example_gradients(const ProbeModel& model, const hsio::Example& example,
                                    const LossSpec& loss, const DropoutContext& dropout,
                                    double scale, std::vector<Matrix>& accum) {
  Tape tape(true);
  std::vector<Var> bound;
  Var s = model.logit(tape, example.h_safe, example.pad_mask, bound, dropout);
  Var l = loss_from_logit(s, example.label, loss);
  tape.backward(l);
  for (std::size_t i = 0; i < bound.size(); ++i) {
    const Matrix* g = tape.grad(bound[i]);
    if (!g) continue;
    auto dst = accum[i].data();
    auto src = g->data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
  }
  return l.value()(0, 0);
}

std::vector<double> predict(const ProbeModel& model, const hsio::Dataset& data) {
  std::vector<double> scores;
  scores.reserve(data.size());
  for (const auto& ex : data.examples) scores.push_back(probe_forward(model, ex.h_safe, ex.pad_mask).prob);
  return scores;
}

std::vector<int> labels_of(const hsio::Dataset& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const auto& ex : data.examples) y.push_back(ex.label);
  return y;
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"epoch", r.epoch},
           {"train_loss", r.train_loss},
           {"lr_scale", r.lr_scale},
           {"dev_f1", r.dev_f1},
           {"dev_accuracy", r.dev_accuracy},
           {"selected", r.selected}};
}

TrainResult train_probe(const hsio::Dataset& train, const hsio::Dataset& dev,
                        const ProbeConfig& probe_config, const TrainConfig& train_config) {
  train_config.validate();
  probe_config.validate();
  if (train.empty()) throw SelectionError("training split is empty");
  if (dev.empty()) throw SelectionError("dev split is empty");
  if (dev.count_label(0) == 0 || dev.count_label(1) == 0) {
    throw SelectionError("dev split must contain both answerable and unanswerable examples");
  }

  ProbeModel model(probe_config, train_config.seed);
  AdamW optimizer(train_config.optimizer, model.parameters());
  std::mt19937_64 order_rng(train_config.seed ^ 0x5eed0f0bd3a7ull);
  std::mt19937_64 dropout_rng(train_config.seed + 1);
  const DropoutContext dropout{probe_config.dropout, &dropout_rng};
  const std::vector<int> dev_labels = labels_of(dev);

  TrainResult result{model, 0, -1.0, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
    const double lr_scale = epoch - 1 < train_config.epoch_lr_scale.size()
                                ? train_config.epoch_lr_scale[epoch - 1]
                                : 1.0;
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += train_config.batch_size) {
      const std::size_t end = std::min(order.size(), start + train_config.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::vector<Matrix> grads = zero_gradients(model);
      for (std::size_t i = start; i < end; ++i) {
        loss_sum += accumulate_example_gradients(model, train.examples[order[i]], train_config.loss,
                                                 dropout, scale, grads);
      }
      optimizer.step(model.parameters(), grads, lr_scale);
    }

    const auto report = compute_metrics(predict(model, dev), dev_labels, kSelectionThreshold,
                                        Orientation::RefusalPositive);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.lr_scale = lr_scale;
    rec.dev_f1 = report.f1;
    rec.dev_accuracy = report.accuracy;
    if (report.f1 > result.best_f1) {
      result.best_f1 = report.f1;
      result.best_epoch = epoch;
      result.best_model = model;
      rec.selected = true;
    }
    result.history.push_back(rec);
  }
  return result;
}

void to_json(json& j, const GateConfig& g) {
  j = json{{"tau", g.tau},
           {"objective", g.objective == CalibrationObjective::MaxF1 ? "MAX_F1" : "RECALL_AT_BOUNDED_FPR"},
           {"target_recall", g.target_recall},
           {"max_false_refusal", g.max_false_refusal}};
}

void from_json(const json& j, GateConfig& g) {
  GateConfig d;
  g.tau = j.value("tau", d.tau);
  const std::string obj = j.value("objective", std::string("MAX_F1"));
  if (obj == "MAX_F1") g.objective = CalibrationObjective::MaxF1;
  else if (obj == "RECALL_AT_BOUNDED_FPR") g.objective = CalibrationObjective::RecallAtBoundedFpr;
  else throw ConfigError("unknown calibration objective '" + obj + "'");
  g.target_recall = j.value("target_recall", d.target_recall);
  g.max_false_refusal = j.value("max_false_refusal", d.max_false_refusal);
  if (!(g.tau > 0.0 && g.tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
}

void to_json(json& j, const CalibrationResult& c) {
  j = json{{"feasible", c.feasible},
           {"tau", c.tau},
           {"objective", c.objective},
           {"refusal_f1", c.refusal_f1},
           {"refusal_recall", c.refusal_recall},
           {"false_refusal_rate", c.false_refusal_rate},
           {"note", c.note}};
}

std::vector<double> candidate_thresholds(std::span<const double> scores) {
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  std::vector<double> c;
  c.reserve(s.size() + 3);
  c.push_back(0.5);
  if (!s.empty()) {
    c.push_back(s.front() / 2.0);
    c.push_back((s.back() + 1.0) / 2.0);
  }
  for (std::size_t i = 0; i + 1 < s.size(); ++i) c.push_back((s[i] + s[i + 1]) / 2.0);
  // tau must stay inside (0, 1)
  std::erase_if(c, [](double t) { return !(t > 0.0 && t < 1.0); });
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

CalibrationResult calibrate_threshold(std::span<const double> scores, std::span<const int> labels,
                                      const GateConfig& config) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) pos += y == 1;
  if (pos == 0 || pos == labels.size()) {
    throw SelectionError("calibration needs both answerable and unanswerable examples");
  }

  const auto candidates = candidate_thresholds(scores);
  CalibrationResult out;
  auto fill = [&](double tau) {
    const auto r = compute_metrics(scores, labels, tau, Orientation::RefusalPositive);
    out.tau = tau;
    out.refusal_f1 = r.f1;
    out.refusal_recall = r.recall;
    out.false_refusal_rate =
        r.fp + r.tn == 0 ? 0.0 : static_cast<double>(r.fp) / static_cast<double>(r.fp + r.tn);
  };

  if (config.objective == CalibrationObjective::MaxF1) {
    out.objective = "MAX_F1";
    double best = -1.0;
    double best_tau = candidates.front();
    for (double tau : candidates) {
      const double f1 = compute_metrics(scores, labels, tau, Orientation::RefusalPositive).f1;
      if (f1 > best) {
        best = f1;
        best_tau = tau;
      }
    }
    fill(best_tau);
    return out;
  }

  out.objective = "RECALL_AT_BOUNDED_FPR";
  for (double tau : candidates) {
    fill(tau);
    if (out.refusal_recall >= config.target_recall) {
      out.feasible = out.false_refusal_rate <= config.max_false_refusal;
      if (!out.feasible) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "reaching refusal recall %.4f needs tau=%.6g, which refuses %.4f of answerable "
                      "queries (bound %.4f)",
                      config.target_recall, tau, out.false_refusal_rate, config.max_false_refusal);
        out.note = buf;
      }
      return out;
    }
  }
  out.feasible = false;
  out.note = "no threshold reaches the requested refusal recall";
  return out;
}

CalibrationResult calibrate_threshold(const ProbeModel& model, const hsio::Dataset& dev,
                                      const GateConfig& config) {
  return calibrate_threshold(predict(model, dev), labels_of(dev), config);
}

MultiDomainResult multi_domain_train(std::span<const DomainData> domains,
                                     const ProbeConfig& probe_config, const TrainConfig& train_config) {
  if (domains.empty()) throw ConfigError("multi-domain training needs at least one domain");
  MultiDomainResult out;
  for (const auto& d : domains) {
    TrainResult tr = train_probe(d.train, d.dev, probe_config, train_config);
    const auto report = compute_metrics(predict(tr.best_model, d.test), labels_of(d.test),
                                        kSelectionThreshold, Orientation::RefusalPositive);
    out.domains.push_back({d.name, std::move(tr), report.f1});
  }
  const std::size_t k = domains.size();
  out.cross_f1 = Matrix(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out.cross_f1(i, j) =
          i == j ? out.domains[i].test_f1
                 : compute_metrics(predict(out.domains[i].training.best_model, domains[j].test),
                                   labels_of(domains[j].test), kSelectionThreshold,
                                   Orientation::RefusalPositive)
                       .f1;
    }
  }
  return out;
}

std::vector<std::filesystem::path> save_domain_checkpoints(const MultiDomainResult& result,
                                                           const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& d : result.domains) {
    out.push_back(dir / d.name / "checkpoint");
    save_checkpoint(out.back(), d.training.best_model);
  }
  return out;
}

}  // namespace latref
