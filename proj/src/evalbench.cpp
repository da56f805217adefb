#include "latref/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "latref/errors.hpp"
#include "latref/kernels.hpp"

namespace latref::evalbench {

using json = nlohmann::json;

void to_json(json& j, const LatencyReport& r) {
  j = json{{"mean_ms", r.mean_ms},
           {"median_ms", r.median_ms},
           {"p95_ms", r.p95_ms},
           {"batch_size", r.batch_size},
           {"warmup", r.warmup},
           {"iters", r.iters},
           {"tokens", r.tokens},
           {"layers", r.layers},
           {"threads", r.threads},
           {"hardware", r.hardware}};
}

std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        cpu = line.substr(colon + 1);
        cpu.erase(0, cpu.find_first_not_of(' '));
      }
      break;
    }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hw threads, " +
         std::to_string(kernels::num_threads()) + " omp threads";
}

LatencyReport bench_latency(const ProbeModel& model, std::size_t tokens, std::size_t iters,
                            std::size_t warmup, std::uint64_t seed) {
  if (iters < 10) throw ConfigError("bench_latency needs iters >= 10");
  if (tokens < 1) throw ConfigError("bench_latency needs at least one token");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix raw(tokens, model.config().d_in);
  for (double& v : raw.data()) v = normal(rng);
  const Matrix h = hsio::token_normalize(raw);
  const PadMask mask(tokens, 0);

  using clock = std::chrono::steady_clock;
  volatile double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) sink = sink + probe_forward(model, h, mask).prob;

  LatencyReport r;
  r.samples_ms.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    sink = sink + probe_forward(model, h, mask).prob;
    const auto t1 = clock::now();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }

  std::vector<double> sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
  r.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  // Nearest rank.
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  r.p95_ms = sorted[std::max<std::size_t>(rank, 1) - 1];
  r.warmup = warmup;
  r.iters = iters;
  r.tokens = tokens;
  r.layers = model.config().layers;
  r.threads = static_cast<std::size_t>(kernels::num_threads());
  r.hardware = hardware_descriptor();
  return r;
}

std::string to_string(Axis a) {
  switch (a) {
    case Axis::GateVariant: return "GATE_VARIANT";
    case Axis::LayerIndex: return "LAYER_INDEX";
    case Axis::Depth: return "DEPTH";
    case Axis::Loss: return "LOSS";
    case Axis::Dropout: return "DROPOUT";
  }
  return "GATE_VARIANT";
}

Axis parse_axis(const std::string& s) {
  for (Axis a : {Axis::GateVariant, Axis::LayerIndex, Axis::Depth, Axis::Loss, Axis::Dropout}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown ablation axis '" + s +
                    "' (expected GATE_VARIANT, LAYER_INDEX, DEPTH, LOSS or DROPOUT)");
}

std::vector<AblationSetting> ablation_settings(const AblationRequest& request) {
  std::vector<AblationSetting> out;
  auto add = [&](std::string label, std::optional<double> ref_f1, std::optional<double> ref_aux) {
    AblationSetting s;
    s.label = std::move(label);
    s.probe = request.probe;
    s.train = request.train;
    s.layer_index = request.layer_index;
    s.reference_f1 = ref_f1;
    s.reference_aux = ref_aux;
    out.push_back(std::move(s));
    return &out.back();
  };

  switch (request.axis) {
    case Axis::GateVariant: {
      struct Row {
        const char* label;
        GateVariant gate;
        double f1, ms;
      };
      const Row rows[] = {{"TRGE (Full)", GateVariant::SwiGLU, 87.1, 2.6},
                          {"w/o SwiGLU", GateVariant::None, 85.4, 2.3},
                          {"SwiGLU -> MLP", GateVariant::MLP, 83.0, 2.2},
                          {"SwiGLU -> GLU", GateVariant::GLU, 75.5, 2.3},
                          {"SwiGLU -> GeGLU", GateVariant::GEGLU, 85.1, 2.0},
                          {"Linear Probe", GateVariant::LinearProbe, 70.4, 0.8}};
      for (const auto& r : rows) add(r.label, r.f1, r.ms)->probe.gate = r.gate;
      break;
    }
    case Axis::LayerIndex: {
      const std::map<long, std::pair<double, double>> ref = {
          {-1, {86.5, 87.6}}, {-8, {86.4, 88.7}}, {-16, {87.0, 88.4}}, {-24, {86.5, 87.7}}, {-32, {85.4, 88.4}}};
      if (request.layers.empty()) throw ConfigError("LAYER_INDEX ablation needs at least one layer");
      for (long l : request.layers) {
        const auto it = ref.find(l);
        auto* s = add(std::to_string(l), it == ref.end() ? std::nullopt : std::optional(it->second.first),
                      it == ref.end() ? std::nullopt : std::optional(it->second.second));
        s->layer_index = l;
      }
      break;
    }
    case Axis::Depth: {
      const std::map<std::size_t, std::pair<double, double>> ref = {
          {1, {82.03, 1.04}}, {2, {83.87, 1.64}}, {4, {87.09, 2.60}},
          {6, {85.28, 3.40}}, {8, {84.61, 4.45}}, {12, {83.02, 6.46}}};
      if (request.depths.empty()) throw ConfigError("DEPTH ablation needs at least one depth");
      for (std::size_t d : request.depths) {
        const auto it = ref.find(d);
        auto* s = add(std::to_string(d), it == ref.end() ? std::nullopt : std::optional(it->second.first),
                      it == ref.end() ? std::nullopt : std::optional(it->second.second));
        s->probe.layers = d;
      }
      break;
    }
    case Axis::Loss: {
      struct Row {
        LossKind kind;
        double eps, gamma, f1, auc;
      };
      const Row rows[] = {{LossKind::LabelSmooth, 0.1, 2.0, 87.1, 88.7},
                          {LossKind::LabelSmooth, 0.05, 2.0, 85.1, 88.4},
                          {LossKind::Focal, 0.1, 2.0, 85.3, 88.3},
                          {LossKind::Focal, 0.1, 1.0, 85.2, 86.9},
                          {LossKind::BCE, 0.1, 2.0, 84.8, 87.8}};
      for (const auto& r : rows) {
        LossSpec spec = request.train.loss;
        spec.kind = r.kind;
        spec.epsilon = r.eps;
        spec.gamma = r.gamma;
        add(spec.label(), r.f1, r.auc)->train.loss = spec;
      }
      break;
    }
    case Axis::Dropout: {
      const double ref[][3] = {{0.0, 85.4, 88.0}, {0.1, 86.5, 88.4}, {0.2, 87.1, 88.7}, {0.3, 85.5, 88.0}};
      for (const auto& r : ref) {
        char label[32];
        std::snprintf(label, sizeof label, "Dropout = %.1f", r[0]);
        add(label, r[1], r[2])->probe.dropout = r[0];
      }
      break;
    }
  }
  return out;
}

std::optional<std::size_t> AblationTable::strict_best_by_dev_f1() const {
  if (rows.empty()) return std::nullopt;
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].dev_f1 > rows[best].dev_f1) best = i;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i != best && rows[i].dev_f1 == rows[best].dev_f1) return std::nullopt;
  }
  return best;
}

AblationTable run_ablation(const AblationRequest& request) {
  const auto settings = ablation_settings(request);

  struct Splits {
    hsio::Dataset train, dev, test;
  };
  std::map<std::optional<long>, Splits> cache;
  auto splits_for = [&](std::optional<long> layer) -> const Splits& {
    auto it = cache.find(layer);
    if (it != cache.end()) return it->second;
    hsio::LoadOptions opts;
    opts.layer_index = layer;
    Splits s{hsio::load_dataset(request.manifest, hsio::Split::Train, opts),
             hsio::load_dataset(request.manifest, hsio::Split::Dev, opts),
             hsio::load_dataset(request.manifest, hsio::Split::Test, opts)};
    if (s.train.empty()) {
      throw DataError("no training examples in " + request.manifest.string() +
                      (layer ? " for layer " + std::to_string(*layer) : std::string()));
    }
    return cache.emplace(layer, std::move(s)).first->second;
  };

  AblationTable table;
  table.axis = request.axis;
  for (const auto& s : settings) {
    const Splits& data = splits_for(s.layer_index);
    const hsio::Dataset& held_out = data.test.empty() ? data.dev : data.test;
    table.eval_split = data.test.empty() ? "dev" : "test";

    TrainResult tr = train_probe(data.train, data.dev, s.probe, s.train);
    AblationRow row;
    row.label = s.label;
    row.layer_index = s.layer_index;
    row.params = tr.best_model.parameter_count();
    row.layers = s.probe.layers;
    row.best_epoch = tr.best_epoch;
    row.dev_f1 = tr.best_f1;
    row.metrics = compute_metrics(predict(tr.best_model, held_out), labels_of(held_out),
                                  kSelectionThreshold, Orientation::RefusalPositive);
    row.reference_f1 = s.reference_f1;
    row.reference_aux = s.reference_aux;
    const bool timed = request.axis == Axis::GateVariant || request.axis == Axis::Depth;
    if (timed && request.latency_iters > 0) {
      const std::size_t tokens = held_out.examples.front().h_safe.rows();
      row.time_ms = bench_latency(tr.best_model, tokens, request.latency_iters, 2, s.train.seed).median_ms;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string num(std::optional<double> v, const char* fmt = "%.2f") {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, fmt, *v);
  return buf;
}

std::string params_str(std::size_t n) {
  char buf[32];
  if (n >= 1'000'000) std::snprintf(buf, sizeof buf, "%.2fM", n / 1e6);
  else if (n >= 1'000) std::snprintf(buf, sizeof buf, "%.1fK", n / 1e3);
  else std::snprintf(buf, sizeof buf, "%zu", n);
  return buf;
}

std::string auc_str(const MetricsReport& m) { return m.auc ? pct(*m.auc) : "-"; }

// Header row followed by one row per setting.
std::vector<std::vector<std::string>> cells(const AblationTable& t) {
  std::vector<std::vector<std::string>> out;
  switch (t.axis) {
    case Axis::GateVariant:
      out.push_back({"Variant", "F1 (%)", "Time (ms)", "Ref F1 (%)", "Ref Time (ms)"});
      for (const auto& r : t.rows) {
        out.push_back({r.label, pct(r.metrics.f1), num(r.time_ms, "%.3f"), num(r.reference_f1, "%.1f"),
                       num(r.reference_aux, "%.1f")});
      }
      break;
    case Axis::LayerIndex:
      out.push_back({"Layer", "Acc", "Prec", "Rec", "AUC", "F1", "Dev F1", "Ref F1", "Ref AUC"});
      for (const auto& r : t.rows) {
        out.push_back({r.label, pct(r.metrics.accuracy), pct(r.metrics.precision), pct(r.metrics.recall),
                       auc_str(r.metrics), pct(r.metrics.f1), pct(r.dev_f1), num(r.reference_f1, "%.1f"),
                       num(r.reference_aux, "%.1f")});
      }
      break;
    case Axis::Depth:
      out.push_back({"Layers", "Params", "F1 (%)", "Time (ms)", "Ref F1 (%)", "Ref Time (ms)"});
      for (const auto& r : t.rows) {
        out.push_back({r.label, params_str(r.params), pct(r.metrics.f1), num(r.time_ms, "%.3f"),
                       num(r.reference_f1), num(r.reference_aux)});
      }
      break;
    case Axis::Loss:
    case Axis::Dropout:
      out.push_back({t.axis == Axis::Loss ? "Loss Function" : "Dropout Rate", "F1 (%)", "AUC (%)",
                     "Ref F1 (%)", "Ref AUC (%)"});
      for (const auto& r : t.rows) {
        out.push_back({r.label, pct(r.metrics.f1), auc_str(r.metrics), num(r.reference_f1, "%.1f"),
                       num(r.reference_aux, "%.1f")});
      }
      break;
  }
  return out;
}

}  // namespace

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json row{{"label", r.label},
             {"params", r.params},
             {"layers", r.layers},
             {"best_epoch", r.best_epoch},
             {"dev_f1", r.dev_f1},
             {"metrics", r.metrics}};
    row["layer_index"] = r.layer_index ? json(*r.layer_index) : json(nullptr);
    row["time_ms"] = r.time_ms ? json(*r.time_ms) : json(nullptr);
    row["reference_f1"] = r.reference_f1 ? json(*r.reference_f1) : json(nullptr);
    row["reference_aux"] = r.reference_aux ? json(*r.reference_aux) : json(nullptr);
    rows.push_back(std::move(row));
  }
  return json{{"axis", to_string(t.axis)}, {"eval_split", t.eval_split}, {"rows", rows}};
}

std::string to_text(const AblationTable& t) {
  const auto c = cells(t);
  std::vector<std::size_t> width(c.front().size(), 0);
  for (const auto& row : c)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());

  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i == 0) {
        os << row[i] << std::string(width[i] - row[i].size(), ' ');
      } else {
        os << "  " << std::string(width[i] - row[i].size(), ' ') << row[i];
      }
    }
    os << "\n";
  };
  line(c.front());
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  os << std::string(total + 2 * (width.size() - 1), '-') << "\n";
  for (std::size_t i = 1; i < c.size(); ++i) line(c[i]);
  return os.str();
}

std::string to_csv(const AblationTable& t) {
  std::ostringstream os;
  for (const auto& row : cells(t)) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      const bool quote = row[i].find_first_of(",\"") != std::string::npos;
      if (!quote) {
        os << row[i];
        continue;
      }
      os << '"';
      for (char ch : row[i]) os << (ch == '"' ? "\"\"" : std::string(1, ch));
      os << '"';
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace latref::evalbench
