// latref command-line interface.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "latref/base64.hpp"
#include "latref/errors.hpp"
#include "latref/evalbench.hpp"
#include "latref/gateway.hpp"
#include "latref/hsio.hpp"
#include "latref/kernels.hpp"
#include "latref/metrics.hpp"
#include "latref/probe.hpp"
#include "latref/synthlab.hpp"
#include "latref/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace latref;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInfeasible = 3;

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

// Run configuration: {"probe": {...}, "train": {...}, "gate": {...}, "layer_index": -1}
struct RunConfig {
  ProbeConfig probe;
  TrainConfig train;
  GateConfig gate;
  std::optional<long> layer_index;
};

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  const json j = read_json_file(path);
  if (j.contains("probe")) rc.probe = j.at("probe").get<ProbeConfig>();
  if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
  if (j.contains("gate")) rc.gate = j.at("gate").get<GateConfig>();
  if (j.contains("layer_index") && !j.at("layer_index").is_null()) rc.layer_index = j.at("layer_index").get<long>();
  return rc;
}

json run_config_json(const RunConfig& rc) {
  json j{{"probe", rc.probe}, {"train", rc.train}, {"gate", rc.gate}};
  j["layer_index"] = rc.layer_index ? json(*rc.layer_index) : json(nullptr);
  return j;
}

hsio::LoadOptions load_options(std::optional<long> layer) {
  hsio::LoadOptions o;
  o.layer_index = layer;
  return o;
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int threads = 0;
};

struct Options {
  // shared
  std::string manifest;
  std::string model;
  std::optional<long> layer;
  std::string split = "test";
  std::optional<double> tau;
  std::string calibration;
  // train / calibrate
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::string objective;
  std::optional<double> target_recall;
  std::optional<double> max_false_refusal;
  // eval
  std::string orientation = "refusal";
  // ablate
  std::string axis;
  std::vector<long> layers;
  std::vector<std::size_t> depths;
  std::string emit = "text";
  std::size_t latency_iters = 10;
  // gate / inspect
  std::string tensor;
  // bench
  std::size_t tokens = 512;
  std::size_t iters = 10;
  std::size_t warmup = 2;
  // serve
  std::string host = "127.0.0.1";
  int port = 8080;
  // synth
  std::string mode;
  std::optional<std::size_t> num_examples;
};

RunConfig resolve_run_config(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g.config);
  if (g.seed) rc.train.seed = *g.seed;
  if (o.epochs) rc.train.epochs = *o.epochs;
  if (o.lr) rc.train.optimizer.lr = *o.lr;
  if (o.layer) rc.layer_index = *o.layer;
  if (!o.objective.empty()) {
    rc.gate.objective = o.objective == "MAX_F1" ? CalibrationObjective::MaxF1
                        : o.objective == "RECALL_AT_BOUNDED_FPR"
                            ? CalibrationObjective::RecallAtBoundedFpr
                            : throw ConfigError("unknown objective '" + o.objective + "'");
  }
  if (o.target_recall) rc.gate.target_recall = *o.target_recall;
  if (o.max_false_refusal) rc.gate.max_false_refusal = *o.max_false_refusal;
  return rc;
}

fs::path require_out_dir(const Globals& g, const char* command) {
  if (g.out_dir.empty()) throw ConfigError(std::string(command) + " needs --out-dir");
  fs::create_directories(g.out_dir);
  return g.out_dir;
}

int cmd_gen_synth(const Globals& g, const Options& o) {
  synth::SynthConfig cfg;
  if (!g.config.empty()) cfg = read_json_file(g.config).get<synth::SynthConfig>();
  if (g.seed) cfg.seed = *g.seed;
  if (!o.mode.empty()) cfg.mode = synth::parse_mode(o.mode);
  if (o.num_examples) cfg.num_examples = *o.num_examples;
  const fs::path dir = require_out_dir(g, "gen-synth");
  const fs::path manifest = synth::gen_synthetic(cfg, dir);
  const auto oracle = synth::bayes_oracle(cfg);
  write_json_file(dir / "oracle.json", oracle);
  print(json{{"manifest", manifest.string()},
             {"examples", cfg.num_examples},
             {"layers", cfg.layer_count},
             {"oracle", oracle}});
  return kExitOk;
}

int report_calibration(const CalibrationResult& cal) {
  if (!cal.feasible) {
    std::cerr << "calibration infeasible: " << cal.note << "\n";
    return kExitInfeasible;
  }
  return kExitOk;
}

int cmd_train(const Globals& g, const Options& o) {
  if (o.manifest.empty()) throw ConfigError("train needs --manifest");
  const RunConfig rc = resolve_run_config(g, o);
  const fs::path dir = require_out_dir(g, "train");
  const auto opts = load_options(rc.layer_index);
  const auto train = hsio::load_dataset(o.manifest, hsio::Split::Train, opts);
  const auto dev = hsio::load_dataset(o.manifest, hsio::Split::Dev, opts);
  if (train.empty()) throw DataError("no training examples in " + o.manifest);

  write_json_file(dir / "config.json", run_config_json(rc));
  const TrainResult result = train_probe(train, dev, rc.probe, rc.train);
  {
    std::ofstream log(dir / "metrics.jsonl");
    for (const auto& rec : result.history) log << json(rec).dump() << "\n";
  }
  save_checkpoint(dir / "checkpoint", result.best_model);
  // Calibrate the model as stored so tau matches what gate/serve will load.
  const ProbeModel reloaded = load_checkpoint(dir / "checkpoint");
  const CalibrationResult cal = calibrate_threshold(reloaded, dev, rc.gate);
  write_json_file(dir / "calibration.json", cal);

  print(json{{"run_dir", dir.string()},
             {"best_epoch", result.best_epoch},
             {"best_dev_f1", result.best_f1},
             {"model_id", checkpoint_model_id(dir / "checkpoint")},
             {"params", reloaded.parameter_count()},
             {"calibration", cal},
             {"sanitized_values", train.sanitize_stats.total() + dev.sanitize_stats.total()}});
  return report_calibration(cal);
}

fs::path checkpoint_dir(const std::string& model) {
  if (model.empty()) throw ConfigError("--model is required");
  // Accept either a run directory or the checkpoint itself.
  const fs::path p(model);
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  return p;
}

int cmd_calibrate(const Globals& g, const Options& o) {
  if (o.manifest.empty()) throw ConfigError("calibrate needs --manifest");
  const RunConfig rc = resolve_run_config(g, o);
  const ProbeModel model = load_checkpoint(checkpoint_dir(o.model));
  const auto dev = hsio::load_dataset(o.manifest, hsio::Split::Dev, load_options(rc.layer_index));
  const CalibrationResult cal = calibrate_threshold(model, dev, rc.gate);
  if (!g.out_dir.empty()) write_json_file(fs::path(g.out_dir) / "calibration.json", cal);
  print(cal);
  return report_calibration(cal);
}

double resolve_tau(const Options& o) {
  if (o.tau) return *o.tau;
  if (!o.calibration.empty()) return read_json_file(o.calibration).at("tau").get<double>();
  if (!o.model.empty()) {
    const fs::path cal = fs::path(o.model) / "calibration.json";
    if (fs::exists(cal)) return read_json_file(cal).at("tau").get<double>();
  }
  return kSelectionThreshold;
}

int cmd_eval(const Globals& g, const Options& o) {
  if (o.manifest.empty()) throw ConfigError("eval needs --manifest");
  const RunConfig rc = resolve_run_config(g, o);
  const ProbeModel model = load_checkpoint(checkpoint_dir(o.model));
  const auto data = hsio::load_dataset(o.manifest, hsio::parse_split(o.split), load_options(rc.layer_index));
  if (data.empty()) throw DataError("no examples in split '" + o.split + "'");
  const double tau = resolve_tau(o);
  const auto orient = o.orientation == "answerable" ? Orientation::AnswerablePositive
                      : o.orientation == "refusal"  ? Orientation::RefusalPositive
                                                    : throw ConfigError("orientation must be refusal or answerable");
  const MetricsReport report = compute_metrics(predict(model, data), labels_of(data), tau, orient);
  json out{{"split", o.split}, {"metrics", report}};
  const fs::path synth_cfg = fs::path(o.manifest).parent_path() / "synth_config.json";
  if (fs::exists(synth_cfg)) {
    const auto cfg = read_json_file(synth_cfg).get<synth::SynthConfig>();
    const auto oracle = synth::bayes_oracle(cfg);
    out["oracle_accuracy"] = oracle.accuracy;
    out["accuracy_over_oracle"] = report.accuracy / oracle.accuracy;
  }
  print(out);
  return kExitOk;
}

int cmd_ablate(const Globals& g, const Options& o) {
  if (o.manifest.empty()) throw ConfigError("ablate needs --manifest");
  const RunConfig rc = resolve_run_config(g, o);
  evalbench::AblationRequest req;
  req.axis = evalbench::parse_axis(o.axis);
  req.probe = rc.probe;
  req.train = rc.train;
  req.manifest = o.manifest;
  req.layer_index = rc.layer_index;
  if (!o.layers.empty()) req.layers = o.layers;
  if (!o.depths.empty()) req.depths = o.depths;
  req.latency_iters = o.latency_iters;
  const auto table = evalbench::run_ablation(req);

  std::string rendered;
  if (o.emit == "json") rendered = evalbench::to_json(table).dump(2) + "\n";
  else if (o.emit == "csv") rendered = evalbench::to_csv(table);
  else if (o.emit == "text") rendered = evalbench::to_text(table);
  else throw ConfigError("--emit must be text, json or csv");
  std::cout << rendered;
  if (!g.out_dir.empty()) {
    fs::create_directories(g.out_dir);
    write_json_file(fs::path(g.out_dir) / ("ablation_" + o.axis + ".json"), evalbench::to_json(table));
    std::ofstream(fs::path(g.out_dir) / ("ablation_" + o.axis + ".csv")) << evalbench::to_csv(table);
  }
  return kExitOk;
}

int cmd_gate(const Globals&, const Options& o) {
  if (o.tensor.empty()) throw ConfigError("gate needs --tensor");
  const auto probe = gateway::load_probe(checkpoint_dir(o.model));
  print(gateway::gate(fs::path(o.tensor), probe, resolve_tau(o)));
  return kExitOk;
}

int cmd_bench(const Globals& g, const Options& o) {
  const RunConfig rc = resolve_run_config(g, o);
  const std::uint64_t seed = g.seed.value_or(0);
  json reports = json::array();
  if (!o.model.empty()) {
    const ProbeModel model = load_checkpoint(checkpoint_dir(o.model));
    reports.push_back(evalbench::bench_latency(model, o.tokens, o.iters, o.warmup, seed));
  } else {
    const std::vector<std::size_t> depths = o.depths.empty() ? std::vector<std::size_t>{rc.probe.layers} : o.depths;
    for (std::size_t d : depths) {
      ProbeConfig cfg = rc.probe;
      cfg.layers = d;
      const ProbeModel model(cfg, seed);
      json r = evalbench::bench_latency(model, o.tokens, o.iters, o.warmup, seed);
      r["params"] = model.parameter_count();
      reports.push_back(std::move(r));
    }
  }
  print(reports);
  if (!g.out_dir.empty()) write_json_file(fs::path(g.out_dir) / "latency.json", reports);
  return kExitOk;
}

int cmd_serve(const Globals&, const Options& o) {
  auto probe = gateway::load_probe(checkpoint_dir(o.model));
  const double tau = resolve_tau(o);
  const std::string id = probe.model_id;
  gateway::GateServer server(std::move(probe), tau);
  std::cerr << "serving model " << id << " on " << o.host << ":" << o.port << " (tau=" << tau << ")\n";
  if (!server.listen(o.host, o.port)) throw DataError("cannot bind " + o.host + ":" + std::to_string(o.port));
  return kExitOk;
}

int cmd_inspect(const Globals&, const Options& o) {
  if (!o.tensor.empty()) {
    const auto h = hsio::read_header(o.tensor);
    print(json{{"path", o.tensor},
               {"version", h.version},
               {"dtype", hsio::dtype_name(h.dtype)},
               {"dims", h.dims},
               {"header_bytes", h.header_bytes()},
               {"payload_bytes", h.payload_bytes()}});
    return kExitOk;
  }
  if (!o.model.empty()) {
    const fs::path dir = checkpoint_dir(o.model);
    json m = read_json_file(dir / "manifest.json");
    m["config"] = read_json_file(dir / "config.json");
    m["param_count"] = load_checkpoint(dir).parameter_count();
    print(m);
    return kExitOk;
  }
  if (!o.manifest.empty()) {
    const auto entries = hsio::read_manifest(o.manifest);
    std::map<std::string, std::size_t> per_split;
    std::map<long, std::size_t> per_layer;
    std::size_t answerable = 0;
    for (const auto& e : entries) {
      ++per_split[hsio::to_string(e.split)];
      ++per_layer[e.layer_index];
      answerable += e.label == 1;
    }
    json layers = json::object();
    for (auto [l, n] : per_layer) layers[std::to_string(l)] = n;
    print(json{{"entries", entries.size()}, {"answerable", answerable}, {"splits", per_split}, {"layers", layers}});
    return kExitOk;
  }
  throw ConfigError("inspect needs --tensor, --model or --manifest");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latref: hidden-state refusal gate toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  Options o;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Random seed override");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--threads", g.threads, "OpenMP thread count (0 = runtime default)");

  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic planted-signal dataset");
  gen->add_option("--mode", o.mode, "LINEAR or XOR");
  gen->add_option("--num-examples", o.num_examples);

  auto* train = app.add_subcommand("train", "Train a probe, save the checkpoint and calibrate");
  train->add_option("--manifest", o.manifest)->required();
  train->add_option("--layer", o.layer, "Stored layer index to train on");
  train->add_option("--epochs", o.epochs);
  train->add_option("--lr", o.lr);
  train->add_option("--objective", o.objective, "MAX_F1 or RECALL_AT_BOUNDED_FPR");
  train->add_option("--target-recall", o.target_recall);
  train->add_option("--max-false-refusal", o.max_false_refusal);

  auto* cal = app.add_subcommand("calibrate", "Choose tau on the dev split");
  cal->add_option("--model", o.model)->required();
  cal->add_option("--manifest", o.manifest)->required();
  cal->add_option("--layer", o.layer);
  cal->add_option("--objective", o.objective, "MAX_F1 or RECALL_AT_BOUNDED_FPR");
  cal->add_option("--target-recall", o.target_recall);
  cal->add_option("--max-false-refusal", o.max_false_refusal);

  auto* eval = app.add_subcommand("eval", "Score a split and print metrics");
  eval->add_option("--model", o.model)->required();
  eval->add_option("--manifest", o.manifest)->required();
  eval->add_option("--split", o.split)->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--layer", o.layer);
  eval->add_option("--tau", o.tau);
  eval->add_option("--calibration", o.calibration, "calibration.json to read tau from");
  eval->add_option("--orientation", o.orientation)->check(CLI::IsMember({"refusal", "answerable"}));

  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep");
  ablate->add_option("--axis", o.axis, "GATE_VARIANT, LAYER_INDEX, DEPTH, LOSS or DROPOUT")->required();
  ablate->add_option("--manifest", o.manifest)->required();
  ablate->add_option("--layer", o.layer, "Layer for non-layer axes");
  ablate->add_option("--layers", o.layers, "Layer indices for LAYER_INDEX")->delimiter(',');
  ablate->add_option("--depths", o.depths, "Depths for DEPTH")->delimiter(',');
  ablate->add_option("--emit", o.emit)->check(CLI::IsMember({"text", "json", "csv"}));
  ablate->add_option("--latency-iters", o.latency_iters);
  ablate->add_option("--epochs", o.epochs);

  auto* gate = app.add_subcommand("gate", "Gate one hidden-state tensor");
  gate->add_option("--model", o.model)->required();
  gate->add_option("--tensor", o.tensor)->required();
  gate->add_option("--tau", o.tau);
  gate->add_option("--calibration", o.calibration);

  auto* bench = app.add_subcommand("bench", "Measure probe-forward latency");
  bench->add_option("--model", o.model, "Checkpoint; default is a fresh model from --config");
  bench->add_option("--tokens", o.tokens);
  bench->add_option("--iters", o.iters);
  bench->add_option("--warmup", o.warmup);
  bench->add_option("--depths", o.depths)->delimiter(',');

  auto* serve = app.add_subcommand("serve", "Serve /healthz and /gate over HTTP");
  serve->add_option("--model", o.model)->required();
  serve->add_option("--tau", o.tau);
  serve->add_option("--calibration", o.calibration);
  serve->add_option("--host", o.host);
  serve->add_option("--port", o.port);

  auto* inspect = app.add_subcommand("inspect", "Print tensor, checkpoint or manifest headers");
  inspect->add_option("--tensor", o.tensor);
  inspect->add_option("--model", o.model);
  inspect->add_option("--manifest", o.manifest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (dynamic_cast<const CLI::RequiredError*>(&e) == nullptr) std::cerr << app.help();
    return kExitUsage;
  }

  if (g.threads > 0) kernels::set_num_threads(g.threads);
  try {
    if (*gen) return cmd_gen_synth(g, o);
    if (*train) return cmd_train(g, o);
    if (*cal) return cmd_calibrate(g, o);
    if (*eval) return cmd_eval(g, o);
    if (*ablate) return cmd_ablate(g, o);
    if (*gate) return cmd_gate(g, o);
    if (*bench) return cmd_bench(g, o);
    if (*serve) return cmd_serve(g, o);
    if (*inspect) return cmd_inspect(g, o);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  std::cerr << app.help();
  return kExitUsage;
}
