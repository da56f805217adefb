#include "latref/synthlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "latref/errors.hpp"

namespace latref::synth {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(InteractionMode m) { return m == InteractionMode::Xor ? "XOR" : "LINEAR"; }

InteractionMode parse_mode(const std::string& s) {
  if (s == "LINEAR") return InteractionMode::Linear;
  if (s == "XOR") return InteractionMode::Xor;
  throw ConfigError("unknown interaction mode '" + s + "' (expected LINEAR or XOR)");
}

void SynthConfig::validate() const {
  if (num_examples < 2) throw ConfigError("num_examples must be >= 2");
  if (tokens < 1) throw ConfigError("tokens must be >= 1");
  if (signal_positions > tokens) {
    throw ConfigError("signal_positions k=" + std::to_string(signal_positions) + " exceeds T=" +
                      std::to_string(tokens));
  }
  if (signal_scale < 0.0) throw ConfigError("signal_scale must be >= 0");
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
  if (directions() < 1) throw ConfigError("num_directions must be >= 1");
  if (d_in < directions() + 1) throw ConfigError("d_in must exceed the number of signal directions");
  if (layer_count < 1) throw ConfigError("layer_count must be >= 1");
  if (signal_layer >= layer_count) throw ConfigError("signal_layer must be < layer_count");
  if (train_fraction < 0.0 || dev_fraction < 0.0 || train_fraction + dev_fraction > 1.0) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"seed", c.seed},
           {"num_examples", c.num_examples},
           {"tokens", c.tokens},
           {"d_in", c.d_in},
           {"noise_scale", c.noise_scale},
           {"num_directions", c.num_directions},
           {"signal_scale", c.signal_scale},
           {"signal_positions", c.signal_positions},
           {"interaction_mode", to_string(c.mode)},
           {"layer_count", c.layer_count},
           {"signal_layer", c.signal_layer},
           {"train_fraction", c.train_fraction},
           {"dev_fraction", c.dev_fraction},
           {"domain", c.domain},
           {"dtype", hsio::dtype_name(c.dtype)}};
}

void from_json(const json& j, SynthConfig& c) {
  SynthConfig d;
  c.seed = j.value("seed", d.seed);
  c.num_examples = j.value("num_examples", d.num_examples);
  c.tokens = j.value("tokens", d.tokens);
  c.d_in = j.value("d_in", d.d_in);
  c.noise_scale = j.value("noise_scale", d.noise_scale);
  c.num_directions = j.value("num_directions", d.num_directions);
  c.signal_scale = j.value("signal_scale", d.signal_scale);
  c.signal_positions = j.value("signal_positions", d.signal_positions);
  c.mode = parse_mode(j.value("interaction_mode", to_string(d.mode)));
  c.layer_count = j.value("layer_count", d.layer_count);
  c.signal_layer = j.value("signal_layer", d.signal_layer);
  c.train_fraction = j.value("train_fraction", d.train_fraction);
  c.dev_fraction = j.value("dev_fraction", d.dev_fraction);
  c.domain = j.value("domain", d.domain);
  const std::string dtype = j.value("dtype", std::string("float32"));
  if (dtype == "float32") c.dtype = hsio::DType::F32;
  else if (dtype == "float16") c.dtype = hsio::DType::F16;
  else throw ConfigError("unknown dtype '" + dtype + "'");
}

namespace {

constexpr std::uint64_t kPlantStream = 0x706c616e74ull;
constexpr std::uint64_t kLabelStream = 0x6c6162656cull;
constexpr std::uint64_t kSignStream = 0x7369676eull;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

double round_to_storage(double v, hsio::DType dtype) {
  if (dtype == hsio::DType::F16) return hsio::half_to_float(hsio::float_to_half(static_cast<float>(v)));
  return static_cast<float>(v);
}

std::string example_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn-%06zu", i);
  return buf;
}

}  // namespace

Plant make_plant(const SynthConfig& config) {
  config.validate();
  auto rng = stream(config.seed, kPlantStream);
  Plant plant;

  std::vector<std::size_t> order(config.tokens);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  plant.positions.assign(order.begin(), order.begin() + config.signal_positions);
  std::sort(plant.positions.begin(), plant.positions.end());

  // Centered Gram-Schmidt: zero-mean directions survive the per-token norm.
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = config.d_in;
  while (plant.directions.size() < config.directions()) {
    std::vector<double> v(d);
    for (double& x : v) x = normal(rng);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(d);
    for (double& x : v) x -= mean;
    for (const auto& u : plant.directions) {
      const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    plant.directions.push_back(std::move(v));
  }
  return plant;
}

std::vector<SynthSample> generate(const SynthConfig& config) {
  const Plant plant = make_plant(config);
  const std::size_t n = config.num_examples;

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2 == 0);
  auto label_rng = stream(config.seed, kLabelStream);
  std::shuffle(labels.begin(), labels.end(), label_rng);

  const auto n_train = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(n)));
  const auto n_dev = static_cast<std::size_t>(std::llround(config.dev_fraction * static_cast<double>(n)));

  std::vector<SynthSample> out;
  out.reserve(n * config.layer_count);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    const hsio::Split split = i < n_train            ? hsio::Split::Train
                              : i < n_train + n_dev  ? hsio::Split::Dev
                                                     : hsio::Split::Test;
    auto sign_rng = stream(config.seed, kSignStream, i);
    const double a = (sign_rng() & 1u) ? 1.0 : -1.0;
    const double b = y == 1 ? a : -a;

    for (std::size_t layer = 0; layer < config.layer_count; ++layer) {
      auto rng = stream(config.seed, i + 1, layer + 1);
      std::normal_distribution<double> normal(0.0, 1.0);
      Matrix h(config.tokens, config.d_in);
      for (double& v : h.data()) v = config.noise_scale * normal(rng);

      if (layer == config.signal_layer && config.signal_scale > 0.0) {
        for (std::size_t p = 0; p < plant.positions.size(); ++p) {
          auto row = h.row(plant.positions[p]);
          if (config.mode == InteractionMode::Linear) {
            if (y == 1) continue;
            const auto& u = plant.directions[p % plant.directions.size()];
            for (std::size_t c = 0; c < config.d_in; ++c) row[c] += config.signal_scale * u[c];
          } else {
            const auto& u0 = plant.directions[0];
            const auto& u1 = plant.directions[1];
            for (std::size_t c = 0; c < config.d_in; ++c) {
              row[c] += config.signal_scale * (a * u0[c] + b * u1[c]);
            }
          }
        }
      }
      for (double& v : h.data()) v = round_to_storage(v, config.dtype);

      SynthSample s;
      s.meta.id = example_id(i);
      s.meta.label = y;
      s.meta.split = split;
      s.meta.domain = config.domain;
      s.meta.num_tokens = config.tokens;
      s.meta.layer_index = static_cast<long>(layer) - static_cast<long>(config.layer_count);
      s.meta.schema_id = config.domain;
      s.meta.question_id = s.meta.id;
      s.meta.tensor_path = config.layer_count == 1
                               ? "tensors/" + s.meta.id + ".lrhs"
                               : "tensors/" + s.meta.id + "_l" + std::to_string(layer) + ".lrhs";
      s.h = std::move(h);
      out.push_back(std::move(s));
    }
  }
  return out;
}

fs::path gen_synthetic(const SynthConfig& config, const fs::path& dir) {
  const auto samples = generate(config);
  fs::create_directories(dir / "tensors");
  std::vector<hsio::LabeledExample> entries;
  entries.reserve(samples.size());
  for (const auto& s : samples) {
    hsio::write_tensor(dir / s.meta.tensor_path, s.h, config.dtype);
    entries.push_back(s.meta);
  }
  const fs::path manifest = dir / "manifest.jsonl";
  hsio::write_manifest(manifest, entries);
  std::ofstream cfg(dir / "synth_config.json");
  cfg << json(config).dump(2) << "\n";
  if (!cfg) throw DataError("cannot write " + (dir / "synth_config.json").string());
  return manifest;
}

hsio::Dataset to_dataset(const std::vector<SynthSample>& samples, hsio::Split split,
                         std::optional<long> layer_index) {
  hsio::Dataset ds;
  for (const auto& s : samples) {
    if (s.meta.split != split) continue;
    if (layer_index && s.meta.layer_index != *layer_index) continue;
    hsio::Example ex;
    ex.id = s.meta.id;
    ex.h_safe = hsio::token_normalize(hsio::sanitize(s.h, {}, &ds.sanitize_stats));
    ex.pad_mask.assign(s.h.rows(), 0);
    ex.label = s.meta.label;
    ex.domain = s.meta.domain;
    ex.layer_index = s.meta.layer_index;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

void to_json(json& j, const OracleResult& r) {
  j = json{{"accuracy", r.accuracy},
           {"standard_error", r.standard_error},
           {"closed_form", r.closed_form},
           {"draws", r.draws},
           {"rule", r.rule}};
}

OracleResult bayes_oracle(const SynthConfig& config, std::size_t draws) {
  config.validate();
  const double k = static_cast<double>(config.signal_positions);
  const double s = config.signal_scale;
  const double sigma = config.noise_scale;
  OracleResult r;

  // Per-example separation along the sufficient statistic, in noise units.
  auto snr = [&](double numerator) {
    if (numerator == 0.0) return 0.0;
    if (sigma == 0.0) return std::numeric_limits<double>::infinity();
    return numerator / sigma;
  };

  if (config.mode == InteractionMode::Linear) {
    r.rule = "refuse iff sum of cue-position projections onto their directions > k*s/2";
    r.closed_form = normal_cdf(snr(std::sqrt(k) * s / 2.0));
    r.accuracy = r.closed_form;
    return r;
  }

  r.rule = "answer iff P0 * P1 > 0, P_i = sum of cue-position projections onto u_i";
  const double q = normal_cdf(snr(std::sqrt(k) * s));
  r.closed_form = q * q + (1.0 - q) * (1.0 - q);
  if (draws == 0) {
    r.accuracy = r.closed_form;
    return r;
  }

  // P_i ~ N(k s sign_i, k sigma^2).
  auto rng = stream(config.seed, 0x6f7261636c65ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double mu = k * s;
  const double sd = std::sqrt(k) * sigma;
  std::size_t correct = 0;
  for (std::size_t t = 0; t < draws; ++t) {
    const double a = (rng() & 1u) ? 1.0 : -1.0;
    const double b = (rng() & 1u) ? 1.0 : -1.0;
    const double p0 = a * mu + sd * normal(rng);
    const double p1 = b * mu + sd * normal(rng);
    const bool predict_answerable = p0 * p1 > 0.0;
    correct += predict_answerable == (a * b > 0.0);
  }
  const double n = static_cast<double>(draws);
  r.draws = draws;
  r.accuracy = static_cast<double>(correct) / n;
  r.standard_error = std::sqrt(r.accuracy * (1.0 - r.accuracy) / n);
  return r;
}

}  // namespace latref::synth
