#include "latref/probe.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "latref/errors.hpp"
#include "latref/hsio.hpp"
#include "latref/kernels.hpp"

namespace latref {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(GateVariant v) {
  switch (v) {
    case GateVariant::SwiGLU: return "SWIGLU";
    case GateVariant::None: return "NONE";
    case GateVariant::MLP: return "MLP";
    case GateVariant::GLU: return "GLU";
    case GateVariant::GEGLU: return "GEGLU";
    case GateVariant::LinearProbe: return "LINEAR_PROBE";
  }
  return "SWIGLU";
}

GateVariant parse_gate_variant(const std::string& s) {
  for (auto v : {GateVariant::SwiGLU, GateVariant::None, GateVariant::MLP, GateVariant::GLU,
                 GateVariant::GEGLU, GateVariant::LinearProbe}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown gate variant '" + s + "'");
}

std::string to_string(HeadVariant v) {
  return v == HeadVariant::Linear ? "LINEAR" : "TWO_LAYER_GELU";
}

HeadVariant parse_head_variant(const std::string& s) {
  if (s == "LINEAR") return HeadVariant::Linear;
  if (s == "TWO_LAYER_GELU") return HeadVariant::TwoLayerGelu;
  throw ConfigError("unknown head variant '" + s + "'");
}

void ProbeConfig::validate() const {
  if (d_in == 0) throw ConfigError("d_in must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (gate == GateVariant::LinearProbe) return;
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (layers < 1) throw ConfigError("a TRGE probe needs at least one layer");
  if (ffn_dim == 0 || max_len == 0) throw ConfigError("ffn_dim and max_len must be positive");
  if (gate != GateVariant::None && swiglu_hidden == 0) {
    throw ConfigError("swiglu_hidden must be positive");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

void to_json(json& j, const ProbeConfig& c) {
  j = json{{"d_in", c.d_in},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"layers", c.layers},
           {"ffn_dim", c.ffn_dim},
           {"gate_variant", to_string(c.gate)},
           {"dropout", c.dropout},
           {"max_len", c.max_len},
           {"head_variant", to_string(c.head)},
           {"swiglu_hidden", c.swiglu_hidden},
           {"ln_eps", c.ln_eps}};
}

void from_json(const json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.d_in = j.value("d_in", d.d_in);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.layers = j.value("layers", d.layers);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.gate = parse_gate_variant(j.value("gate_variant", to_string(d.gate)));
  c.dropout = j.value("dropout", d.dropout);
  c.max_len = j.value("max_len", d.max_len);
  c.head = parse_head_variant(j.value("head_variant", to_string(d.head)));
  // swiglu_hidden follows ffn_dim unless given explicitly.
  c.swiglu_hidden = j.value("swiglu_hidden", c.ffn_dim);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

std::size_t param_count(const ProbeConfig& c) {
  c.validate();
  if (c.gate == GateVariant::LinearProbe) return c.d_in + 1;
  const std::size_t d = c.d_model;
  const std::size_t h = c.swiglu_hidden;
  std::size_t n = 2 * c.d_in;
  n += c.d_in * d + d + 2 * d;
  n += c.max_len * d;
  std::size_t per_layer = 4 * (d * d + d) + (d * c.ffn_dim + c.ffn_dim + c.ffn_dim * d + d);
  switch (c.gate) {
    case GateVariant::None: per_layer += 2 * (2 * d); break;
    case GateVariant::MLP: per_layer += 3 * (2 * d) + 2 * d * h; break;
    default: per_layer += 3 * (2 * d) + 3 * d * h; break;
  }
  n += c.layers * per_layer;
  n += c.head == HeadVariant::TwoLayerGelu ? d * d + d + d + 1 : d + 1;
  return n;
}

Var gate_branch(Var x, GateVariant variant, Var w_g, Var w_u, Var w_d) {
  switch (variant) {
    case GateVariant::MLP: return ad::matmul(ad::gelu(ad::matmul(x, w_u)), w_d);
    case GateVariant::SwiGLU:
    case GateVariant::GLU:
    case GateVariant::GEGLU: {
      Var pre = ad::matmul(x, w_g);
      Var act = variant == GateVariant::SwiGLU ? ad::silu(pre)
                : variant == GateVariant::GLU  ? ad::sigmoid(pre)
                                               : ad::gelu(pre);
      return ad::matmul(ad::mul(act, ad::matmul(x, w_u)), w_d);
    }
    default: throw ConfigError("gate_branch: variant " + to_string(variant) + " has no gate");
  }
}

Matrix swiglu(const Matrix& x, const Matrix& w_g, const Matrix& w_u, const Matrix& w_d) {
  if (w_g.rows() != x.cols() || w_u.rows() != x.cols() || !w_g.same_shape(w_u) ||
      w_d.rows() != w_g.cols()) {
    throw ShapeError("swiglu: inconsistent shapes x" + shape_str(x) + " W_g" + shape_str(w_g) +
                     " W_u" + shape_str(w_u) + " W_d" + shape_str(w_d));
  }
  Tape tape(false);
  return gate_branch(tape.constant(x), GateVariant::SwiGLU, tape.parameter(w_g),
                     tape.parameter(w_u), tape.parameter(w_d))
      .value();
}

Var trge_layer(Var z, std::span<const std::uint8_t> pad_mask, const TrgeLayerVars& p,
               GateVariant variant, std::size_t heads, double ln_eps,
               const DropoutContext& dropout) {
  const bool train = dropout.training();
  std::mt19937_64 unused;
  std::mt19937_64& rng = dropout.rng ? *dropout.rng : unused;

  Var attn = multi_head_attention(ad::layer_norm(z, p.attn_gain, p.attn_bias, ln_eps), heads,
                                  pad_mask, p.attn);
  Var u = ad::add(z, ad::dropout(attn, dropout.rate, train, rng));

  Var hidden = ad::gelu(ad::add_row(ad::matmul(ad::layer_norm(u, p.mlp_gain, p.mlp_bias, ln_eps), p.w1), p.b1));
  hidden = ad::dropout(hidden, dropout.rate, train, rng);
  Var v = ad::add(u, ad::add_row(ad::matmul(hidden, p.w2), p.b2));

  if (variant == GateVariant::None) return v;
  Var g = gate_branch(ad::layer_norm(v, p.gate_gain, p.gate_bias, ln_eps), variant, p.w_g, p.w_u,
                      p.w_d);
  return ad::add(v, ad::dropout(g, dropout.rate, train, rng));
}

Matrix trge_layer(const Matrix& z, std::span<const std::uint8_t> pad_mask,
                  const TrgeLayerWeights& w, GateVariant variant, std::size_t heads,
                  double ln_eps) {
  Tape tape(false);
  auto bind = [&tape](const Matrix& m) { return m.empty() ? Var{} : tape.parameter(m); };
  TrgeLayerVars p{bind(w.attn_gain), bind(w.attn_bias),
                  {bind(w.attn.w_q), bind(w.attn.b_q), bind(w.attn.w_k), bind(w.attn.b_k),
                   bind(w.attn.w_v), bind(w.attn.b_v), bind(w.attn.w_o), bind(w.attn.b_o)},
                  bind(w.mlp_gain), bind(w.mlp_bias), bind(w.w1), bind(w.b1), bind(w.w2),
                  bind(w.b2), bind(w.gate_gain), bind(w.gate_bias), bind(w.w_g), bind(w.w_u),
                  bind(w.w_d)};
  return trge_layer(tape.constant(z), pad_mask, p, variant, heads, ln_eps).value();
}

namespace {

Matrix xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

Matrix ones_row(std::size_t n) { return Matrix(1, n, 1.0); }
Matrix zeros_row(std::size_t n) { return Matrix(1, n, 0.0); }

}  // namespace

ProbeModel::ProbeModel(const ProbeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

std::size_t ProbeModel::add(std::string name, Matrix value) {
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

void ProbeModel::build(std::mt19937_64& rng) {
  const ProbeConfig& c = config_;
  if (c.gate == GateVariant::LinearProbe) {
    layout_.head_w1 = add("head.weight", xavier(c.d_in, 1, rng));
    layout_.head_b1 = add("head.bias", zeros_row(1));
    return;
  }
  const std::size_t d = c.d_model;
  layout_.in_gain = add("input_norm.gain", ones_row(c.d_in));
  layout_.in_bias = add("input_norm.bias", zeros_row(c.d_in));
  layout_.proj_w = add("proj.weight", xavier(c.d_in, d, rng));
  layout_.proj_b = add("proj.bias", zeros_row(d));
  layout_.proj_gain = add("proj_norm.gain", ones_row(d));
  layout_.proj_bias = add("proj_norm.bias", zeros_row(d));
  layout_.pos = add("pos_embedding", gaussian(c.max_len, d, 0.02, rng));

  for (std::size_t k = 0; k < c.layers; ++k) {
    const std::string pre = "layers." + std::to_string(k) + ".";
    TrgeLayerParamsT<std::size_t> l{};
    l.attn_gain = add(pre + "attn_norm.gain", ones_row(d));
    l.attn_bias = add(pre + "attn_norm.bias", zeros_row(d));
    l.attn.w_q = add(pre + "attn.w_q", xavier(d, d, rng));
    l.attn.b_q = add(pre + "attn.b_q", zeros_row(d));
    l.attn.w_k = add(pre + "attn.w_k", xavier(d, d, rng));
    l.attn.b_k = add(pre + "attn.b_k", zeros_row(d));
    l.attn.w_v = add(pre + "attn.w_v", xavier(d, d, rng));
    l.attn.b_v = add(pre + "attn.b_v", zeros_row(d));
    l.attn.w_o = add(pre + "attn.w_o", xavier(d, d, rng));
    l.attn.b_o = add(pre + "attn.b_o", zeros_row(d));
    l.mlp_gain = add(pre + "mlp_norm.gain", ones_row(d));
    l.mlp_bias = add(pre + "mlp_norm.bias", zeros_row(d));
    l.w1 = add(pre + "mlp.w1", xavier(d, c.ffn_dim, rng));
    l.b1 = add(pre + "mlp.b1", zeros_row(c.ffn_dim));
    l.w2 = add(pre + "mlp.w2", xavier(c.ffn_dim, d, rng));
    l.b2 = add(pre + "mlp.b2", zeros_row(d));
    l.gate_gain = l.gate_bias = l.w_g = l.w_u = l.w_d = kAbsent;
    if (c.gate != GateVariant::None) {
      const std::size_t h = c.swiglu_hidden;
      l.gate_gain = add(pre + "gate_norm.gain", ones_row(d));
      l.gate_bias = add(pre + "gate_norm.bias", zeros_row(d));
      if (c.gate != GateVariant::MLP) l.w_g = add(pre + "gate.w_g", xavier(d, h, rng));
      l.w_u = add(pre + "gate.w_u", xavier(d, h, rng));
      l.w_d = add(pre + "gate.w_d", xavier(h, d, rng));
    }
    layout_.layers.push_back(l);
  }

  if (c.head == HeadVariant::TwoLayerGelu) {
    layout_.head_w1 = add("head.w1", xavier(d, d, rng));
    layout_.head_b1 = add("head.b1", zeros_row(d));
    layout_.head_w2 = add("head.w2", xavier(d, 1, rng));
    layout_.head_b2 = add("head.b2", zeros_row(1));
  } else {
    layout_.head_w1 = add("head.weight", xavier(d, 1, rng));
    layout_.head_b1 = add("head.bias", zeros_row(1));
  }
}

std::size_t ProbeModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

const Parameter& ProbeModel::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError("no parameter named '" + name + "'");
}

Parameter& ProbeModel::parameter(const std::string& name) {
  return const_cast<Parameter&>(std::as_const(*this).parameter(name));
}

void ProbeModel::zero_non_norm_weights() {
  for (auto& p : params_)
    if (p.name.find("norm") == std::string::npos) p.value.fill(0.0);
}

Var ProbeModel::logit(Tape& tape, const Matrix& h_safe, std::span<const std::uint8_t> pad_mask,
                      std::vector<Var>& bound, const DropoutContext& dropout) const {
  const ProbeConfig& c = config_;
  if (h_safe.cols() != c.d_in) {
    throw ShapeError("probe input has " + std::to_string(h_safe.cols()) + " features, model expects " +
                     std::to_string(c.d_in));
  }
  if (h_safe.rows() == 0) throw EmptySequenceError("probe input has no tokens");
  if (c.gate != GateVariant::LinearProbe && h_safe.rows() > c.max_len) {
    throw LengthError("sequence length " + std::to_string(h_safe.rows()) + " exceeds max_len " +
                      std::to_string(c.max_len));
  }
  if (!pad_mask.empty()) {
    if (pad_mask.size() != h_safe.rows()) throw ShapeError("pad mask length does not match tokens");
    bool any_valid = false;
    for (auto m : pad_mask) any_valid = any_valid || m == 0;
    if (!any_valid) throw EmptySequenceError("every position is masked");
  }

  bound.clear();
  bound.reserve(params_.size());
  for (const auto& p : params_) bound.push_back(tape.parameter(p.value));
  auto at = [&bound](std::size_t i) { return i == kAbsent ? Var{} : bound[i]; };

  Var h = tape.constant(h_safe);
  if (c.gate == GateVariant::LinearProbe) {
    Var pooled = ad::masked_mean_pool(h, pad_mask);
    return ad::add(ad::matmul(pooled, at(layout_.head_w1)), at(layout_.head_b1));
  }

  const bool train = dropout.training();
  std::mt19937_64 unused;
  std::mt19937_64& rng = dropout.rng ? *dropout.rng : unused;

  Var x = ad::layer_norm(h, at(layout_.in_gain), at(layout_.in_bias), c.ln_eps);
  Var z = ad::add_row(ad::matmul(x, at(layout_.proj_w)), at(layout_.proj_b));
  z = ad::gelu(ad::layer_norm(z, at(layout_.proj_gain), at(layout_.proj_bias), c.ln_eps));
  z = ad::dropout(z, dropout.rate, train, rng);
  z = ad::add(z, ad::slice_rows(at(layout_.pos), 0, h_safe.rows()));

  for (const auto& l : layout_.layers) {
    TrgeLayerVars p{at(l.attn_gain), at(l.attn_bias),
                    {at(l.attn.w_q), at(l.attn.b_q), at(l.attn.w_k), at(l.attn.b_k),
                     at(l.attn.w_v), at(l.attn.b_v), at(l.attn.w_o), at(l.attn.b_o)},
                    at(l.mlp_gain), at(l.mlp_bias), at(l.w1), at(l.b1), at(l.w2), at(l.b2),
                    at(l.gate_gain), at(l.gate_bias), at(l.w_g), at(l.w_u), at(l.w_d)};
    z = trge_layer(z, pad_mask, p, c.gate, c.heads, c.ln_eps, dropout);
  }

  Var pooled = ad::masked_mean_pool(z, pad_mask);
  if (c.head == HeadVariant::TwoLayerGelu) {
    Var hidden = ad::gelu(ad::add_row(ad::matmul(pooled, at(layout_.head_w1)), at(layout_.head_b1)));
    return ad::add(ad::matmul(hidden, at(layout_.head_w2)), at(layout_.head_b2));
  }
  return ad::add(ad::matmul(pooled, at(layout_.head_w1)), at(layout_.head_b1));
}

std::string ProbeModel::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  for (const auto& p : params_) {
    for (char ch : p.name) mix(static_cast<std::uint8_t>(ch));
    for (double v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ProbeOutput probe_forward(const ProbeModel& model, const Matrix& h_safe,
                          std::span<const std::uint8_t> pad_mask) {
  Tape tape(false);
  std::vector<Var> bound;
  const double s = model.logit(tape, h_safe, pad_mask, bound).value()(0, 0);
  return {kernels::sigmoid(s), s};
}

void save_checkpoint(const fs::path& dir, const ProbeModel& model) {
  fs::create_directories(dir / "params");
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "config.json").string());
    out << json(model.config()).dump(2) << '\n';
  }
  json params = json::array();
  const auto& ps = model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    char prefix[8];
    std::snprintf(prefix, sizeof prefix, "%03zu_", i);
    const std::string file = "params/" + std::string(prefix) + ps[i].name + ".lrhs";
    hsio::write_tensor(dir / file, ps[i].value, hsio::DType::F32);
    params.push_back({{"name", ps[i].name},
                      {"file", file},
                      {"shape", {ps[i].value.rows(), ps[i].value.cols()}}});
  }
  json manifest{{"format", "latref-checkpoint"},
                {"version", 1},
                {"model_id", model.fingerprint()},
                {"parameters", params}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

ProbeModel load_checkpoint(const fs::path& dir) {
  ProbeConfig config;
  try {
    config = read_json(dir / "config.json").get<ProbeConfig>();
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint config: " + std::string(e.what()));
  }
  const json manifest = read_json(dir / "manifest.json");
  ProbeModel model(config, 0);
  auto& params = model.parameters();
  const json& entries = manifest.at("parameters");
  if (entries.size() != params.size()) {
    throw DataError("checkpoint lists " + std::to_string(entries.size()) + " parameters, config implies " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = entries[i].at("name").get<std::string>();
    if (name != params[i].name) {
      throw DataError("checkpoint parameter " + std::to_string(i) + " is '" + name + "', expected '" +
                      params[i].name + "'");
    }
    Matrix value = hsio::read_matrix(dir / entries[i].at("file").get<std::string>());
    if (!value.same_shape(params[i].value)) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(value) +
                      ", expected " + shape_str(params[i].value));
    }
    params[i].value = std::move(value);
  }
  return model;
}

std::string checkpoint_model_id(const fs::path& dir) {
  return read_json(dir / "manifest.json").at("model_id").get<std::string>();
}

}  // namespace latref
