#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "latref/matrix.hpp"
#include "latref/numerics.hpp"
#include "latref/tape.hpp"

namespace latref {

// Third residual branch of a TRGE layer. SWIGLU is the full model; NONE drops
// the branch; MLP/GLU/GEGLU swap the gate function; LINEAR_PROBE removes the
// encoder entirely (pool, then affine).
enum class GateVariant { SwiGLU, None, MLP, GLU, GEGLU, LinearProbe };
enum class HeadVariant { TwoLayerGelu, Linear };

std::string to_string(GateVariant v);
GateVariant parse_gate_variant(const std::string& s);
std::string to_string(HeadVariant v);
HeadVariant parse_head_variant(const std::string& s);

struct ProbeConfig {
  std::size_t d_in = 4096;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t layers = 4;
  std::size_t ffn_dim = 4096;
  GateVariant gate = GateVariant::SwiGLU;
  double dropout = 0.2;
  std::size_t max_len = 8192;
  HeadVariant head = HeadVariant::TwoLayerGelu;
  std::size_t swiglu_hidden = 4096;
  double ln_eps = 1e-5;

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

// Closed-form trainable parameter count:
//   LINEAR_PROBE:  d_in + 1
//   otherwise:     2*d_in                       input layer norm
//                + d_in*d + d + 2*d             projection + its layer norm
//                + max_len*d                    positional table
//                + layers * (ln + attn + mlp + gate)
//                + head
//   ln   = 2*d per normed branch (2 branches for NONE, else 3)
//   attn = 4*(d*d + d)
//   mlp  = d*ffn + ffn + ffn*d + d
//   gate = 3*d*h for SWIGLU/GLU/GEGLU, 2*d*h for MLP, 0 for NONE (h = swiglu_hidden)
//   head = d*d + d + d + 1 (TWO_LAYER_GELU) or d + 1 (LINEAR)
std::size_t param_count(const ProbeConfig& config);

struct Parameter {
  std::string name;
  Matrix value;
};

inline constexpr std::size_t kAbsent = std::numeric_limits<std::size_t>::max();

template <typename T>
struct TrgeLayerParamsT {
  T attn_gain, attn_bias;
  AttentionParamsT<T> attn;
  T mlp_gain, mlp_bias, w1, b1, w2, b2;
  T gate_gain, gate_bias, w_g, w_u, w_d;
};
using TrgeLayerWeights = TrgeLayerParamsT<Matrix>;
using TrgeLayerVars = TrgeLayerParamsT<Var>;

// Dropout policy shared by every sublayer of one forward pass.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;  // null means eval mode

  bool training() const { return rng != nullptr && rate > 0.0; }
};

// Gate function of the third branch, applied row-wise.
Var gate_branch(Var x, GateVariant variant, Var w_g, Var w_u, Var w_d);

// (SiLU(x·W_g) ⊙ (x·W_u))·W_d for every row of x.
Matrix swiglu(const Matrix& x, const Matrix& w_g, const Matrix& w_u, const Matrix& w_d);

// U = Z + Attn(LN(Z)); V = U + MLP(LN(U)); Z' = V + Gate(LN(V)).
Var trge_layer(Var z, std::span<const std::uint8_t> pad_mask, const TrgeLayerVars& p,
               GateVariant variant, std::size_t heads, double ln_eps,
               const DropoutContext& dropout = {});
Matrix trge_layer(const Matrix& z, std::span<const std::uint8_t> pad_mask,
                  const TrgeLayerWeights& w, GateVariant variant, std::size_t heads,
                  double ln_eps = 1e-5);

class ProbeModel {
 public:
  // Xavier-uniform weights, zero biases, unit LN gains, N(0, 0.02) positional table.
  ProbeModel(const ProbeConfig& config, std::uint64_t seed);

  const ProbeConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  const Parameter& parameter(const std::string& name) const;
  Parameter& parameter(const std::string& name);

  // Sets every parameter whose name does not contain "norm" to zero.
  void zero_non_norm_weights();

  // Records the forward pass on `tape` and returns the 1×1 logit. `bound`
  // receives one Var per parameter, in parameters() order.
  Var logit(Tape& tape, const Matrix& h_safe, std::span<const std::uint8_t> pad_mask,
            std::vector<Var>& bound, const DropoutContext& dropout = {}) const;

  // Stable short identifier derived from the parameter bytes.
  std::string fingerprint() const;

 private:
  struct Layout {
    std::size_t in_gain = kAbsent, in_bias = kAbsent;
    std::size_t proj_w = kAbsent, proj_b = kAbsent, proj_gain = kAbsent, proj_bias = kAbsent;
    std::size_t pos = kAbsent;
    std::vector<TrgeLayerParamsT<std::size_t>> layers;
    std::size_t head_w1 = kAbsent, head_b1 = kAbsent, head_w2 = kAbsent, head_b2 = kAbsent;
  };

  std::size_t add(std::string name, Matrix value);
  void build(std::mt19937_64& rng);

  ProbeConfig config_;
  std::vector<Parameter> params_;
  Layout layout_;
};

struct ProbeOutput {
  double prob = 0.5;
  double logit = 0.0;
};

// Eval-mode forward: dropout off, no gradient bookkeeping.
ProbeOutput probe_forward(const ProbeModel& model, const Matrix& h_safe,
                          std::span<const std::uint8_t> pad_mask = {});

// Checkpoint directory:
//   config.json     ProbeConfig
//   manifest.json   {"format", "version", "model_id", "parameters": [{"name", "file", "shape"}]}
//   params/NNN_<name>.lrhs   one float32 LRHS tensor per parameter, in manifest order
void save_checkpoint(const std::filesystem::path& dir, const ProbeModel& model);
ProbeModel load_checkpoint(const std::filesystem::path& dir);
std::string checkpoint_model_id(const std::filesystem::path& dir);

}  // namespace latref
