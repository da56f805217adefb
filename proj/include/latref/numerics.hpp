#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "latref/matrix.hpp"
#include "latref/tape.hpp"

namespace latref {

// Additive score for masked keys. exp(-1e9 - max) underflows to exactly 0, so
// masked tokens contribute nothing to unmasked rows.
inline constexpr double kMaskFill = -1e9;

// Padding mask convention: 1 = padded position, 0 = real token.
using PadMask = std::vector<std::uint8_t>;

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                  double eps);
Matrix sigmoid(const Matrix& x);
Matrix silu(const Matrix& x);
// Tanh approximation of GELU.
Matrix gelu(const Matrix& x);
std::vector<double> masked_mean_pool(const Matrix& z, std::span<const std::uint8_t> pad_mask);

// Self-attention projections. Weights are d×d, biases 1×d.
template <typename T>
struct AttentionParamsT {
  T w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};
using AttentionWeights = AttentionParamsT<Matrix>;
using AttentionVars = AttentionParamsT<Var>;

Var multi_head_attention(Var z, std::size_t heads, std::span<const std::uint8_t> pad_mask,
                         const AttentionVars& p);

Matrix multi_head_attention(const Matrix& z, std::size_t heads,
                            std::span<const std::uint8_t> pad_mask, const AttentionWeights& w);

}  // namespace latref
