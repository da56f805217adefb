#include "latref/numerics.hpp"

#include <cmath>
#include <string>

#include "latref/errors.hpp"
#include "latref/kernels.hpp"

namespace latref {

namespace {

template <typename F>
Matrix elementwise(const Matrix& x, F f) {
  Matrix y(x.rows(), x.cols());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return y;
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) { return kernels::matmul(a, b); }

Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                  double eps) {
  return kernels::layer_norm_rows(x, gain, bias, eps);
}

Matrix sigmoid(const Matrix& x) { return elementwise(x, kernels::sigmoid); }
Matrix silu(const Matrix& x) { return elementwise(x, kernels::silu); }
Matrix gelu(const Matrix& x) { return elementwise(x, kernels::gelu); }

std::vector<double> masked_mean_pool(const Matrix& z, std::span<const std::uint8_t> pad_mask) {
  Tape tape(false);
  Var pooled = ad::masked_mean_pool(tape.constant(z), pad_mask);
  const auto d = pooled.value().data();
  return {d.begin(), d.end()};
}

Var multi_head_attention(Var z, std::size_t heads, std::span<const std::uint8_t> pad_mask,
                         const AttentionVars& p) {
  const std::size_t T = z.rows();
  const std::size_t d = z.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!pad_mask.empty() && pad_mask.size() != T) {
    throw ShapeError("attention: pad mask length does not match sequence length");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q = ad::add_row(ad::matmul(z, p.w_q), p.b_q);
  Var k = ad::add_row(ad::matmul(z, p.w_k), p.b_k);
  Var v = ad::add_row(ad::matmul(z, p.w_v), p.b_v);

  bool any_masked = false;
  for (auto m : pad_mask) any_masked = any_masked || m != 0;
  Matrix key_mask;
  if (any_masked) {
    key_mask = Matrix(T, T);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j)
        if (pad_mask[j]) key_mask(i, j) = kMaskFill;
  }

  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(q, h * dh, dh);
    Var kh = ad::slice_cols(k, h * dh, dh);
    Var vh = ad::slice_cols(v, h * dh, dh);
    Var scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
    if (any_masked) scores = ad::add_constant(scores, key_mask);
    head_out.push_back(ad::matmul(ad::softmax_rows(scores), vh));
  }
  Var merged = heads == 1 ? head_out[0] : ad::concat_cols(head_out);
  return ad::add_row(ad::matmul(merged, p.w_o), p.b_o);
}

Matrix multi_head_attention(const Matrix& z, std::size_t heads,
                            std::span<const std::uint8_t> pad_mask, const AttentionWeights& w) {
  Tape tape(false);
  AttentionVars p{tape.parameter(w.w_q), tape.parameter(w.b_q), tape.parameter(w.w_k),
                  tape.parameter(w.b_k), tape.parameter(w.w_v), tape.parameter(w.b_v),
                  tape.parameter(w.w_o), tape.parameter(w.b_o)};
  return multi_head_attention(tape.constant(z), heads, pad_mask, p).value();
}

}  // namespace latref
