#include "latref/tape.hpp"

#include <cmath>
#include <string>

#include "latref/errors.hpp"
#include "latref/kernels.hpp"

namespace latref {

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(const Matrix& value) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::variable(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw ShapeError("tape op mixes vars from different tapes");
      n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return nodes_[v.id_].value(); }

const Matrix* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  return n.has_grad ? &n.grad : nullptr;
}

Matrix Tape::grad_or_zero(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.has_grad) return n.grad;
  return Matrix(n.value().rows(), n.value().cols());
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id_];
  if (!n.has_grad) {
    n.grad = Matrix(n.value().rows(), n.value().cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  if (!nodes_[v.id_].requires_grad) return;
  Matrix& buf = grad_buffer(v);
  if (!buf.same_shape(g)) {
    throw ShapeError("gradient shape " + shape_str(g) + " does not match value " + shape_str(buf));
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var scalar) {
  if (!record_) throw ConfigError("backward() on a tape built with record=false");
  if (scalar.tape_ != this) throw ShapeError("backward() on a var from another tape");
  const Matrix& out = value(scalar);
  if (out.size() != 1) throw ShapeError("backward() needs a 1x1 scalar, got " + shape_str(out));
  grad_buffer(scalar)(0, 0) += 1.0;

  for (std::size_t i = scalar.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad, n.value());
  }
}

namespace ad {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <typename F>
Matrix map(const Matrix& x, F f) {
  Matrix y(x.rows(), x.cols());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return y;
}

// Elementwise op with derivative evaluated on the input.
template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  Tape& t = x.tape();
  return t.record(map(x.value(), f), {x}, [x, df](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& in = x.value();
    Matrix dx(in.rows(), in.cols());
    auto gi = g.data();
    auto xi = in.data();
    auto di = dx.data();
    for (std::size_t i = 0; i < di.size(); ++i) di[i] = gi[i] * df(xi[i]);
    tape.accumulate(x, dx);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(kernels::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& tape, const Matrix& g, const Matrix&) {
                    if (tape.requires_grad(a)) tape.accumulate(a, kernels::matmul_nt(g, b.value()));
                    if (tape.requires_grad(b)) tape.accumulate(b, kernels::matmul_tn(a.value(), g));
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(kernels::matmul_nt(a.value(), b.value()), {a, b},
                  [a, b](Tape& tape, const Matrix& g, const Matrix&) {
                    if (tape.requires_grad(a)) tape.accumulate(a, kernels::matmul(g, b.value()));
                    if (tape.requires_grad(b)) tape.accumulate(b, kernels::matmul_tn(g, a.value()));
                  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix y = a.value();
  auto yd = y.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += bd[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& tape, const Matrix& g, const Matrix&) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var add_row(Var x, Var row) {
  const Matrix& xv = x.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw ShapeError("add_row: row " + shape_str(rv) + " does not broadcast over " + shape_str(xv));
  }
  Matrix y = xv;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    for (std::size_t c = 0; c < y.cols(); ++c) yr[c] += rv(0, c);
  }
  return x.tape().record(std::move(y), {x, row}, [x, row](Tape& tape, const Matrix& g, const Matrix&) {
    tape.accumulate(x, g);
    if (tape.requires_grad(row)) {
      Matrix dr(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dr(0, c) += g(r, c);
      tape.accumulate(row, dr);
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Matrix y = a.value();
  auto yd = y.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] *= bd[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& tape, const Matrix& g, const Matrix&) {
    auto gd = g.data();
    if (tape.requires_grad(a)) {
      Matrix da = b.value();
      auto d = da.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gd[i];
      tape.accumulate(a, da);
    }
    if (tape.requires_grad(b)) {
      Matrix db = a.value();
      auto d = db.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= gd[i];
      tape.accumulate(b, db);
    }
  });
}

Var scale(Var x, double c) {
  return x.tape().record(map(x.value(), [c](double v) { return v * c; }), {x},
                         [x, c](Tape& tape, const Matrix& g, const Matrix&) {
                           tape.accumulate(x, map(g, [c](double v) { return v * c; }));
                         });
}

Var add_constant(Var x, const Matrix& c) {
  require_same_shape(x.value(), c, "add_constant");
  Matrix y = x.value();
  auto yd = y.data();
  auto cd = c.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += cd[i];
  return x.tape().record(std::move(y), {x},
                         [x](Tape& tape, const Matrix& g, const Matrix&) { tape.accumulate(x, g); });
}

Var sigmoid(Var x) {
  return unary(x, kernels::sigmoid, [](double v) {
    const double s = kernels::sigmoid(v);
    return s * (1.0 - s);
  });
}

Var silu(Var x) { return unary(x, kernels::silu, kernels::silu_grad); }

Var gelu(Var x) { return unary(x, kernels::gelu, kernels::gelu_grad); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (gain.value().rows() != 1 || bias.value().rows() != 1) {
    throw ShapeError("layer_norm: gain and bias must be row vectors");
  }
  std::vector<double> mean(rows), rstd(rows);
  Matrix y = kernels::layer_norm_rows(xv, gain.value().data(), bias.value().data(), eps, mean, rstd);

  return x.tape().record(
      std::move(y), {x, gain, bias},
      [x, gain, bias, mean = std::move(mean), rstd = std::move(rstd), rows, cols](
          Tape& tape, const Matrix& g, const Matrix&) {
        const Matrix& xv = x.value();
        const auto gv = gain.value().data();
        Matrix dx(rows, cols);
        Matrix dgain(1, cols);
        Matrix dbias(1, cols);
        const double n = static_cast<double>(cols);
        std::vector<double> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0.0;
          double sum_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (xv(r, c) - mean[r]) * rstd[r];
            dxhat[c] = g(r, c) * gv[c];
            dgain(0, c) += g(r, c) * xhat[c];
            dbias(0, c) += g(r, c);
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xhat[c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            dx(r, c) = rstd[r] * (dxhat[c] - sum_d / n - xhat[c] * sum_dx / n);
          }
        }
        tape.accumulate(x, dx);
        tape.accumulate(gain, dgain);
        tape.accumulate(bias, dbias);
      });
}

Var softmax_rows(Var x) {
  Matrix y = x.value();
  kernels::softmax_rows(y);
  return x.tape().record(std::move(y), {x}, [x](Tape& tape, const Matrix& g, const Matrix& y) {
    Matrix dx(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (g(r, c) - dot);
    }
    tape.accumulate(x, dx);
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.cols()) throw ShapeError("slice_cols out of range");
  Matrix y(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) y(r, c) = xv(r, begin + c);
  return x.tape().record(std::move(y), {x}, [x, begin, count](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& buf = tape.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) buf(r, begin + c) += g(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix y(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) y(r, off + c) = pv(r, c);
    off += pv.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(y), parts, [inputs](Tape& tape, const Matrix& g, const Matrix&) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t pc = p.cols();
      if (tape.requires_grad(p)) {
        Matrix& buf = tape.grad_buffer(p);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < pc; ++c) buf(r, c) += g(r, off + c);
      }
      off += pc;
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.rows()) throw ShapeError("slice_rows out of range");
  const auto src = xv.data().subspan(begin * xv.cols(), count * xv.cols());
  Matrix y(count, xv.cols(), std::vector<double>(src.begin(), src.end()));
  return x.tape().record(std::move(y), {x}, [x, begin](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& buf = tape.grad_buffer(x);
    auto dst = buf.data().subspan(begin * buf.cols(), g.size());
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) dst[i] += gd[i];
  });
}

Var masked_mean_pool(Var x, std::span<const std::uint8_t> pad_mask) {
  const Matrix& xv = x.value();
  if (!pad_mask.empty() && pad_mask.size() != xv.rows()) {
    throw ShapeError("pad mask length " + std::to_string(pad_mask.size()) + " != rows " +
                     std::to_string(xv.rows()));
  }
  std::vector<std::uint8_t> mask(pad_mask.begin(), pad_mask.end());
  if (mask.empty()) mask.assign(xv.rows(), 0);
  std::size_t valid = 0;
  for (auto m : mask) valid += m == 0;
  if (valid == 0) throw EmptySequenceError("masked_mean_pool: every position is masked");

  Matrix y(1, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (mask[r]) continue;
    for (std::size_t c = 0; c < xv.cols(); ++c) y(0, c) += xv(r, c);
  }
  const double inv = 1.0 / static_cast<double>(valid);
  for (double& v : y.data()) v *= inv;

  return x.tape().record(std::move(y), {x},
                         [x, mask = std::move(mask), inv](Tape& tape, const Matrix& g, const Matrix&) {
                           Matrix& buf = tape.grad_buffer(x);
                           for (std::size_t r = 0; r < buf.rows(); ++r) {
                             if (mask[r]) continue;
                             for (std::size_t c = 0; c < buf.cols(); ++c) buf(r, c) += g(0, c) * inv;
                           }
                         });
}

Var dropout(Var x, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate == 0.0) return x;
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  const Matrix& xv = x.value();
  Matrix keep(xv.rows(), xv.cols());
  std::bernoulli_distribution coin(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (double& k : keep.data()) k = coin(rng) ? s : 0.0;
  Matrix y = xv;
  auto yd = y.data();
  auto kd = keep.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] *= kd[i];
  return x.tape().record(std::move(y), {x}, [x, keep = std::move(keep)](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix d = g;
    auto dd = d.data();
    auto kd = keep.data();
    for (std::size_t i = 0; i < dd.size(); ++i) dd[i] *= kd[i];
    tape.accumulate(x, d);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(Matrix(1, 1, s), {x}, [x](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& xv = x.value();
    tape.accumulate(x, Matrix(xv.rows(), xv.cols(), g(0, 0)));
  });
}

}  // namespace ad

}  // namespace latref
