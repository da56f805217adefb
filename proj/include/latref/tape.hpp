#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "latref/matrix.hpp"

namespace latref {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so a
// reverse sweep visits every consumer before its inputs.
//
// A tape built with record=false keeps forward values only and refuses
// backward(); this is the eval-mode path.
class Tape {
 public:
  // Receives the gradient flowing into the node (and the node value) and
  // pushes gradients to the inputs.
  using BackwardFn =
      std::function<void(Tape&, const Matrix& grad_out, const Matrix& value_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  // Borrowed leaf that receives gradients; `value` must outlive the tape.
  Var parameter(const Matrix& value);
  // Owned leaf that receives gradients.
  Var variable(Matrix value);

  // Appends an op result. `fn` runs during backward() only when the node
  // received a gradient and at least one input requires one.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  // Null when no gradient reached the node.
  const Matrix* grad(Var v) const;
  Matrix grad_or_zero(Var v) const;

  // Adds `g` into the gradient buffer of `v` (no-op unless v requires grad).
  void accumulate(Var v, const Matrix& g);
  // Gradient buffer of `v`, zero-initialized on first use.
  Matrix& grad_buffer(Var v);

  // Seeds d(scalar)/d(scalar) = 1 and sweeps the tape backwards.
  void backward(Var scalar);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;

    const Matrix& value() const { return borrowed ? *borrowed : owned; }
  };

  Var push(Node node);

  bool record_;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// Primitive differentiable ops. Binary ops require both operands on the same tape.
namespace ad {

Var matmul(Var a, Var b);
// a·bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
// x[T×n] + row[1×n], broadcast over rows.
Var add_row(Var x, Var row);
Var mul(Var a, Var b);
Var scale(Var x, double c);
// x + c for a constant matrix c (attention masks).
Var add_constant(Var x, const Matrix& c);

Var sigmoid(Var x);
Var silu(Var x);
Var gelu(Var x);

// Row-wise layer norm with affine gain/bias (both 1×n).
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var softmax_rows(Var x);

Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);

// Mean over rows whose pad flag is 0. Returns 1×cols.
Var masked_mean_pool(Var x, std::span<const std::uint8_t> pad_mask);

// Inverted dropout. Identity (the same Var) when rate == 0 or !training.
Var dropout(Var x, double rate, bool training, std::mt19937_64& rng);

Var sum(Var x);

}  // namespace ad

}  // namespace latref
