#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every intermediate value together with a closure that
// propagates the output gradient back to its inputs. Variables are cheap
// handles (tape pointer + node id). All arithmetic is 64-bit.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace thyme::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked.
  Var variable(Matrix value);
  /// Leaf excluded from differentiation.
  Var constant(Matrix value);

  /// Records an op output. `fn` runs during backward only when some input
  /// requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  /// Seeds d(output)/d(output) = 1 for a 1x1 output and sweeps the tape.
  void backward(Var output);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  /// Gradient buffer for `v`; zero-shaped like the value if never reached.
  Matrix grad(Var v) const;

  /// Mutable gradient accumulator, allocated on first use.
  Matrix& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  // deque keeps references to existing values stable while recording.
  std::deque<Node> nodes_;
};

// Shape-preserving arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var hadamard(Var a, Var b);
Var square(Var a);

/// a (r x k) * b (k x c).
Var matmul(Var a, Var b);
/// a (r x k) * b^T with b (c x k).
Var matmul_nt(Var a, Var b);
/// Adds a 1 x c row to every row of a.
Var add_row(Var a, Var row);

/// Tanh-approximated GELU.
Var gelu(Var a);
/// log(1 + max(0, x)) elementwise.
Var saturate(Var a);

/// Row-wise layer normalization with learned 1 x c gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise softmax; entries of `additive_mask` (same shape, may hold -inf)
/// are added to the logits first when non-null.
Var softmax_rows(Var x, const Matrix* additive_mask = nullptr);

Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count);
Var gather_rows(Var x, std::span<const Eigen::Index> rows);
Var hconcat(std::span<const Var> parts);
Var vconcat(std::span<const Var> parts);

/// Column-wise max over rows -> 1 x c. Ties resolve to the lowest row.
Var max_rows(Var x);
/// Column-wise mean over rows -> 1 x c. The sum is taken over the sorted
/// column values, so the result does not depend on row order.
Var mean_rows(Var x);
Var sum(Var x);

/// Softmax over the entries of an n x 1 column restricted to `active`
/// positions; returns 1 x n with exact zeros elsewhere.
Var masked_softmax(Var logits, const std::vector<bool>& active);

/// Mean over rows of -log softmax(S_i)[i] for square S.
Var diagonal_cross_entropy(Var scores);

/// Canonical order-independent column sums (shared by mean_rows and callers
/// that need permutation-stable reductions).
Eigen::RowVectorXd sorted_column_sums(const Matrix& x);

}  // namespace thyme::ad
