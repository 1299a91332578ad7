#include "thyme/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace thyme::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::logic_error("autodiff: mixing variables across tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs, false, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  return node.grad;
}

Matrix Tape::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (!node.has_grad) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw std::logic_error("autodiff: output belongs to another tape");
  if (output.rows() != 1 || output.cols() != 1) {
    throw std::invalid_argument("autodiff: backward needs a scalar output");
  }
  grad_buffer(output.id())(0, 0) += 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    // Closures only touch buffers of earlier nodes, so `g` stays valid.
    const Matrix& g = node.grad;
    node.backward(*this, g);
  }
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
  }
}

void accumulate(Tape& tape, Var v, const Matrix& g) {
  if (tape.requires_grad(v)) tape.grad_buffer(v.id()) += g;
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  Tape& tape = *a.tape();
  return tape.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tape& tape = *a.tape();
  return tape.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    if (t.requires_grad(b)) t.grad_buffer(b.id()) -= g;
  });
}

Var scale(Var a, double factor) {
  Tape& tape = *a.tape();
  return tape.record(a.value() * factor, {a}, [a, factor](Tape& t, const Matrix& g) {
    t.grad_buffer(a.id()) += g * factor;
  });
}

Var hadamard(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "hadamard");
  Tape& tape = *a.tape();
  return tape.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad_buffer(a.id()) += g.cwiseProduct(t.value(b.id()));
    if (t.requires_grad(b)) t.grad_buffer(b.id()) += g.cwiseProduct(t.value(a.id()));
  });
}

Var square(Var a) {
  Tape& tape = *a.tape();
  return tape.record(a.value().array().square().matrix(), {a}, [a](Tape& t, const Matrix& g) {
    t.grad_buffer(a.id()).array() += 2.0 * g.array() * t.value(a.id()).array();
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("autodiff: shape mismatch in matmul");
  Tape& tape = *a.tape();
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad_buffer(a.id()).noalias() += g * t.value(b.id()).transpose();
    if (t.requires_grad(b)) t.grad_buffer(b.id()).noalias() += t.value(a.id()).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("autodiff: shape mismatch in matmul_nt");
  Tape& tape = *a.tape();
  Matrix out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.grad_buffer(a.id()).noalias() += g * t.value(b.id());
    if (t.requires_grad(b)) t.grad_buffer(b.id()).noalias() += g.transpose() * t.value(a.id());
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("autodiff: shape mismatch in add_row");
  }
  Tape& tape = *a.tape();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return tape.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    if (t.requires_grad(row)) t.grad_buffer(row.id()) += g.colwise().sum();
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Tape& tape = *a.tape();
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
  return tape.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a.id());
    Matrix d = x.unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    t.grad_buffer(a.id()).array() += g.array() * d.array();
  });
}

Var saturate(Var a) {
  Tape& tape = *a.tape();
  Matrix out = a.value().unaryExpr([](double v) { return v > 0.0 ? std::log1p(v) : 0.0; });
  return tape.record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a.id());
    Matrix d = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 / (1.0 + v) : 0.0; });
    t.grad_buffer(a.id()).array() += g.array() * d.array();
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw std::invalid_argument("autodiff: shape mismatch in layer_norm");
  }
  Matrix xhat(n, c);
  Eigen::VectorXd rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * rstd(i);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  Tape& tape = *x.tape();
  return tape.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Matrix& g) {
        if (t.requires_grad(gain)) {
          t.grad_buffer(gain.id()) += (g.array() * xhat.array()).colwise().sum().matrix();
        }
        if (t.requires_grad(bias)) t.grad_buffer(bias.id()) += g.colwise().sum();
        if (t.requires_grad(x)) {
          Matrix dxhat = (g.array().rowwise() * t.value(gain.id()).row(0).array()).matrix();
          Matrix& dx = t.grad_buffer(x.id());
          for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const double m1 = dxhat.row(i).mean();
            const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
            dx.row(i).array() += rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
          }
        }
      });
}

Var softmax_rows(Var x, const Matrix* additive_mask) {
  Matrix z = x.value();
  if (additive_mask != nullptr) {
    check_same_shape(z, *additive_mask, "softmax_rows mask");
    z += *additive_mask;
  }
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp();
    // Vectorized exp clamps -inf to a denormal; masked entries must be exactly zero.
    if (additive_mask != nullptr) {
      z.row(i) = (additive_mask->row(i).array() == -INFINITY).select(0.0, z.row(i));
    }
    z.row(i) /= z.row(i).sum();
  }
  Tape& tape = *x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(z), {x}, [x, out_id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out_id);
    Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum();
    Matrix dx = y.array() * (g.array().colwise() - dots.array());
    t.grad_buffer(x.id()) += dx;
  });
}

Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw std::out_of_range("autodiff: slice_rows out of range");
  }
  Tape& tape = *x.tape();
  Matrix out = x.value().middleRows(begin, count);
  return tape.record(std::move(out), {x}, [x, begin, count](Tape& t, const Matrix& g) {
    t.grad_buffer(x.id()).middleRows(begin, count) += g;
  });
}

Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw std::out_of_range("autodiff: slice_cols out of range");
  }
  Tape& tape = *x.tape();
  Matrix out = x.value().middleCols(begin, count);
  return tape.record(std::move(out), {x}, [x, begin, count](Tape& t, const Matrix& g) {
    t.grad_buffer(x.id()).middleCols(begin, count) += g;
  });
}

Var gather_rows(Var x, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("autodiff: gather_rows index");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(rows[i]);
  }
  Tape& tape = *x.tape();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return tape.record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix& dx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var hconcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("autodiff: hconcat of nothing");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("autodiff: shape mismatch in hconcat");
    c += p.cols();
  }
  Matrix out(r, c);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  Tape& tape = *parts.front().tape();
  return tape.record(std::move(out), parts, [ins](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (const Var& p : ins) {
      if (t.requires_grad(p)) t.grad_buffer(p.id()) += g.middleCols(at, p.cols());
      at += p.cols();
    }
  });
}

Var vconcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("autodiff: vconcat of nothing");
  const Eigen::Index c = parts.front().cols();
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("autodiff: shape mismatch in vconcat");
    r += p.rows();
  }
  Matrix out(r, c);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  Tape& tape = *parts.front().tape();
  return tape.record(std::move(out), parts, [ins](Tape& t, const Matrix& g) {
    Eigen::Index at = 0;
    for (const Var& p : ins) {
      if (t.requires_grad(p)) t.grad_buffer(p.id()) += g.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

Var max_rows(Var x) {
  if (x.rows() == 0) throw std::invalid_argument("autodiff: max_rows of empty matrix");
  const Matrix& v = x.value();
  Matrix out(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()), 0);
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < v.rows(); ++r) {
      if (v(r, c) > v(best, c)) best = r;
    }
    arg[static_cast<std::size_t>(c)] = best;
    out(0, c) = v(best, c);
  }
  Tape& tape = *x.tape();
  return tape.record(std::move(out), {x}, [x, arg = std::move(arg)](Tape& t, const Matrix& g) {
    Matrix& dx = t.grad_buffer(x.id());
    for (std::size_t c = 0; c < arg.size(); ++c) {
      dx(arg[c], static_cast<Eigen::Index>(c)) += g(0, static_cast<Eigen::Index>(c));
    }
  });
}

Eigen::RowVectorXd sorted_column_sums(const Matrix& x) {
  Eigen::RowVectorXd out(x.cols());
  if (x.rows() <= 2) {
    // Two-term addition is commutative, so no sort is needed.
    out = x.colwise().sum();
    return out;
  }
  std::vector<double> column(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) column[static_cast<std::size_t>(r)] = x(r, c);
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (double v : column) s += v;
    out(c) = s;
  }
  return out;
}

Var mean_rows(Var x) {
  if (x.rows() == 0) throw std::invalid_argument("autodiff: mean_rows of empty matrix");
  const double n = static_cast<double>(x.rows());
  Matrix out = sorted_column_sums(x.value()) / n;
  Tape& tape = *x.tape();
  return tape.record(std::move(out), {x}, [x, n](Tape& t, const Matrix& g) {
    t.grad_buffer(x.id()).rowwise() += g.row(0) / n;
  });
}

Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  Tape& tape = *x.tape();
  return tape.record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.grad_buffer(x.id()).array() += g(0, 0);
  });
}

Var masked_softmax(Var logits, const std::vector<bool>& active) {
  const Eigen::Index n = logits.rows();
  if (logits.cols() != 1 || static_cast<std::size_t>(n) != active.size()) {
    throw std::invalid_argument("autodiff: masked_softmax expects an n x 1 column");
  }
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (active[static_cast<std::size_t>(i)]) m = std::max(m, logits.value()(i, 0));
  }
  if (!std::isfinite(m)) throw std::invalid_argument("autodiff: masked_softmax with no active entry");
  Matrix out = Matrix::Zero(1, n);
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!active[static_cast<std::size_t>(i)]) continue;
    out(0, i) = std::exp(logits.value()(i, 0) - m);
    z += out(0, i);
  }
  out /= z;
  Tape& tape = *logits.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(out), {logits}, [logits, out_id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(out_id);
    const double dot = (g.array() * y.array()).sum();
    Matrix& dl = t.grad_buffer(logits.id());
    // Inactive entries have y == 0 and receive no gradient.
    for (Eigen::Index i = 0; i < y.cols(); ++i) dl(i, 0) += y(0, i) * (g(0, i) - dot);
  });
}

Var diagonal_cross_entropy(Var scores) {
  const Matrix& s = scores.value();
  if (s.rows() != s.cols() || s.rows() == 0) {
    throw std::invalid_argument("autodiff: diagonal_cross_entropy needs a square matrix");
  }
  const Eigen::Index b = s.rows();
  Matrix probs(b, b);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double m = s.row(i).maxCoeff();
    probs.row(i) = (s.row(i).array() - m).exp();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    total += m + std::log(z) - s(i, i);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(b);
  Tape& tape = *scores.tape();
  return tape.record(std::move(out), {scores},
                     [scores, probs = std::move(probs)](Tape& t, const Matrix& g) {
                       const double f = g(0, 0) / static_cast<double>(probs.rows());
                       Matrix d = probs;
                       d.diagonal().array() -= 1.0;
                       t.grad_buffer(scores.id()) += d * f;
                     });
}

}  // namespace thyme::ad
