#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "thyme/autodiff.hpp"
#include "thyme/rng.hpp"

using namespace thyme;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// Builds loss = sum(f(inputs) .* weights) and compares the tape gradient of
/// every input against central differences.
double max_grad_error(std::vector<Matrix> inputs, const std::function<Var(Tape&, std::vector<Var>&)>& f,
                      std::uint64_t seed = 11) {
  Rng rng(seed);
  Matrix weights;
  auto loss = [&](const std::vector<Matrix>& values, std::vector<Matrix>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& v : values) vars.push_back(tape.variable(v));
    Var out = f(tape, vars);
    if (weights.size() == 0) weights = random_matrix(rng, out.rows(), out.cols());
    Var l = ad::sum(ad::hadamard(out, tape.constant(weights)));
    if (grads != nullptr) {
      tape.backward(l);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return l.value()(0, 0);
  };
  std::vector<Matrix> grads;
  loss(inputs, &grads);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + h;
      const double up = loss(inputs, nullptr);
      inputs[k].data()[i] = saved - h;
      const double down = loss(inputs, nullptr);
      inputs[k].data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = grads[k].data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
  Rng rng(1);
  const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 3, 4), c = random_matrix(rng, 4, 2);
  const Matrix row = random_matrix(rng, 1, 4);
  CHECK(max_grad_error({a, b}, [](Tape&, auto& v) { return ad::add(v[0], v[1]); }) < 1e-7);
  CHECK(max_grad_error({a, b}, [](Tape&, auto& v) { return ad::sub(v[0], v[1]); }) < 1e-7);
  CHECK(max_grad_error({a}, [](Tape&, auto& v) { return ad::scale(v[0], -2.5); }) < 1e-7);
  CHECK(max_grad_error({a}, [](Tape&, auto& v) { return ad::square(v[0]); }) < 1e-7);
  CHECK(max_grad_error({a, c}, [](Tape&, auto& v) { return ad::matmul(v[0], v[1]); }) < 1e-7);
  CHECK(max_grad_error({a, b}, [](Tape&, auto& v) { return ad::matmul_nt(v[0], v[1]); }) < 1e-7);
  CHECK(max_grad_error({a, row}, [](Tape&, auto& v) { return ad::add_row(v[0], v[1]); }) < 1e-7);
  CHECK(max_grad_error({a}, [](Tape&, auto& v) { return ad::gelu(v[0]); }) < 1e-6);
  CHECK(max_grad_error({a, b}, [](Tape&, auto& v) { return ad::hadamard(v[0], v[1]); }) < 1e-7);
}

TEST_CASE("saturate gradient away from the kink") {
  Rng rng(2);
  Matrix x = random_matrix(rng, 4, 5, -2.0, 2.0);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.3;
  }
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::saturate(v[0]); }) < 1e-6);
  Tape tape;
  const Var s = ad::saturate(tape.constant(Matrix::Constant(1, 3, -1.0)));
  CHECK(s.value().isZero());
}

TEST_CASE("layer norm and softmax gradients") {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 3, 6), gain = random_matrix(rng, 1, 6), bias = random_matrix(rng, 1, 6);
  CHECK(max_grad_error({x, gain, bias}, [](Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }) < 1e-5);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::softmax_rows(v[0]); }) < 1e-6);
  Matrix mask = Matrix::Zero(3, 6);
  mask(0, 2) = mask(1, 5) = -INFINITY;
  CHECK(max_grad_error({x}, [&](Tape&, auto& v) { return ad::softmax_rows(v[0], &mask); }) < 1e-6);

  Tape tape;
  const Var p = ad::softmax_rows(tape.constant(x), &mask);
  for (Eigen::Index r = 0; r < 3; ++r) CHECK(p.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.value()(0, 2) == 0.0);
}

TEST_CASE("indexing ops route gradients") {
  Rng rng(4);
  const Matrix x = random_matrix(rng, 5, 3);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::slice_rows(v[0], 1, 3); }) < 1e-7);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::slice_cols(v[0], 1, 2); }) < 1e-7);
  const std::vector<Eigen::Index> rows{4, 0, 4, 2};
  CHECK(max_grad_error({x}, [&](Tape&, auto& v) { return ad::gather_rows(v[0], rows); }) < 1e-7);
  CHECK(max_grad_error({x, x}, [](Tape&, auto& v) { return ad::hconcat(std::vector<Var>{v[0], v[1]}); }) < 1e-7);
  CHECK(max_grad_error({x, x}, [](Tape&, auto& v) { return ad::vconcat(std::vector<Var>{v[1], v[0]}); }) < 1e-7);

  Tape tape;
  const Var a = tape.variable(x);
  tape.backward(ad::sum(ad::gather_rows(a, rows)));
  const Matrix g = tape.grad(a);
  CHECK(g(4, 0) == 2.0);
  CHECK(g(1, 0) == 0.0);
}

TEST_CASE("reductions") {
  Rng rng(5);
  const Matrix x = random_matrix(rng, 4, 3);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::max_rows(v[0]); }) < 1e-7);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::mean_rows(v[0]); }) < 1e-7);
  CHECK(max_grad_error({x}, [](Tape&, auto& v) { return ad::sum(v[0]); }) < 1e-7);

  SUBCASE("max ties route to the lowest row") {
    Tape tape;
    const Var a = tape.variable(Matrix::Constant(3, 2, 1.5));
    tape.backward(ad::sum(ad::max_rows(a)));
    const Matrix g = tape.grad(a);
    CHECK(g(0, 0) == 1.0);
    CHECK(g(1, 0) == 0.0);
    CHECK(g(2, 1) == 0.0);
  }
  SUBCASE("column sums do not depend on row order") {
    Matrix y = random_matrix(rng, 7, 5, -1e3, 1e3);
    const auto base = ad::sorted_column_sums(y);
    Matrix flipped = y.colwise().reverse();
    CHECK(ad::sorted_column_sums(flipped) == base);
  }
}

TEST_CASE("masked softmax and diagonal cross entropy") {
  Rng rng(6);
  const Matrix logits = random_matrix(rng, 3, 1);
  const std::vector<bool> two{true, false, true};
  CHECK(max_grad_error({logits}, [&](Tape&, auto& v) { return ad::masked_softmax(v[0], two); }) < 1e-6);
  Tape tape;
  const Var g = ad::masked_softmax(tape.constant(logits), two);
  CHECK(g.value()(0, 1) == 0.0);
  CHECK(g.value().sum() == doctest::Approx(1.0).epsilon(1e-14));

  const Matrix s = random_matrix(rng, 3, 3);
  CHECK(max_grad_error({s}, [](Tape&, auto& v) { return ad::diagonal_cross_entropy(v[0]); }) < 1e-6);
  Matrix eye(2, 2);
  eye << 1, 0, 0, 1;
  Tape t2;
  CHECK(ad::diagonal_cross_entropy(t2.constant(eye)).value()(0, 0) ==
        doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
}

TEST_CASE("constants receive no gradient and tapes reuse buffers") {
  Tape tape;
  const Var a = tape.variable(Matrix::Constant(2, 2, 1.0));
  const Var c = tape.constant(Matrix::Constant(2, 2, 3.0));
  CHECK_FALSE(tape.requires_grad(c));
  tape.backward(ad::sum(ad::hadamard(a, c)));
  CHECK(tape.grad(a).isApprox(Matrix::Constant(2, 2, 3.0)));
}
