#include <cmath>
#include <vector>

#include "doctest.h"
#include "patchlab/autodiff.hpp"
#include "patchlab/error.hpp"
#include "patchlab/mlp.hpp"

using namespace patchlab;

namespace {
Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}
}  // namespace

TEST_CASE("square has derivative 2w") {
  Parameter w("w", scalar_matrix(3.0));
  auto x = ad::param(w);
  ad::backward(ad::mul(x, x));
  CHECK(w.grad(0, 0) == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("softmax cross-entropy gradient is p - onehot") {
  Matrix z(2, 3);
  z << 0.5, -1.0, 2.0, 0.0, 0.3, -0.7;
  Parameter logits("z", z);
  const std::vector<int> labels{2, 0};
  auto lp = ad::log_softmax(ad::param(logits));
  ad::backward(ad::scale(ad::sum(ad::pick(lp, labels)), -1.0));
  const Matrix p = softmax_rows(z);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j) {
      const double expected = p(i, j) - (labels[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0);
      CHECK(logits.grad(i, j) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("backward rejects non-scalar loss") {
  Parameter w("w", Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ad::backward(ad::param(w)), ContractError);
}

TEST_CASE("shape errors surface from mismatched operands") {
  auto a = ad::constant(Matrix::Ones(2, 3));
  auto b = ad::constant(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
}

TEST_CASE("composite graph without reversal matches finite differences") {
  Rng rng(5);
  Matrix a0(4, 3), b0(3, 3), r0(1, 3);
  for (Index i = 0; i < a0.size(); ++i) a0.data()[i] = rng.uniform(0.2, 1.5);
  for (Index i = 0; i < b0.size(); ++i) b0.data()[i] = rng.uniform(-1.0, 1.0);
  for (Index i = 0; i < r0.size(); ++i) r0.data()[i] = rng.uniform(-1.0, 1.0);
  Parameter a("a", a0), b("b", b0), r("r", r0);
  std::vector<Parameter*> params{&a, &b, &r};
  const std::vector<Index> rows{3, 0, 0, 2};
  const std::vector<int> picks{1, 2, 0, 1, 1, 0, 2, 2};
  auto build = [&]() {
    auto va = ad::param(a), vb = ad::param(b), vr = ad::param(r);
    auto h = ad::add_row(ad::matmul(va, vb), vr);
    auto m = ad::mul(ad::sigmoid(h), ad::abs(ad::sub(ad::log(va), h)));
    auto stacked = ad::vstack(std::vector<ad::Var>{m, ad::select_rows(ad::softmax(h), rows)});
    auto blocks = ad::add(ad::block_mean(stacked, 2), ad::select_rows(ad::repeat_rows(vr, 4), rows));
    auto lsm = ad::log_softmax(ad::add(blocks, ad::relu(h)));
    auto picked = ad::pick(ad::vstack(std::vector<ad::Var>{lsm, lsm}), picks);
    return ad::add(ad::mean(ad::row_sum(ad::scale(ad::add_scalar(m, 0.3), 0.7))),
                   ad::sum(ad::block_sum(picked, 4)));
  };
  for (auto* p : params) p->zero_grad();
  ad::backward(build());
  std::vector<Matrix> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  const auto numeric = finite_difference_gradient([&] { return build().scalar(); }, params, 1e-6);
  CHECK(relative_error(analytic, numeric) < 1e-7);
}

TEST_CASE("gradient reversal flips and scales the upstream gradient") {
  Parameter w("w", scalar_matrix(2.0));
  auto x = ad::param(w);
  auto y = ad::gradient_reversal(ad::mul(x, x), 0.25);
  CHECK(y.scalar() == 4.0);
  ad::backward(y);
  CHECK(w.grad(0, 0) == doctest::Approx(-0.25 * 4.0));
}

TEST_CASE("parameter used twice accumulates both paths") {
  Parameter w("w", scalar_matrix(1.5));
  ad::backward(ad::add(ad::param(w), ad::scale(ad::param(w), 3.0)));
  CHECK(w.grad(0, 0) == doctest::Approx(4.0));
}
