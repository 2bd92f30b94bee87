#include <cmath>
#include <numbers>

#include "doctest.h"
#include "patchlab/divergences.hpp"
#include "patchlab/random.hpp"

using namespace patchlab;
namespace dv = patchlab::divergences;

namespace {
constexpr double kLn2 = std::numbers::ln2;

RowVector random_categorical(Rng& rng, Index n, double zero_probability = 0.0) {
  RowVector p(n);
  for (Index i = 0; i < n; ++i) p(i) = rng.uniform() < zero_probability ? 0.0 : -std::log(1.0 - rng.uniform());
  if (p.sum() == 0.0) p(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)))) = 1.0;
  return p / p.sum();
}

RowVector make(std::initializer_list<double> v) {
  RowVector r(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

// Maximizes a concave scalar function on (0, 1) by grid search followed by
// ternary refinement. Independent of any closed form.
template <typename F>
double maximize_unit_interval(F f) {
  constexpr int kGrid = 20000;
  int best = 1;
  double best_value = f(1.0 / kGrid);
  for (int i = 2; i < kGrid; ++i) {
    const double v = f(static_cast<double>(i) / kGrid);
    if (v > best_value) {
      best_value = v;
      best = i;
    }
  }
  double lo = std::max(1e-300, (best - 1.0) / kGrid), hi = std::min(1.0 - 1e-16, (best + 1.0) / kGrid);
  for (int it = 0; it < 200; ++it) {
    const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
    if (f(m1) < f(m2)) lo = m1; else hi = m2;
  }
  return f(0.5 * (lo + hi));
}

// max over D in (0,1)^n of E_p log D + E_q log(1-D), coordinatewise.
double discriminator_grid_max(const RowVector& p, const RowVector& q) {
  double total = 0.0;
  for (Index a = 0; a < p.size(); ++a) {
    const double pa = p(a), qa = q(a);
    total += maximize_unit_interval([&](double d) {
      return (pa > 0 ? pa * std::log(d) : 0.0) + (qa > 0 ? qa * std::log(1.0 - d) : 0.0);
    });
  }
  return total;
}
}  // namespace

TEST_CASE("kl closed forms") {
  const auto p = make({0.2, 0.5, 0.3});
  CHECK(dv::kl(p, p) == 0.0);
  CHECK(dv::kl(make({1, 0}), make({0.5, 0.5})) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(std::isinf(dv::kl(make({1, 0}), make({0, 1}))));
  CHECK_THROWS_AS(dv::kl(make({1, 0}), make({0.2, 0.3, 0.5})), ShapeError);
  CHECK_THROWS_AS(dv::kl(make({0.6, 0.6}), make({0.5, 0.5})), ContractError);
}

TEST_CASE("kl is non-negative and vanishes only at equality") {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto p = random_categorical(rng, 5), q = random_categorical(rng, 5);
    const double d = dv::kl(p, q);
    CHECK(d >= 0.0);
    if ((p - q).cwiseAbs().maxCoeff() > 1e-6) CHECK(d > 1e-12);
  }
}

TEST_CASE("jsd closed forms and bounds") {
  const auto p = make({0.1, 0.9});
  Matrix same(3, 2);
  same << p, p, p;
  CHECK(dv::jsd(same) < 1e-15);
  CHECK(dv::jsd(make({1, 0}), make({0, 1})) == doctest::Approx(kLn2).epsilon(1e-15));
  for (Index k = 2; k <= 6; ++k) {
    const Matrix disjoint = Matrix::Identity(k, k);
    CHECK(dv::jsd(disjoint) == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-14));
  }
  CHECK_THROWS_AS(dv::jsd(Matrix(p)), ContractError);
}

TEST_CASE("jsd is permutation symmetric and bounded by log k") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const Index k = 2 + static_cast<Index>(rng.below(4));
    Matrix rows(k, 6);
    for (Index i = 0; i < k; ++i) rows.row(i) = random_categorical(rng, 6, 0.2);
    const double value = dv::jsd(rows);
    CHECK(value >= 0.0);
    CHECK(value <= std::log(static_cast<double>(k)) + 1e-12);
    Matrix reversed = rows.colwise().reverse();
    CHECK(std::abs(dv::jsd(reversed) - value) < 1e-14);
  }
}

TEST_CASE("sqrt jsd triangle gap") {
  const auto p = make({0.3, 0.7}), r = make({0.9, 0.1});
  CHECK(dv::jsd_metric_gap(p, p, p) == 0.0);
  CHECK(std::abs(dv::jsd_metric_gap(p, p, r)) < 1e-15);
  Rng rng(23);
  double worst = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_categorical(rng, 4, 0.3), b = random_categorical(rng, 4, 0.3),
               c = random_categorical(rng, 4, 0.3);
    worst = std::min(worst, dv::jsd_metric_gap(a, b, c));
  }
  CHECK(worst >= -1e-9);
}

TEST_CASE("mixture mutual information equals jsd") {
  Matrix same(2, 3);
  same << 0.2, 0.3, 0.5, 0.2, 0.3, 0.5;
  CHECK(dv::mixture_mutual_information(same) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(dv::mixture_mutual_information(Matrix::Identity(3, 3)) == doctest::Approx(std::log(3.0)));
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Index k = 2 + static_cast<Index>(rng.below(4));
    Matrix rows(k, 5);
    for (Index r = 0; r < k; ++r) rows.row(r) = random_categorical(rng, 5, 0.2);
    CHECK(std::abs(dv::mixture_mutual_information(rows) - dv::jsd(rows)) < 1e-10);
  }
}

TEST_CASE("optimal discriminator loss") {
  const auto p = make({0.25, 0.25, 0.5});
  CHECK(dv::optimal_discriminator_loss(p, p) == doctest::Approx(-kLn2).epsilon(1e-15));
  CHECK(std::abs(dv::optimal_discriminator_loss(make({0.5, 0.5, 0}), make({0, 0, 1}))) < 1e-15);
  Rng rng(29);
  for (int i = 0; i < 50; ++i) {
    const auto a = random_categorical(rng, 4, 0.2), b = random_categorical(rng, 4, 0.2);
    const double closed = dv::optimal_discriminator_loss(a, b);
    CHECK(std::abs(closed - (dv::jsd(a, b) - kLn2)) < 1e-10);
    CHECK(std::abs(closed - 0.5 * discriminator_grid_max(a, b)) < 1e-6);
    // Any discriminator does no better than the optimum.
    RowVector d(4);
    for (Index j = 0; j < 4; ++j) d(j) = rng.uniform(0.01, 0.99);
    CHECK(dv::discriminator_objective(a, b, d) <= closed + 1e-12);
  }
}

TEST_CASE("pair-conditioned discriminator distance") {
  const auto p = make({0.6, 0.4});
  CHECK(dv::pair_discriminator_distance(p, p) == doctest::Approx(-kLn2).epsilon(1e-15));
  CHECK(dv::pair_discriminator_distance(make({1, 0}), make({0, 1})) == doctest::Approx(kLn2).epsilon(1e-15));
  Rng rng(31);
  for (int i = 0; i < 30; ++i) {
    const auto a = random_categorical(rng, 3), b = random_categorical(rng, 3);
    const double numeric = discriminator_grid_max(a, b) + kLn2;
    CHECK(std::abs(dv::pair_discriminator_distance(a, b) - numeric) < 1e-6);
    CHECK(std::abs(dv::pair_discriminator_distance(a, b) - (2 * dv::jsd(a, b) - kLn2)) < 1e-10);
  }
}

TEST_CASE("weighted jsd equals mixture information for any weights") {
  Rng rng(41);
  for (int i = 0; i < 100; ++i) {
    Matrix rows(3, 4);
    for (Index r = 0; r < 3; ++r) rows.row(r) = random_categorical(rng, 4);
    Vector w = random_categorical(rng, 3).transpose();
    // Direct joint enumeration.
    double mi = 0.0;
    RowVector px = RowVector::Zero(4);
    for (Index r = 0; r < 3; ++r) px += w(r) * rows.row(r);
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c < 4; ++c) mi += dv::relative_entropy_term(w(r) * rows(r, c), w(r) * px(c));
    CHECK(std::abs(dv::weighted_jsd(rows, w) - mi) < 1e-12);
  }
}
