#include <cmath>
#include <numbers>

#include "doctest.h"
#include "patchlab/divergences.hpp"
#include "patchlab/objectives.hpp"

using namespace patchlab;
namespace ob = patchlab::objectives;
namespace dv = patchlab::divergences;

namespace {
constexpr double kLn2 = std::numbers::ln2;

RowVector row(std::initializer_list<double> v) {
  RowVector r(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

RowVector random_categorical(Rng& rng, Index n) {
  RowVector p(n);
  for (Index i = 0; i < n; ++i) p(i) = -std::log(1.0 - rng.uniform()) + 1e-3;
  return p / p.sum();
}

Matrix random_rows(Rng& rng, Index rows, Index n) {
  Matrix m(rows, n);
  for (Index i = 0; i < rows; ++i) m.row(i) = random_categorical(rng, n);
  return m;
}

// KL written out independently of the divergences module.
double kl_sum(const RowVector& p, const RowVector& q) {
  double s = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) s += p(i) * std::log(p(i) / q(i));
  return s;
}

}  // namespace

TEST_CASE("erm loss") {
  Matrix onehot(2, 2);
  onehot << 1, 0, 0, 1;
  const std::vector<int> labels{0, 1};
  CHECK(ob::erm_loss(onehot, labels) == doctest::Approx(0.0));
  CHECK(ob::erm_loss(Matrix::Constant(3, 2, 0.5), std::vector<int>{0, 1, 1}) == doctest::Approx(kLn2).epsilon(1e-14));
  Matrix p(3, 3);
  p << 0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.1, 0.1, 0.8;
  const std::vector<int> l{2, 0, 1};
  const double expected = -(std::log(0.5) + std::log(0.6) + std::log(0.1)) / 3.0;
  CHECK(ob::erm_loss(p, l) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("group and subgroup DRO losses") {
  const std::vector<std::optional<double>> two{0.3, 0.7};
  CHECK(ob::gdro_loss(two) == 0.7);
  const std::vector<std::optional<double>> one{0.42};
  CHECK(ob::gdro_loss(one) == 0.42);
  const std::vector<std::optional<double>> none{std::nullopt, std::nullopt};
  CHECK_THROWS_AS(ob::gdro_loss(none), ContractError);

  CHECK(ob::sgdro_loss({{0.3, 0.7}, {0.2, 0.4}}) == doctest::Approx(0.55));
  CHECK(ob::sgdro_loss({{0.3}, {0.5}}) == doctest::Approx(0.4));
  CHECK(ob::sgdro_loss({{0.25, 0.25}, {0.25, 0.25}}) == doctest::Approx(0.25));
  CHECK(ob::sgdro_loss({{0.3, 0.7, 0.1}}) == ob::gdro_loss(std::vector<std::optional<double>>{0.3, 0.7, 0.1}));
  CHECK(ob::sgdro_loss({{0.3, std::nullopt}, {0.5, 0.6}}) == doctest::Approx(0.45));
  CHECK_THROWS_AS(ob::sgdro_loss({{0.3, 0.7}, {std::nullopt, std::nullopt}}), ContractError);

  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::vector<std::optional<double>>> cells(3, std::vector<std::optional<double>>(2));
    std::vector<std::optional<double>> flat;
    for (auto& c : cells)
      for (auto& v : c) {
        v = rng.uniform(0.0, 3.0);
        flat.push_back(v);
      }
    CHECK(ob::sgdro_loss(cells) <= ob::gdro_loss(flat));
  }
}

TEST_CASE("exponentiated-gradient group weights") {
  const std::vector<Index> sizes{10, 10};
  Vector losses(2);
  losses << 1.0, 0.0;
  const auto step = ob::gdro_stochastic_update(ob::GroupWeights::uniform(2, 1.0), losses, sizes, 0.0);
  const double e = std::exp(1.0);
  CHECK(step.state.weights(0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
  CHECK(step.state.weights(1) == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
  CHECK(step.weighted_loss == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));

  const auto frozen = ob::gdro_stochastic_update(ob::GroupWeights::uniform(2, 0.0), losses, sizes, 0.0);
  CHECK(frozen.state.weights(0) == 0.5);
  CHECK(frozen.weighted_loss == doctest::Approx(0.5));

  Vector equal = Vector::Constant(3, 0.8);
  const std::vector<Index> three{5, 6, 7};
  const auto sym = ob::gdro_stochastic_update(ob::GroupWeights::uniform(3, 2.0), equal, three, 0.0);
  for (Index g = 0; g < 3; ++g) CHECK(sym.state.weights(g) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  // adjustment C / sqrt(n): group sizes 4 and 16 with C = 2 add 1 and 0.5
  const std::vector<Index> uneven{4, 16};
  Vector zero = Vector::Zero(2);
  const auto adjusted = ob::gdro_stochastic_update(ob::GroupWeights::uniform(2, 1.0), zero, uneven, 2.0);
  CHECK(adjusted.adjusted_losses(0) == doctest::Approx(1.0));
  CHECK(adjusted.adjusted_losses(1) == doctest::Approx(0.5));
  CHECK(adjusted.state.weights(0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + std::exp(0.5))));

  const std::vector<Index> empty{0, 5};
  CHECK_THROWS_AS(ob::gdro_stochastic_update(ob::GroupWeights::uniform(2, 1.0), zero, empty, 1.0), ParameterError);
}

TEST_CASE("group weights stay on the simplex and concentrate on the worst group") {
  Rng rng(2);
  auto state = ob::GroupWeights::uniform(4, 0.5);
  const std::vector<Index> sizes{3, 9, 27, 81};
  for (int t = 0; t < 500; ++t) {
    Vector l(4);
    for (Index g = 0; g < 4; ++g) l(g) = rng.uniform(0.0, 2.0);
    state = ob::gdro_stochastic_update(state, l, sizes, 0.5).state;
    CHECK(std::abs(state.weights.sum() - 1.0) < 1e-12);
    CHECK((state.weights.array() >= 0.0).all());
  }
  auto hot = ob::GroupWeights::uniform(3, 5.0);
  Vector fixed(3);
  fixed << 0.2, 0.9, 0.5;
  const std::vector<Index> s3{10, 10, 10};
  for (int t = 0; t < 200; ++t) hot = ob::gdro_stochastic_update(hot, fixed, s3, 0.0).state;
  CHECK(hot.weights(1) > 1.0 - 1e-6);
}

TEST_CASE("self-consistency is the JSD of the augmented predictions") {
  CHECK(ob::self_consistency(Matrix::Constant(3, 4, 0.25)) == doctest::Approx(0.0));
  Matrix disjoint(2, 2);
  disjoint << 1, 0, 0, 1;
  CHECK(ob::self_consistency(disjoint) == doctest::Approx(kLn2).epsilon(1e-14));
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const Matrix p = random_rows(rng, 3, 4);
    CHECK(std::abs(ob::self_consistency(p) - dv::jsd(p)) < 1e-12);
  }
}

TEST_CASE("translation consistency is KL(original || mean)") {
  const RowVector m = row({0.3, 0.7});
  CHECK(ob::translation_consistency(m, m) == doctest::Approx(0.0));
  CHECK(ob::translation_consistency(row({1, 0}), row({0.5, 0.5})) == doctest::Approx(kLn2).epsilon(1e-14));
  Rng rng(4);
  bool asymmetric = false;
  for (int t = 0; t < 100 && !asymmetric; ++t) {
    const RowVector p = random_categorical(rng, 3), q = random_categorical(rng, 3);
    asymmetric = std::abs(ob::translation_consistency(p, q) - ob::translation_consistency(q, p)) > 1e-6;
  }
  CHECK(asymmetric);
}

TEST_CASE("total consistency") {
  Rng rng(5);
  MlpModel model({3, 4, 2}, rng);
  ob::AugmentedBatch batch;
  batch.k = 2;
  batch.originals = Matrix::Random(3, 3);
  batch.labels = {0, 1, 0};
  batch.augmented = Matrix::Random(6, 3);
  const auto preds = ob::predict(model, batch);
  double expected = 0.0;
  for (Index i = 0; i < 3; ++i) {
    const Matrix block = preds.augmented.middleRows(i * 2, 2);
    const RowVector mean = block.colwise().mean();
    CHECK((mean - preds.mean.row(i)).cwiseAbs().maxCoeff() < 1e-15);
    expected += 0.5 * (dv::jsd(block) + kl_sum(preds.original.row(i), mean));
  }
  CHECK(ob::total_consistency(preds) == doctest::Approx(expected / 3.0).epsilon(1e-12));

  ob::AugmentedPredictions same;
  same.k = 2;
  same.original = Matrix::Constant(2, 2, 0.5);
  same.augmented = Matrix::Constant(4, 2, 0.5);
  same.mean = Matrix::Constant(2, 2, 0.5);
  CHECK(ob::total_consistency(same) == doctest::Approx(0.0));

  // mean over a concatenation = count-weighted mean of the parts
  ob::AugmentedPredictions first, second;
  first.k = second.k = 2;
  first.original = preds.original.topRows(1);
  first.augmented = preds.augmented.topRows(2);
  first.mean = preds.mean.topRows(1);
  second.original = preds.original.bottomRows(2);
  second.augmented = preds.augmented.bottomRows(4);
  second.mean = preds.mean.bottomRows(2);
  CHECK(ob::total_consistency(preds) ==
        doctest::Approx((ob::total_consistency(first) + 2.0 * ob::total_consistency(second)) / 3.0).epsilon(1e-12));
}

TEST_CASE("camel objective and lambda annealing") {
  ob::ConsistencyConfig c{.lambda_target = 2.0, .anneal_rate = 0.0, .current = 0.0};
  CHECK(ob::camel_objective(0.7, 0.3, c) == 0.7);
  c.current = 2.0;
  CHECK(ob::camel_objective(0.5, 0.25, c) == doctest::Approx(1.0));
  CHECK(ob::camel_objective(0.5, 0.0, c) == 0.5);
  double previous = -1.0;
  for (double l = 0.0; l <= 10.0; l += 0.5) {
    c.current = l;
    const double v = ob::camel_objective(0.4, 0.1, c);
    CHECK(v >= previous);
    previous = v;
  }

  ob::ConsistencyConfig a{.lambda_target = 50.0, .anneal_rate = 0.005, .current = 0.0};
  CHECK(ob::anneal_lambda(a, 1000).current == doctest::Approx(5.0));
  CHECK(ob::anneal_lambda(a, 1000000).current == 50.0);
  CHECK(ob::anneal_lambda(a, 0).current == 0.0);
  a.anneal_rate = 0.0;
  CHECK(ob::anneal_lambda(a, 0).current == 50.0);
  a.anneal_rate = -1.0;
  CHECK_THROWS_AS(ob::anneal_lambda(a, 3), ParameterError);
}

TEST_CASE("UDA and AugMix alternatives") {
  Matrix same = Matrix::Constant(2, 3, 1.0 / 3.0);
  CHECK(ob::uda_consistency(same.row(0), same) == doctest::Approx(0.0));
  CHECK(ob::augmix_consistency(same.row(0), same) == doctest::Approx(0.0));
  Matrix half(1, 2);
  half << 0.5, 0.5;
  CHECK(ob::uda_consistency(row({1, 0}), half) == doctest::Approx(kLn2).epsilon(1e-14));
  Matrix other(1, 2);
  other << 0, 1;
  CHECK(ob::augmix_consistency(row({1, 0}), other) == doctest::Approx(kLn2).epsilon(1e-14));

  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const RowVector o = random_categorical(rng, 4);
    const Matrix aug = random_rows(rng, 3, 4);
    Matrix doubled(6, 4);
    doubled << aug, aug;
    CHECK(ob::uda_consistency(o, doubled) == doctest::Approx(2.0 * ob::uda_consistency(o, aug)).epsilon(1e-12));
    Matrix all(4, 4);
    all << o, aug;
    CHECK(std::abs(ob::augmix_consistency(o, aug) - dv::jsd(all)) < 1e-12);
  }
}

TEST_CASE("differentiable terms match their plain counterparts") {
  Rng rng(7);
  MlpModel model({3, 5, 3}, rng);
  ob::AugmentedBatch batch;
  batch.k = 2;
  batch.originals = Matrix::Random(4, 3);
  batch.labels = {0, 2, 1, 1};
  batch.augmented = Matrix::Random(8, 3);
  const auto preds = ob::predict(model, batch);
  auto original = model.logits(ad::constant(batch.originals));
  auto augmented = model.logits(ad::constant(batch.augmented));
  CHECK(ob::consistency_loss(original, augmented, 2).scalar() == doctest::Approx(ob::total_consistency(preds)).epsilon(1e-12));
  double uda = 0.0, augmix = 0.0;
  for (Index i = 0; i < 4; ++i) {
    uda += ob::uda_consistency(preds.original.row(i), preds.augmented.middleRows(i * 2, 2));
    augmix += ob::augmix_consistency(preds.original.row(i), preds.augmented.middleRows(i * 2, 2));
  }
  CHECK(ob::consistency_loss(original, augmented, 2, ob::ConsistencyKind::uda).scalar() ==
        doctest::Approx(uda / 4.0).epsilon(1e-12));
  CHECK(ob::consistency_loss(original, augmented, 2, ob::ConsistencyKind::augmix).scalar() ==
        doctest::Approx(augmix / 4.0).epsilon(1e-12));
  const auto ce = ob::cross_entropy(original, batch.labels);
  CHECK(ad::mean(ce).scalar() == doctest::Approx(ob::erm_loss(preds.original, batch.labels)).epsilon(1e-12));
  Vector w(4);
  w << 0.1, 0.2, 0.3, 0.4;
  double weighted = 0.0;
  for (Index i = 0; i < 4; ++i) weighted += w(i) * ce.value()(i, 0);
  CHECK(ob::weighted_sum(ce, w).scalar() == doctest::Approx(weighted).epsilon(1e-14));
}

TEST_CASE("camel objective gradient matches central differences") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    MlpModel model({3, 6, 2}, rng);
    const Matrix x = Matrix::Random(5, 3), aug = Matrix::Random(10, 3);
    const std::vector<int> labels{0, 1, 1, 0, 1};
    Vector w(5);
    for (Index i = 0; i < 5; ++i) w(i) = rng.uniform(0.05, 0.4);
    const double lambda = rng.uniform(0.5, 5.0);
    auto build = [&] {
      auto logits = model.logits(ad::constant(x));
      auto sgdro = ob::weighted_sum(ob::cross_entropy(logits, labels), w);
      return ad::add(sgdro, ad::scale(ob::consistency_loss(logits, model.logits(ad::constant(aug)), 2), lambda));
    };
    auto params = model.parameters();
    model.zero_grad();
    ad::backward(build());
    std::vector<Matrix> analytic;
    for (auto* p : params) analytic.push_back(p->grad);
    const auto numeric = finite_difference_gradient([&] { return build().scalar(); }, params, 1e-6);
    CHECK(relative_error(analytic, numeric) < 1e-5);
  }
}
