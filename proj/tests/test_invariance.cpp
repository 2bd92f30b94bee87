#include <cmath>
#include <map>
#include <numbers>

#include "doctest.h"
#include "json.hpp"
#include "patchlab/divergences.hpp"
#include "patchlab/error.hpp"
#include "patchlab/harness.hpp"
#include "patchlab/invariance.hpp"

using namespace patchlab;
using namespace patchlab::invariance;

namespace {
constexpr double kLn2 = std::numbers::ln2;

data::CoupledWorld world_k(int k, std::uint64_t seed, int latents = 4, Index dim = 3) {
  data::WorldOptions o;
  o.num_classes = 2;
  o.subgroups_per_class = k;
  o.latents_per_class = latents;
  o.input_dim = dim;
  o.seed = seed;
  return data::CoupledWorld(o);
}

Predictor constant_predictor(int classes) {
  return [classes](const Matrix& x) { return Matrix::Constant(x.rows(), classes, 1.0 / classes); };
}

// One-hot of the subgroup that rendered each input, looked up by exact row.
Predictor subgroup_indicator(const data::CoupledWorld& world) {
  std::map<std::vector<double>, int> lookup;
  const auto all = world.enumerate();
  for (Index i = 0; i < all.size(); ++i)
    lookup[std::vector<double>(all.x.row(i).begin(), all.x.row(i).end())] = all.z[static_cast<std::size_t>(i)];
  const int k = world.subgroups_per_class();
  return [lookup, k](const Matrix& x) {
    Matrix out = Matrix::Zero(x.rows(), k);
    for (Index i = 0; i < x.rows(); ++i) out(i, lookup.at(std::vector<double>(x.row(i).begin(), x.row(i).end()))) = 1.0;
    return out;
  };
}

MlpModel random_model(Index input, Index classes, Rng& rng) {
  MlpModel m({input, 6, classes}, rng);
  const double scale = rng.uniform(0.5, 4.0);
  for (auto& layer : m.layers()) layer.weight.value *= scale;
  return m;
}

// Entropy of a marginal; the test's own route to conditional MI:
// I(A;B|C) = H(A,C) + H(B,C) - H(A,B,C) - H(C).
double entropy(const FiniteJoint& joint, const std::vector<std::string>& vars) {
  std::vector<std::size_t> idx;
  for (const auto& v : vars) idx.push_back(joint.variable(v));
  const Vector p = joint.marginal(idx);
  double h = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  return h;
}

double mi_by_entropies(const FiniteJoint& j, std::vector<std::string> a, std::vector<std::string> b,
                       std::vector<std::string> c) {
  auto cat = [](std::vector<std::string> x, const std::vector<std::string>& y) {
    x.insert(x.end(), y.begin(), y.end());
    return x;
  };
  const double hc = c.empty() ? 0.0 : entropy(j, c);
  return entropy(j, cat(a, c)) + entropy(j, cat(b, c)) - entropy(j, cat(cat(a, b), c)) - hc;
}

}  // namespace

TEST_CASE("exact conditional MI on hand-built joints") {
  FiniteJoint independent({"a", "b", "c"}, {2, 3, 2});
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 2; ++c) {
        const int o[3] = {a, b, c};
        independent.add(o, (a ? 0.3 : 0.7) * (b + 1) / 6.0 * 0.5);
      }
  CHECK(exact_conditional_mi(independent, {"a"}, {"b"}, {"c"}) < 1e-15);

  FiniteJoint copy({"a", "b"}, {2, 2});
  const int o00[2] = {0, 0}, o11[2] = {1, 1};
  copy.add(o00, 0.5);
  copy.add(o11, 0.5);
  CHECK(exact_conditional_mi(copy, {"a"}, {"b"}) == doctest::Approx(kLn2).epsilon(1e-14));
  CHECK_THROWS_AS(exact_conditional_mi(copy, {"a"}, {"nope"}), ContractError);
}

TEST_CASE("chain rule on random joints") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    FiniteJoint j({"z", "coupled", "yhat", "y"}, {2, 3, 2, 2});
    Vector w(24);
    for (Index i = 0; i < 24; ++i) w(i) = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    w /= w.sum();
    Index n = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 3; ++b)
        for (int c = 0; c < 2; ++c)
          for (int d = 0; d < 2; ++d) {
            const int o[4] = {a, b, c, d};
            j.add(o, w(n++));
          }
    const double lhs = exact_conditional_mi(j, {"z"}, {"coupled", "yhat"}, {"y"});
    const double rhs = exact_conditional_mi(j, {"z"}, {"coupled"}, {"y"}) +
                       exact_conditional_mi(j, {"z"}, {"yhat"}, {"coupled", "y"});
    CHECK(std::abs(lhs - rhs) < 1e-10);
    CHECK(std::abs(lhs - mi_by_entropies(j, {"z"}, {"coupled", "yhat"}, {"y"})) < 1e-10);
  }
}

TEST_CASE("coupled MI equals the expected JSD of coupled predictions") {
  const auto world = world_k(2, 3);
  const auto flat = coupled_mi_as_jsd(constant_predictor(2), world);
  CHECK(flat.mi < 1e-15);
  CHECK(flat.expected_jsd < 1e-15);
  const auto indicator = coupled_mi_as_jsd(subgroup_indicator(world), world);
  CHECK(indicator.mi == doctest::Approx(kLn2).epsilon(1e-14));
  CHECK(indicator.expected_jsd == doctest::Approx(kLn2).epsilon(1e-14));

  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto w = world_k(2 + static_cast<int>(rng.below(2)), rng.next());
    const auto model = random_model(w.input_dim(), 2, rng);
    const auto r = coupled_mi_as_jsd(predictor(model), w);
    CHECK(std::abs(r.mi - r.expected_jsd) < 1e-10);
    // second path: the JSD average written out here
    const auto all = w.enumerate();
    const Matrix p = forward(model, all.x);
    const int k = w.subgroups_per_class();
    double expected = 0.0;
    for (Index s = 0; s < all.size() / k; ++s) {
      const int y = all.y[static_cast<std::size_t>(s * k)];
      double mass = 0.0;
      for (int z = 0; z < k; ++z) mass += w.weight(y, z, static_cast<int>(all.coupled_id[static_cast<std::size_t>(s * k)] % w.latents_per_class()));
      expected += mass * divergences::jsd(p.middleRows(s * k, k));
    }
    CHECK(std::abs(r.expected_jsd - expected) < 1e-10);
  }
}

TEST_CASE("chain-rule gap is non-negative and sometimes strict") {
  const auto world = world_k(2, 4);
  CHECK(std::abs(chain_rule_gap(constant_predictor(2), world)) < 1e-15);
  CHECK(chain_rule_gap(subgroup_indicator(world), world) >= -1e-9);
  Rng rng(3);
  bool strict = false;
  for (int t = 0; t < 30; ++t) {
    const auto w = world_k(2, rng.next());
    const double gap = chain_rule_gap(predictor(random_model(w.input_dim(), 2, rng)), w);
    CHECK(gap >= -1e-9);
    strict = strict || gap > 1e-4;
  }
  CHECK(strict);
}

TEST_CASE("bound audit: equality with exact translators, slack otherwise") {
  const auto world = world_k(2, 5);
  Rng rng(4);
  const auto model = random_model(world.input_dim(), 2, rng);
  const auto exact = deterministic(translate::analytic_translators(world));
  const auto eq = verify_theorem1(predictor(model), world, exact);
  CHECK(std::abs(eq.lhs - eq.rhs) < 1e-10);
  CHECK(eq.mean_translation_gap[0] < 1e-15);
  CHECK(eq.lhs == doctest::Approx(coupled_mi_as_jsd(predictor(model), world).mi).epsilon(1e-12));

  const auto flat = verify_theorem1(constant_predictor(2), world, random_imperfect_translator(world, 9));
  CHECK(flat.lhs < 1e-15);
  CHECK(flat.slack == doctest::Approx(flat.rhs));
  CHECK(flat.rhs >= 0.0);

  const auto noisy = verify_theorem1(predictor(model), world, random_imperfect_translator(world, 10));
  CHECK(noisy.slack >= -1e-9);
  const auto j = nlohmann::json::parse(noisy.to_json());
  CHECK(j.at("lhs").get<double>() == noisy.lhs);
  CHECK(j.at("mean_translation_gap").size() == 2);

  CHECK(data_processing_gap(predictor(model), world, random_imperfect_translator(world, 11)) <= 1e-9);

  CHECK_THROWS_AS(verify_theorem1(constant_predictor(2), world_k(3, 6), exact), ContractError);
  auto skewed = world_k(2, 7);
  Matrix sub(2, 2);
  sub << 0.3, 0.7, 0.5, 0.5;
  skewed.set_weights(Vector::Constant(2, 0.5), sub, Matrix::Constant(2, 4, 0.25));
  CHECK_THROWS_AS(verify_theorem1(constant_predictor(2), skewed, deterministic(translate::analytic_translators(skewed))),
                  ContractError);
}

TEST_CASE("imperfect translators are fixed functions of their inputs") {
  const auto world = world_k(2, 8);
  const auto t = random_imperfect_translator(world, 3);
  const RowVector x = world.render(1, 0, 2);
  const auto a = t(1, 0, 1, x), b = t(1, 0, 1, x);
  CHECK(a.points == b.points);
  CHECK(a.probabilities == b.probabilities);
  CHECK(std::abs(a.probabilities.sum() - 1.0) < 1e-12);
  CHECK((a.points.row(0).array() == world.render(1, 1, 2).array()).all());
}

TEST_CASE("variational estimate: independence, copying, lower bound") {
  Rng rng(5);
  const Index n = 8000;
  Matrix noise(n, 2);
  std::vector<int> y(n), z(n);
  for (Index i = 0; i < n; ++i) {
    noise(i, 0) = rng.normal();
    noise(i, 1) = rng.normal();
    y[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
    z[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(2));
  }
  HeadConfig config;
  CHECK(variational_mi_estimate(noise, y, z, 2, 2, config).estimate <= 0.02);

  Matrix copy(n, 1);
  for (Index i = 0; i < n; ++i) copy(i, 0) = z[static_cast<std::size_t>(i)];
  const auto e = variational_mi_estimate(copy, y, z, 2, 2, config);
  CHECK(e.estimate >= kLn2 - 0.05);

  for (std::uint64_t s = 100; s < 105; ++s) {
    const auto p = harness::known_mi_problem(s, 20000);
    config.seed = s;
    const auto est = variational_mi_estimate(p.features, p.y, p.z, p.num_classes, p.subgroups_per_class, config);
    CHECK(est.estimate <= p.mutual_information + 0.02);
  }
  CHECK_THROWS_AS(variational_mi_estimate(copy, std::vector<int>(5, 0), z, 2, 2, config), ShapeError);
}

TEST_CASE("CDAT with coefficient 0 follows ERM; reversal lowers the MI estimate") {
  data::WorldOptions o;
  o.latents_per_class = 1000;
  o.input_dim = 16;
  o.class_dims = 2;
  o.style_dims = 1;
  o.subgroup_shift = 2.0;
  o.permute = false;
  o.seed = 7;
  const data::CoupledWorld world(o);
  training::TrainConfig base;
  base.method = training::Method::erm;
  base.epochs = 8;
  const auto split = data::sample_dataset(world, 4000, 0.98, 0);
  const auto erm = training::train(split, base);
  const auto zero = cdat_train(split, 0.0, 8, base);
  CHECK(zero.best_epoch == erm.best_epoch);
  CHECK(zero.test.robust == erm.test.robust);
  CHECK(zero.test.aggregate == erm.test.aggregate);
  CHECK(zero.domain_mi_trace.size() == 8);

  std::vector<double> erm_mi, cdat_mi;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto s = data::sample_dataset(world, 4000, 0.98, seed);
    base.seed = seed;
    erm_mi.push_back(training::train(s, base).mi_estimate);
    cdat_mi.push_back(cdat_train(s, 1.0, 8, base).mi_estimate);
  }
  std::sort(erm_mi.begin(), erm_mi.end());
  std::sort(cdat_mi.begin(), cdat_mi.end());
  CHECK(cdat_mi[1] <= erm_mi[1]);
}
