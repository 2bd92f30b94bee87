#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <array>
#include <functional>
#include <limits>
#include <numeric>
#include <numbers>

#include "patchlab/divergences.hpp"
#include "patchlab/harness.hpp"
#include "patchlab/invariance.hpp"
#include "patchlab/mnist.hpp"

namespace patchlab::harness {

namespace dv = divergences;

namespace {

/// Tracks the worst value of one identity across its instances.
class Tally {
 public:
  Tally(VerifyReport& report, std::string name) : report_(report), name_(std::move(name)) {}

  void record(bool pass, double value) {
    ++count_;
    ++report_.checks;
    if (!pass) {
      ++failed_;
      ++report_.failures;
    }
    worst_ = std::max(worst_, value);
  }

  void finish(const char* what) {
    char buffer[200];
    std::snprintf(buffer, sizeof buffer, "%s %s: %d/%d pass, worst %s %.3g", failed_ ? "FAIL" : "ok  ", name_.c_str(),
                  count_ - failed_, count_, what, worst_);
    report_.lines.emplace_back(buffer);
  }

 private:
  VerifyReport& report_;
  std::string name_;
  int count_ = 0;
  int failed_ = 0;
  double worst_ = -std::numeric_limits<double>::infinity();
};

/// Random categorical vector with occasional zeros.
RowVector random_distribution(Index n, Rng& rng, double zero_rate = 0.15) {
  RowVector p(n);
  for (Index i = 0; i < n; ++i) p(i) = rng.uniform() < zero_rate ? 0.0 : -std::log(1.0 - rng.uniform());
  if (p.sum() == 0.0) p(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)))) = 1.0;
  return p / p.sum();
}

Matrix random_rows(Index k, Index n, Rng& rng) {
  Matrix out(k, n);
  for (Index i = 0; i < k; ++i) out.row(i) = random_distribution(n, rng);
  return out;
}

void divergence_suite(VerifyReport& report) {
  Rng rng(2024, 1);
  constexpr int kTrials = 1000;
  {
    Tally t(report, "mixture MI equals uniform JSD");
    for (int i = 0; i < kTrials; ++i) {
      const Matrix c = random_rows(2 + static_cast<Index>(rng.below(4)), 2 + static_cast<Index>(rng.below(7)), rng);
      const double err = std::abs(dv::mixture_mutual_information(c) - dv::jsd(c));
      t.record(err < 1e-10, err);
    }
    t.finish("|MI - JSD|");
  }
  {
    Tally t(report, "optimal discriminator loss equals JSD - log 2");
    for (int i = 0; i < kTrials; ++i) {
      const Index n = 2 + static_cast<Index>(rng.below(7));
      const RowVector p = random_distribution(n, rng), q = random_distribution(n, rng);
      const double err = std::abs(dv::optimal_discriminator_loss(p, q) - (dv::jsd(p, q) - std::numbers::ln2));
      t.record(err < 1e-10, err);
    }
    t.finish("|loss - (JSD - log 2)|");
  }
  {
    Tally t(report, "sqrt JSD triangle inequality");
    for (int i = 0; i < kTrials; ++i) {
      const Index n = 2 + static_cast<Index>(rng.below(7));
      const RowVector p = random_distribution(n, rng), q = random_distribution(n, rng), r = random_distribution(n, rng);
      const double gap = dv::jsd_metric_gap(p, q, r);
      t.record(gap >= -1e-9, -gap);
    }
    t.finish("violation");
  }
  {
    Tally t(report, "JSD symmetric and within [0, log k]");
    for (int i = 0; i < kTrials; ++i) {
      const Index k = 2 + static_cast<Index>(rng.below(4));
      const Matrix c = random_rows(k, 2 + static_cast<Index>(rng.below(7)), rng);
      const Matrix reversed = c.colwise().reverse();
      const double value = dv::jsd(c);
      const double err = std::abs(value - dv::jsd(reversed));
      t.record(err < 1e-12 && value >= 0.0 && value <= std::log(static_cast<double>(k)) + 1e-12, err);
    }
    t.finish("|JSD(P) - JSD(reversed P)|");
  }
  {
    Tally t(report, "Gibbs: KL >= 0 with KL(p, p) = 0");
    for (int i = 0; i < kTrials; ++i) {
      const Index n = 2 + static_cast<Index>(rng.below(7));
      const RowVector p = random_distribution(n, rng, 0.0), q = random_distribution(n, rng, 0.0);
      const double self = dv::kl(p, p);
      t.record(dv::kl(p, q) >= 0.0 && std::abs(self) < 1e-12, std::abs(self));
    }
    t.finish("|KL(p, p)|");
  }
  {
    Tally t(report, "no discriminator beats the optimal one");
    for (int i = 0; i < kTrials; ++i) {
      const Index n = 2 + static_cast<Index>(rng.below(7));
      const RowVector p = random_distribution(n, rng), q = random_distribution(n, rng);
      RowVector d(n);
      for (Index a = 0; a < n; ++a) d(a) = rng.uniform(1e-6, 1.0 - 1e-6);
      const double excess = dv::discriminator_objective(p, q, d) - dv::optimal_discriminator_loss(p, q);
      t.record(excess <= 1e-12, excess);
    }
    t.finish("excess");
  }
  {
    Tally t(report, "pair distance equals 2 JSD - log 2 within [-log 2, log 2]");
    for (int i = 0; i < kTrials; ++i) {
      const Index n = 2 + static_cast<Index>(rng.below(7));
      const RowVector p = random_distribution(n, rng), q = random_distribution(n, rng);
      const double distance = dv::pair_discriminator_distance(p, q);
      const double err = std::abs(distance - (2.0 * dv::jsd(p, q) - std::numbers::ln2));
      t.record(err < 1e-10 && std::abs(distance) <= std::numbers::ln2 + 1e-12, err);
    }
    t.finish("|distance - (2 JSD - log 2)|");
  }
}

void generator_suite(VerifyReport& report) {
  constexpr Index kN = 40000;
  constexpr double kRho = 0.98;
  const std::vector<std::vector<Index>> expected{{9900, 100}, {100, 9900}};
  const auto counts = data::correlation_counts(kN, kRho);
  {
    Tally t(report, "correlated cell counts");
    t.record(counts.majority == 19800 && counts.minority == 200, 0.0);
    t.finish("mismatch");
  }
  const auto sources = data::load_mnist_sources(std::nullopt, 0);
  const auto split = data::mnist_correlation(sources, kN, kRho, 0);
  auto check = [&](const data::Dataset& d, const char* name) {
    Tally t(report, std::string(name) + " cells {{9900, 100}, {100, 9900}}");
    const auto cells = d.cell_counts();
    Index off = 0;
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t z = 0; z < 2; ++z) off += std::abs(cells[y][z] - expected[y][z]);
    t.record(off == 0, static_cast<double>(off));
    t.finish("total count difference");
  };
  check(split.train, "train");
  check(split.validation, "validation");
}

/// Small enumerable world with two uniformly weighted subgroups per class.
data::CoupledWorld random_world(Rng& rng) {
  data::WorldOptions o;
  o.num_classes = 2 + static_cast<int>(rng.below(2));
  o.subgroups_per_class = 2;
  o.latents_per_class = 2 + static_cast<int>(rng.below(4));
  o.input_dim = 2 + static_cast<Index>(rng.below(3));
  o.seed = rng.next();
  o.subgroup_shift = rng.uniform(0.5, 2.0);
  return data::CoupledWorld(o);
}

MlpModel random_model(Index input, int classes, Rng& rng) {
  MlpModel model({input, 4 + static_cast<Index>(rng.below(8)), static_cast<Index>(classes)}, rng);
  const double sharpness = rng.uniform(0.5, 4.0);
  for (auto& layer : model.layers()) layer.weight.value *= sharpness;
  return model;
}

void bound_suite(VerifyReport& report) {
  constexpr int kTrials = 100;
  Rng rng(2024, 2);
  Tally slack(report, "bound slack >= -1e-9 under imperfect translators");
  Tally equality(report, "lhs = rhs under analytic translators");
  Tally processing(report, "prediction JSD <= input JSD");
  for (int i = 0; i < kTrials; ++i) {
    const auto world = random_world(rng);
    const auto model = random_model(world.input_dim(), world.num_classes(), rng);
    const auto f = invariance::predictor(model);
    const auto translator = invariance::random_imperfect_translator(world, rng.next());
    const auto report_imperfect = invariance::verify_theorem1(f, world, translator);
    slack.record(report_imperfect.slack >= -1e-9, -report_imperfect.slack);
    const auto exact = invariance::deterministic(translate::analytic_translators(world));
    const auto report_exact = invariance::verify_theorem1(f, world, exact);
    const double err = std::abs(report_exact.lhs - report_exact.rhs);
    equality.record(err < 1e-10, err);
    const double gap = invariance::data_processing_gap(f, world, translator);
    processing.record(gap <= 1e-12, gap);
  }
  slack.finish("violation");
  equality.finish("|lhs - rhs|");
  processing.finish("excess");
}

}  // namespace

KnownMiProblem known_mi_problem(std::uint64_t seed, Index samples) {
  Rng rng(seed, 3);
  KnownMiProblem p;
  p.num_classes = 1 + static_cast<int>(rng.below(2));
  p.subgroups_per_class = 2 + static_cast<int>(rng.below(2));
  const int m = 2 + static_cast<int>(rng.below(5));
  // Dependence strength: flat rows give no information, peaked rows a lot.
  const double temperature = rng.uniform(0.1, 3.0);
  invariance::FiniteJoint joint({"y", "z", "w"}, {p.num_classes, p.subgroups_per_class, m});
  std::vector<double> outcome_p;
  std::vector<std::array<int, 3>> outcomes;
  for (int y = 0; y < p.num_classes; ++y) {
    const RowVector pz = random_distribution(p.subgroups_per_class, rng, 0.0);
    for (int z = 0; z < p.subgroups_per_class; ++z) {
      RowVector pw(m);
      for (int w = 0; w < m; ++w) pw(w) = std::exp(temperature * rng.normal());
      pw /= pw.sum();
      for (int w = 0; w < m; ++w) {
        const double prob = pz(z) * pw(w) / p.num_classes;
        const std::array<int, 3> o{y, z, w};
        joint.add(o, prob);
        outcomes.push_back(o);
        outcome_p.push_back(prob);
      }
    }
  }
  p.mutual_information = invariance::exact_conditional_mi(joint, {"w"}, {"z"}, {"y"});
  std::vector<double> cumulative(outcome_p.size());
  std::partial_sum(outcome_p.begin(), outcome_p.end(), cumulative.begin());
  p.features = Matrix::Zero(samples, m);
  p.y.resize(static_cast<std::size_t>(samples));
  p.z.resize(static_cast<std::size_t>(samples));
  for (Index i = 0; i < samples; ++i) {
    const double u = rng.uniform() * cumulative.back();
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const auto& o = outcomes[std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), outcomes.size() - 1)];
    p.y[static_cast<std::size_t>(i)] = o[0];
    p.z[static_cast<std::size_t>(i)] = o[1];
    p.features(i, o[2]) = 1.0;
  }
  return p;
}

namespace {

void mi_suite(VerifyReport& report) {
  constexpr int kProblems = 20;
  Tally t(report, "variational estimate within [MI - 0.05, MI + 0.02]");
  for (int i = 0; i < kProblems; ++i) {
    const auto p = known_mi_problem(static_cast<std::uint64_t>(i));
    invariance::HeadConfig config;
    config.seed = static_cast<std::uint64_t>(i);
    const auto estimate =
        invariance::variational_mi_estimate(p.features, p.y, p.z, p.num_classes, p.subgroups_per_class, config);
    const double err = estimate.estimate - p.mutual_information;
    t.record(err >= -0.05 && err <= 0.02, std::abs(err));
    char buffer[160];
    std::snprintf(buffer, sizeof buffer, "     problem %2d: MI %.4f estimate %.4f (%d epochs)", i, p.mutual_information,
                  estimate.estimate, estimate.epochs);
    report.lines.emplace_back(buffer);
  }
  t.finish("|estimate - MI|");
}

}  // namespace

std::vector<std::string> verify_suites() { return {"divergences", "bound", "mi", "generator"}; }

VerifyReport verify(const std::string& suite) {
  VerifyReport report;
  report.suite = suite;
  const auto started = std::chrono::steady_clock::now();
  if (suite == "divergences") {
    divergence_suite(report);
  } else if (suite == "bound") {
    bound_suite(report);
  } else if (suite == "mi") {
    mi_suite(report);
  } else if (suite == "generator") {
    generator_suite(report);
  } else {
    throw ConfigError("unknown verify suite '" + suite + "' (expected divergences, bound, mi or generator)");
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  char buffer[120];
  std::snprintf(buffer, sizeof buffer, "%s: %d checks, %d failures, %.2f s", suite.c_str(), report.checks,
                report.failures, seconds);
  report.lines.emplace_back(buffer);
  return report;
}

}  // namespace patchlab::harness
