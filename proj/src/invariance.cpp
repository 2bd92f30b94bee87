#include "patchlab/invariance.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "json.hpp"
#include "patchlab/divergences.hpp"
#include "patchlab/error.hpp"
#include "patchlab/objectives.hpp"

namespace patchlab::invariance {

namespace dv = divergences;

// ---------------------------------------------------------------------------
// FiniteJoint

FiniteJoint::FiniteJoint(std::vector<std::string> names, std::vector<int> arities)
    : names_(std::move(names)), arities_(std::move(arities)) {
  if (names_.size() != arities_.size()) throw ShapeError("one arity per variable required");
  Index size = 1;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (arities_[i] < 1) throw ParameterError("variable '" + names_[i] + "' needs a positive arity");
    for (std::size_t j = 0; j < i; ++j)
      if (names_[j] == names_[i]) throw ContractError("duplicate variable '" + names_[i] + "'");
    size *= arities_[i];
  }
  table_ = Vector::Zero(size);
}

std::size_t FiniteJoint::variable(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ContractError("unknown variable '" + name + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

Index FiniteJoint::flat(std::span<const int> outcome) const {
  if (outcome.size() != names_.size()) throw ShapeError("outcome needs one value per variable");
  Index index = 0;
  for (std::size_t i = 0; i < outcome.size(); ++i) {
    if (outcome[i] < 0 || outcome[i] >= arities_[i])
      throw ContractError("value " + std::to_string(outcome[i]) + " out of range for '" + names_[i] + "'");
    index = index * arities_[i] + outcome[i];
  }
  return index;
}

void FiniteJoint::add(std::span<const int> outcome, double probability) {
  if (!(probability >= 0.0)) throw ContractError("probability mass must be non-negative");
  table_(flat(outcome)) += probability;
}

double FiniteJoint::probability(std::span<const int> outcome) const { return table_(flat(outcome)); }

Vector FiniteJoint::marginal(std::span<const std::size_t> vars) const {
  Index size = 1;
  for (auto v : vars) {
    if (v >= names_.size()) throw ContractError("variable index out of range");
    size *= arities_[v];
  }
  Vector out = Vector::Zero(size);
  std::vector<int> values(names_.size());
  for (Index e = 0; e < table_.size(); ++e) {
    if (table_(e) == 0.0) continue;
    Index rest = e;
    for (std::size_t i = names_.size(); i-- > 0;) {
      values[i] = static_cast<int>(rest % arities_[i]);
      rest /= arities_[i];
    }
    Index index = 0;
    for (auto v : vars) index = index * arities_[v] + values[v];
    out(index) += table_(e);
  }
  return out;
}

void FiniteJoint::check() const {
  if ((table_.array() < 0.0).any()) throw ContractError("joint has negative entries");
  if (std::abs(table_.sum() - 1.0) > 1e-12) throw ContractError("joint does not sum to 1");
}

double exact_conditional_mi(const FiniteJoint& joint, const std::vector<std::string>& a,
                            const std::vector<std::string>& b, const std::vector<std::string>& given) {
  if (a.empty() || b.empty()) throw ContractError("mutual information needs non-empty variable sets");
  std::vector<std::size_t> vars;
  Index na = 1, nb = 1, nc = 1;
  for (const auto& name : a) {
    vars.push_back(joint.variable(name));
    na *= joint.arity(name);
  }
  for (const auto& name : b) {
    vars.push_back(joint.variable(name));
    nb *= joint.arity(name);
  }
  for (const auto& name : given) {
    vars.push_back(joint.variable(name));
    nc *= joint.arity(name);
  }
  const Vector abc = joint.marginal(vars);
  Matrix ac = Matrix::Zero(na, nc), bc = Matrix::Zero(nb, nc);
  Vector c = Vector::Zero(nc);
  for (Index ia = 0; ia < na; ++ia)
    for (Index ib = 0; ib < nb; ++ib)
      for (Index ic = 0; ic < nc; ++ic) {
        const double p = abc((ia * nb + ib) * nc + ic);
        ac(ia, ic) += p;
        bc(ib, ic) += p;
        c(ic) += p;
      }
  double mi = 0.0;
  for (Index ia = 0; ia < na; ++ia)
    for (Index ib = 0; ib < nb; ++ib)
      for (Index ic = 0; ic < nc; ++ic) {
        const double p = abc((ia * nb + ib) * nc + ic);
        if (p > 0.0) mi += p * std::log(p * c(ic) / (ac(ia, ic) * bc(ib, ic)));
      }
  return std::max(mi, 0.0);
}

// ---------------------------------------------------------------------------
// Coupled-set quantities

Predictor predictor(const MlpModel& model) {
  return [model](const Matrix& x) { return forward(model, x); };
}

namespace {

Matrix predict_checked(const Predictor& f, const Matrix& x) {
  Matrix p = f(x);
  if (p.rows() != x.rows()) throw ShapeError("predictor must return one row per input");
  return p;
}

}  // namespace

FiniteJoint induced_joint(const Predictor& f, const data::CoupledWorld& world) {
  const auto all = world.enumerate();
  const Vector weights = world.enumerate_weights();
  const Matrix p = predict_checked(f, all.x);
  const int classes = static_cast<int>(p.cols());
  if (classes < world.num_classes()) throw ShapeError("predictor has fewer outputs than the world has classes");
  FiniteJoint joint({"coupled", "z", "yhat", "y"},
                    {static_cast<int>(world.num_coupled_sets()), world.subgroups_per_class(), classes, world.num_classes()});
  for (Index r = 0; r < all.size(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    for (int yhat = 0; yhat < classes; ++yhat) {
      const std::array<int, 4> outcome{static_cast<int>(all.coupled_id[i]), all.z[i], yhat, all.y[i]};
      joint.add(outcome, weights(r) * p(r, yhat));
    }
  }
  return joint;
}

CoupledMi coupled_mi_as_jsd(const Predictor& f, const data::CoupledWorld& world) {
  CoupledMi out;
  out.mi = exact_conditional_mi(induced_joint(f, world), {"yhat"}, {"z"}, {"coupled"});
  const auto all = world.enumerate();
  const Matrix p = predict_checked(f, all.x);
  const Index k = world.subgroups_per_class();
  for (int y = 0; y < world.num_classes(); ++y) {
    Vector pz(k);
    for (Index z = 0; z < k; ++z) pz(z) = world.subgroup_weight(y, static_cast<int>(z));
    for (int l = 0; l < world.latents_per_class(); ++l) {
      const Index first = (static_cast<Index>(y) * world.latents_per_class() + l) * k;
      out.expected_jsd += world.class_weight(y) * world.latent_weight(y, l) * dv::weighted_jsd(p.middleRows(first, k), pz);
    }
  }
  return out;
}

double chain_rule_gap(const Predictor& f, const data::CoupledWorld& world) {
  const auto joint = induced_joint(f, world);
  return exact_conditional_mi(joint, {"yhat"}, {"z"}, {"coupled"}) - exact_conditional_mi(joint, {"yhat"}, {"z"}, {"y"});
}

// ---------------------------------------------------------------------------
// Variational estimate

MiEstimate variational_mi_estimate(const Matrix& features, std::span<const int> y, std::span<const int> z,
                                   int num_classes, int subgroups_per_class, const HeadConfig& config) {
  const Index n = features.rows();
  if (static_cast<Index>(y.size()) != n || static_cast<Index>(z.size()) != n)
    throw ShapeError("one class and subgroup label per feature row required");
  if (n < 4) throw ParameterError("variational MI estimate needs at least 4 rows");
  if (config.max_epochs < 1 || config.patience < 1 || config.batch_size < 1)
    throw ParameterError("head epochs, patience and batch size must be positive");
  for (Index i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    if (y[s] < 0 || y[s] >= num_classes || z[s] < 0 || z[s] >= subgroups_per_class)
      throw ContractError("label out of range at row " + std::to_string(i));
  }

  Rng split_rng(config.seed, 31);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  split_rng.shuffle(order);
  const Index n_fit = n / 2;
  const std::span<const Index> fit_rows(order.data(), static_cast<std::size_t>(n_fit));
  const std::span<const Index> eval_rows(order.data() + n_fit, static_cast<std::size_t>(n - n_fit));

  RowVector mean = RowVector::Zero(features.cols()), sd = RowVector::Zero(features.cols());
  for (Index i : fit_rows) mean += features.row(i);
  mean /= static_cast<double>(n_fit);
  for (Index i : fit_rows) sd.array() += (features.row(i) - mean).array().square();
  sd = (sd / static_cast<double>(n_fit)).cwiseSqrt();
  for (Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;
  auto standardized = [&](std::span<const Index> rows) {
    Matrix out(static_cast<Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      out.row(static_cast<Index>(r)) = (features.row(rows[r]) - mean).cwiseQuotient(sd);
    return out;
  };

  MiEstimate result;
  const double n_eval = static_cast<double>(eval_rows.size());
  double total_ce = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Index> fit_c, eval_c;
    for (Index i : fit_rows)
      if (y[static_cast<std::size_t>(i)] == c) fit_c.push_back(i);
    for (Index i : eval_rows)
      if (y[static_cast<std::size_t>(i)] == c) eval_c.push_back(i);
    if (eval_c.empty()) continue;

    std::vector<Index> counts(static_cast<std::size_t>(subgroups_per_class), 0);
    for (Index i : eval_c) ++counts[static_cast<std::size_t>(z[static_cast<std::size_t>(i)])];
    for (Index count : counts)
      if (count > 0) {
        const double q = static_cast<double>(count) / static_cast<double>(eval_c.size());
        result.conditional_entropy -= static_cast<double>(eval_c.size()) / n_eval * q * std::log(q);
      }

    const Matrix x_eval = standardized(eval_c);
    std::vector<int> z_eval;
    for (Index i : eval_c) z_eval.push_back(z[static_cast<std::size_t>(i)]);
    if (fit_c.empty()) {
      total_ce += static_cast<double>(eval_c.size()) * std::log(static_cast<double>(subgroups_per_class));
      continue;
    }
    const Matrix x_fit = standardized(fit_c);
    std::vector<int> z_fit;
    for (Index i : fit_c) z_fit.push_back(z[static_cast<std::size_t>(i)]);

    std::vector<Index> widths{features.cols()};
    for (Index h : config.hidden) widths.push_back(h);
    widths.push_back(subgroups_per_class);
    Rng init(config.seed, 32 + static_cast<std::uint64_t>(c));
    MlpModel head(widths, init);
    Rng batch_rng(config.seed, 64 + static_cast<std::uint64_t>(c));
    const auto params = head.parameters();
    const SgdOptions sgd{.learning_rate = config.learning_rate, .momentum = config.momentum, .weight_decay = 0.0};

    auto eval_ce = [&] {
      const Matrix logits = head.evaluate_logits(x_eval);
      double ce = 0.0;
      for (Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        ce += m + std::log((logits.row(i).array() - m).exp().sum()) - logits(i, z_eval[static_cast<std::size_t>(i)]);
      }
      return ce;
    };
    double best = eval_ce();
    int since_best = 0;
    for (int epoch = 1; epoch <= config.max_epochs && since_best < config.patience; ++epoch) {
      for (const auto& batch : data::shuffled_batches(x_fit.rows(), config.batch_size, batch_rng)) {
        std::vector<int> labels;
        Matrix xb(static_cast<Index>(batch.size()), x_fit.cols());
        for (std::size_t r = 0; r < batch.size(); ++r) {
          xb.row(static_cast<Index>(r)) = x_fit.row(batch[r]);
          labels.push_back(z_fit[static_cast<std::size_t>(batch[r])]);
        }
        auto loss = ad::mean(objectives::cross_entropy(head.logits(ad::constant(xb)), labels));
        if (!std::isfinite(loss.scalar()))
          throw TrainingError("domain head diverged at epoch " + std::to_string(epoch));
        head.zero_grad();
        ad::backward(loss);
        sgd_step(params, sgd);
      }
      const double ce = eval_ce();
      if (!std::isfinite(ce)) throw TrainingError("domain head diverged at epoch " + std::to_string(epoch));
      result.epochs = std::max(result.epochs, epoch);
      if (ce < best - 1e-12) {
        best = ce;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    total_ce += best;
  }
  result.cross_entropy = total_ce / n_eval;
  result.estimate = result.conditional_entropy - result.cross_entropy;
  return result;
}

training::TrainResult cdat_train(const data::DatasetSplit& split, double domain_coef, int epochs,
                                 training::TrainConfig base) {
  base.method = training::Method::cdat;
  base.domain_coef = domain_coef;
  base.epochs = epochs;
  return training::train(split, base);
}

// ---------------------------------------------------------------------------
// Bound audit

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_outcomes(const OutcomeDistribution& d, Index dim) {
  if (d.points.rows() == 0 || d.points.rows() != d.probabilities.size())
    throw ShapeError("translator outcome needs one probability per point");
  if (d.points.cols() != dim) throw ShapeError("translator outcome has the wrong dimension");
  dv::check_categorical(d.probabilities, "translator outcome");
}

/// (true point mass, translated distribution) over the union of their
/// distinct points.
std::pair<Vector, Vector> on_union_support(const RowVector& truth, const OutcomeDistribution& d) {
  std::vector<RowVector> support{truth};
  std::vector<double> q{0.0};
  for (Index j = 0; j < d.points.rows(); ++j) {
    std::size_t at = support.size();
    for (std::size_t s = 0; s < support.size(); ++s)
      if (support[s] == d.points.row(j)) {
        at = s;
        break;
      }
    if (at == support.size()) {
      support.push_back(d.points.row(j));
      q.push_back(0.0);
    }
    q[at] += d.probabilities(j);
  }
  Vector p = Vector::Zero(static_cast<Index>(support.size()));
  p(0) = 1.0;
  return {p, Eigen::Map<Vector>(q.data(), static_cast<Index>(q.size()))};
}

struct Audit {
  double ls = 0.0;
  std::vector<double> lcg;
  double dp_gap = -std::numeric_limits<double>::infinity();
};

template <typename Visit>
void audit_examples(const Predictor& f, const data::CoupledWorld& world, const StochasticTranslator& translator,
                    Visit&& visit) {
  const auto all = world.enumerate();
  const Vector weights = world.enumerate_weights();
  const Matrix p = predict_checked(f, all.x);
  const Index k = world.subgroups_per_class();
  for (Index r = 0; r < all.size(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    const int y = all.y[i], source = all.z[i];
    const Index first = r - source;
    Matrix averaged(k, p.cols());
    Audit audit;
    audit.lcg.assign(static_cast<std::size_t>(k), 0.0);
    for (Index z = 0; z < k; ++z) {
      if (z == source) {
        averaged.row(z) = p.row(r);
        continue;
      }
      const auto outcomes = translator(y, source, static_cast<int>(z), all.x.row(r));
      check_outcomes(outcomes, all.input_dim());
      averaged.row(z) = outcomes.probabilities.transpose() * predict_checked(f, outcomes.points);
      const auto [truth, translated] = on_union_support(all.x.row(first + z), outcomes);
      const double lcg = std::max(0.0, dv::optimal_discriminator_loss(truth, translated) + std::numbers::ln2);
      audit.lcg[static_cast<std::size_t>(z)] = lcg;
      audit.dp_gap = std::max(audit.dp_gap, dv::jsd(p.row(first + z), averaged.row(z)) - lcg);
    }
    audit.ls = dv::jsd(averaged);
    visit(weights(r), audit);
  }
}

}  // namespace

StochasticTranslator deterministic(const translate::TranslatorBank& bank) {
  return [bank](int y, int from, int to, const RowVector& x) {
    OutcomeDistribution d;
    d.points = bank.get(y, from, to).apply(Matrix(x));
    d.probabilities = Vector::Ones(1);
    return d;
  };
}

StochasticTranslator random_imperfect_translator(const data::CoupledWorld& world, std::uint64_t seed, int outcomes) {
  if (outcomes < 1) throw ParameterError("imperfect translator needs at least one outcome");
  const auto bank = translate::analytic_translators(world);
  return [world, bank, seed, outcomes](int y, int from, int to, const RowVector& x) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const std::array<int, 3> key{y, from, to};
    h = fnv1a(h, key.data(), sizeof key);
    h = fnv1a(h, x.data(), static_cast<std::size_t>(x.size()) * sizeof(double));
    Rng rng(seed ^ h, 33);
    const RowVector exact = bank.get(y, from, to).apply(Matrix(x)).row(0);
    OutcomeDistribution d;
    d.points.resize(outcomes, x.size());
    d.probabilities.resize(outcomes);
    d.points.row(0) = exact;
    for (int j = 1; j < outcomes; ++j) {
      if (rng.uniform() < 0.5) {
        const int l = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.latents_per_class())));
        d.points.row(j) = world.render(y, to, l);
      } else {
        for (Index c = 0; c < x.size(); ++c) d.points(j, c) = exact(c) + std::round(rng.normal() * 32.0) / 64.0;
      }
    }
    if (rng.uniform() < 0.2) {
      d.probabilities.setZero();
      d.probabilities(0) = 1.0;
    } else {
      for (int j = 0; j < outcomes; ++j) d.probabilities(j) = rng.uniform(0.05, 1.0);
      d.probabilities /= d.probabilities.sum();
    }
    return d;
  };
}

std::string BoundReport::to_json() const {
  nlohmann::json j{{"lhs", lhs},
                   {"rhs", rhs},
                   {"slack", slack},
                   {"mean_self_consistency", mean_self_consistency},
                   {"mean_translation_gap", mean_translation_gap},
                   {"examples", examples},
                   {"seed", seed}};
  return j.dump(2);
}

BoundReport verify_theorem1(const Predictor& f, const data::CoupledWorld& world, const StochasticTranslator& translator) {
  if (world.subgroups_per_class() != 2)
    throw ContractError("unsupported case: the coupled-set bound audit covers k = 2 subgroups per class, got " +
                        std::to_string(world.subgroups_per_class()));
  if (!world.uniform_subgroups()) throw ContractError("unsupported case: the bound audit needs uniform p(z|y)");
  BoundReport report;
  report.lhs = coupled_mi_as_jsd(f, world).mi;
  report.mean_translation_gap.assign(2, 0.0);
  audit_examples(f, world, translator, [&](double w, const Audit& a) {
    double root = std::sqrt(a.ls);
    for (std::size_t z = 0; z < a.lcg.size(); ++z) {
      root += std::sqrt(a.lcg[z]);
      report.mean_translation_gap[z] += w * a.lcg[z];
    }
    report.rhs += w * root * root;
    report.mean_self_consistency += w * a.ls;
    ++report.examples;
  });
  report.slack = report.rhs - report.lhs;
  return report;
}

double data_processing_gap(const Predictor& f, const data::CoupledWorld& world, const StochasticTranslator& translator) {
  double worst = -std::numeric_limits<double>::infinity();
  audit_examples(f, world, translator, [&](double, const Audit& a) { worst = std::max(worst, a.dp_gap); });
  return worst;
}

}  // namespace patchlab::invariance
