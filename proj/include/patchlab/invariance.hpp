#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchlab/coupled_data.hpp"
#include "patchlab/mlp.hpp"
#include "patchlab/training.hpp"
#include "patchlab/translate.hpp"

namespace patchlab::invariance {

/// Dense probability table over named discrete variables, stored in
/// mixed-radix order with the last variable varying fastest.
class FiniteJoint {
 public:
  FiniteJoint(std::vector<std::string> names, std::vector<int> arities);

  const std::vector<std::string>& names() const { return names_; }
  int arity(const std::string& name) const { return arities_[variable(name)]; }
  std::size_t variable(const std::string& name) const;
  const Vector& table() const { return table_; }

  /// Adds probability mass to one outcome (one value per variable).
  void add(std::span<const int> outcome, double probability);
  double probability(std::span<const int> outcome) const;
  /// Marginal over `vars`, in the same mixed-radix layout.
  Vector marginal(std::span<const std::size_t> vars) const;
  /// Non-negative entries summing to 1 within 1e-12.
  void check() const;

 private:
  Index flat(std::span<const int> outcome) const;

  std::vector<std::string> names_;
  std::vector<int> arities_;
  Vector table_;
};

/// I(A; B | C) = sum p(abc) log(p(abc) p(c) / (p(ac) p(bc))). Each argument
/// is a set of variable names; `given` may be empty.
double exact_conditional_mi(const FiniteJoint& joint, const std::vector<std::string>& a,
                            const std::vector<std::string>& b, const std::vector<std::string>& given = {});

/// Maps a batch of inputs to probability rows.
using Predictor = std::function<Matrix(const Matrix&)>;
Predictor predictor(const MlpModel& model);

/// Joint of (coupled, z, yhat, y) induced by a world and a predictor, with
/// yhat ~ f(x).
FiniteJoint induced_joint(const Predictor& f, const data::CoupledWorld& world);

struct CoupledMi {
  double mi = 0.0;            // exact I(Yhat; Z | [X]) from the joint
  double expected_jsd = 0.0;  // E_[x] JSD_{p(z|y)}(f([x]_1), ..., f([x]_k))
};

CoupledMi coupled_mi_as_jsd(const Predictor& f, const data::CoupledWorld& world);

/// I(Yhat; Z | [X]) - I(Yhat; Z | Y); non-negative when (Z indep [X]) | Y.
double chain_rule_gap(const Predictor& f, const data::CoupledWorld& world);

// ---------------------------------------------------------------------------
// Variational lower bound

struct HeadConfig {
  /// Hidden widths of each class's head; empty gives a linear head.
  std::vector<Index> hidden{16};
  double learning_rate = 0.05;
  double momentum = 0.9;
  int max_epochs = 300;
  int patience = 20;
  Index batch_size = 128;
  std::uint64_t seed = 0;
};

struct MiEstimate {
  double estimate = 0.0;
  double conditional_entropy = 0.0;  // empirical H(Z | Y) on the held-out half
  double cross_entropy = 0.0;        // held-out head cross-entropy at the best epoch
  int epochs = 0;
};

/// H(Z|Y) - CE of class-conditional heads predicting z from features.
/// Heads train on one half of the rows and stop early on the other half's
/// cross-entropy, which is also where the estimate is evaluated.
MiEstimate variational_mi_estimate(const Matrix& features, std::span<const int> y, std::span<const int> z,
                                   int num_classes, int subgroups_per_class, const HeadConfig& config);

/// CDAT: ERM plus gradient-reversed class-conditional domain heads on the
/// penultimate features. The result carries the per-epoch domain MI trace.
training::TrainResult cdat_train(const data::DatasetSplit& split, double domain_coef, int epochs,
                                 training::TrainConfig base);

// ---------------------------------------------------------------------------
// Bound audit

/// Finite distribution over translated inputs.
struct OutcomeDistribution {
  Matrix points;
  Vector probabilities;
};

/// Distribution of F_{from -> to}(x) for an example x of class y.
using StochasticTranslator = std::function<OutcomeDistribution(int y, int from, int to, const RowVector& x)>;

StochasticTranslator deterministic(const translate::TranslatorBank& bank);

/// Imperfect translator around the analytic one: the exact image keeps a
/// random share of the mass; the rest goes to perturbed points and to images
/// of other coupled sets. Outcomes are a fixed function of (seed, inputs).
StochasticTranslator random_imperfect_translator(const data::CoupledWorld& world, std::uint64_t seed,
                                                 int outcomes = 3);

struct BoundReport {
  double lhs = 0.0;    // I(Yhat; Z | [X])
  double rhs = 0.0;    // E_x (sqrt L_s + sum_z sqrt L_CG^z)^2
  double slack = 0.0;  // rhs - lhs
  double mean_self_consistency = 0.0;
  std::vector<double> mean_translation_gap;  // E_x L_CG^z per subgroup z
  Index examples = 0;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

/// k = 2 with uniform p(z|y) only; other cases raise ContractError.
BoundReport verify_theorem1(const Predictor& f, const data::CoupledWorld& world,
                            const StochasticTranslator& translator);

/// max over examples and target subgroups of
/// JSD(f(true), mean f(translated)) - JSD(true, translated); <= 0 up to rounding.
double data_processing_gap(const Predictor& f, const data::CoupledWorld& world,
                           const StochasticTranslator& translator);

}  // namespace patchlab::invariance
