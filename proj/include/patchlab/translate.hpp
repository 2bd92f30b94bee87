#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "patchlab/coupled_data.hpp"
#include "patchlab/mlp.hpp"

namespace patchlab::translate {

/// Map F_{z -> z'} between the input spaces of two subgroups of one class.
class Translator {
 public:
  enum class Kind { identity, affine, network };

  static Translator identity(int subgroup, Index dim);
  /// x -> x * linear + offset (row convention).
  static Translator affine(int source, int target, Matrix linear, RowVector offset);
  /// Learned generator; residual networks compute x + net(x).
  static Translator network(int source, int target, MlpModel net, bool residual);

  int source() const { return source_; }
  int target() const { return target_; }
  Kind kind() const { return kind_; }
  Index dim() const { return dim_; }
  bool residual() const { return residual_; }
  const Matrix& linear() const { return linear_; }
  const RowVector& offset() const { return offset_; }
  MlpModel& net() { return net_; }
  const MlpModel& net() const { return net_; }

  Matrix apply(const Matrix& x) const;
  /// Differentiable application; only network translators carry parameters.
  ad::Var apply(const ad::Var& x);

  std::string to_json() const;
  static Translator from_json(const std::string& text);

 private:
  int source_ = 0;
  int target_ = 0;
  Kind kind_ = Kind::identity;
  Index dim_ = 0;
  Matrix linear_;
  RowVector offset_;
  MlpModel net_;
  bool residual_ = false;
};

/// Translators for every class y and ordered subgroup pair (z, z').
class TranslatorBank {
 public:
  TranslatorBank() = default;
  TranslatorBank(int num_classes, int subgroups_per_class) : num_classes_(num_classes), k_(subgroups_per_class) {}

  int num_classes() const { return num_classes_; }
  int subgroups_per_class() const { return k_; }
  void set(int y, Translator t);
  bool has(int y, int from, int to) const;
  const Translator& get(int y, int from, int to) const;

 private:
  int num_classes_ = 0;
  int k_ = 0;
  std::map<std::tuple<int, int, int>, Translator> maps_;
};

/// Exact F_{z -> z'} = g_{z'} o g_z^{-1} for every class of an affine world,
/// identities included.
TranslatorBank analytic_translators(const data::CoupledWorld& world);

/// One augmented input per subgroup of x's class; row z' is F_{z -> z'}(x),
/// and row z is x itself.
Matrix augment_coupled(const data::LabeledExample& x, const TranslatorBank& bank);

/// augment_coupled for every row of `data`, stacked: rows [i*k, (i+1)*k)
/// belong to example i.
Matrix augment_dataset(const data::Dataset& data, const TranslatorBank& bank);

struct TranslatorPair {
  Translator forward;   // F: z' -> z (maps into domain A = z)
  Translator backward;  // G: z -> z' (maps into domain B = z')
  MlpModel discriminator_a;
  MlpModel discriminator_b;
  double cycle_coef = 10.0;
  double identity_coef = 1.0;
};

enum class Domain { a, b };

/// Cycle term L(x, F(G(x))) and identity term L(x, F(x)) for x from domain A
/// (mirrored for B), L = mean absolute difference over all entries, each
/// scaled by its coefficient.
double cyclegan_loss(const TranslatorPair& pair, const Matrix& batch, Domain domain);

struct TranslatorConfig {
  double cycle_coef = 10.0;
  double identity_coef = 1.0;
  /// Adam settings shared by generators and discriminators.
  double learning_rate = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.999;
  /// Discriminator rate; non-positive reuses learning_rate.
  double discriminator_learning_rate = 0.005;
  /// Discriminator updates per generator update.
  int discriminator_steps = 1;
  int steps = 3000;
  Index batch_size = 128;
  std::uint64_t seed = 0;
  enum class Generator { affine, mlp } generator = Generator::affine;
  /// Start affine generators at the identity (else Glorot-random) and MLP
  /// generators near it (last layer scaled by 0.1).
  bool identity_init = true;
  Index generator_hidden = 16;
  Index discriminator_hidden = 16;
  /// Fraction of final steps over which both learning rates decay linearly
  /// to zero.
  double decay_tail = 0.5;
  /// Fraction of final steps over which generator parameters are averaged.
  double average_tail = 0.25;
};

struct TranslatorStep {
  double discriminator_loss = 0.0;
  double adversarial_loss = 0.0;
  double cycle_loss = 0.0;
  double identity_loss = 0.0;
};

struct TrainedTranslators {
  TranslatorPair pair;
  std::vector<TranslatorStep> trace;
};

/// Alternating updates: both discriminators maximize the two-term log loss,
/// then both generators minimize non-saturating adversarial + cycle +
/// identity terms. Training runs on pooled standardized coordinates; the
/// returned networks act on raw inputs, while the loss trace is in
/// standardized units.
TrainedTranslators train_translator_pair(const Matrix& data_a, const Matrix& data_b, int subgroup_a,
                                         int subgroup_b, const TranslatorConfig& config);

/// Trains one pair per class between subgroups 0 and 1 of `data`.
TranslatorBank train_translators(const data::Dataset& data, const TranslatorConfig& config);

}  // namespace patchlab::translate
