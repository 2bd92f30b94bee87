#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "patchlab/autodiff.hpp"
#include "patchlab/mlp.hpp"
#include "patchlab/tensor.hpp"

namespace patchlab::objectives {

// ---------------------------------------------------------------------------
// Robust training objectives

/// Mean cross-entropy of probability rows against integer labels.
double erm_loss(const Matrix& predictions, std::span<const int> labels);

/// Worst group loss; empty groups are std::nullopt and skipped.
double gdro_loss(std::span<const std::optional<double>> group_losses);

/// Mean over classes of the worst subgroup loss within the class.
/// cells[y][z] is the mean loss of subgroup z of class y.
double sgdro_loss(const std::vector<std::vector<std::optional<double>>>& cells);

/// Simplex state of the online group-DRO solver.
struct GroupWeights {
  Vector weights;
  double step_size = 0.01;

  static GroupWeights uniform(Index groups, double step_size);
  void check() const;
};

struct GdroUpdate {
  GroupWeights state;
  Vector adjusted_losses;
  /// sum_g w_g * adjusted_g with the updated weights.
  double weighted_loss = 0.0;
};

/// Exponentiated-gradient step on adjusted losses l_g + C / sqrt(n_g):
/// w_g <- w_g exp(eta * adjusted_g), then renormalize.
GdroUpdate gdro_stochastic_update(const GroupWeights& state, const Vector& losses,
                                  std::span<const Index> group_sizes, double adjustment);

// ---------------------------------------------------------------------------
// Consistency regularizers

/// (1/k) sum_z KL(p_z || m), m the mean row; k = predictions.rows() >= 2.
double self_consistency(const Matrix& augmented_predictions);
/// KL(original || mean).
double translation_consistency(const RowVector& original, const RowVector& mean);
/// sum_z KL(original || augmented_z).
double uda_consistency(const RowVector& original, const Matrix& augmented_predictions);
/// JSD of the k + 1 predictions {original, augmented...}.
double augmix_consistency(const RowVector& original, const Matrix& augmented_predictions);

/// Inputs of a consistency batch: example i owns rows [i*k, (i+1)*k) of
/// `augmented`, one per subgroup of its class.
struct AugmentedBatch {
  Matrix originals;
  std::vector<int> labels;
  Index k = 0;
  Matrix augmented;

  Index size() const { return originals.rows(); }
  void check() const;
};

struct AugmentedPredictions {
  Matrix original;   // n x C
  Matrix augmented;  // (n*k) x C
  Matrix mean;       // n x C, the per-example mean of augmented rows
  Index k = 0;
};

AugmentedPredictions predict(const MlpModel& model, const AugmentedBatch& batch);

/// (1/2) mean over examples of (self + translation consistency).
double total_consistency(const AugmentedPredictions& predictions);

struct ConsistencyConfig {
  double lambda_target = 0.0;
  double anneal_rate = 0.0;
  double current = 0.0;
};

/// current = min(target, step * rate); a zero rate disables annealing and
/// sets current = target immediately.
ConsistencyConfig anneal_lambda(ConsistencyConfig config, std::int64_t step);

/// L_SGDRO + lambda * L_c.
double camel_objective(double sgdro_term, double consistency_term, const ConsistencyConfig& config);

// ---------------------------------------------------------------------------
// Differentiable counterparts used by the trainers

/// Per-example cross-entropy from logits, n x 1.
ad::Var cross_entropy(const ad::Var& logits, std::span<const int> labels);

/// sum_i coefficient_i * values_i for an n x 1 column.
ad::Var weighted_sum(const ad::Var& column, const Vector& coefficients);

enum class ConsistencyKind { camel, uda, augmix };

/// Batch consistency term from original logits (n x C) and augmented logits
/// ((n*k) x C). camel: (1/2) mean(L_s + L_t); uda / augmix: mean of the
/// per-example alternative losses.
ad::Var consistency_loss(const ad::Var& original_logits, const ad::Var& augmented_logits, Index k,
                         ConsistencyKind kind = ConsistencyKind::camel);

}  // namespace patchlab::objectives
