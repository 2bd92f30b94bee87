#include "patchlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "patchlab/divergences.hpp"
#include "patchlab/error.hpp"

namespace patchlab::objectives {

namespace dv = patchlab::divergences;

double erm_loss(const Matrix& predictions, std::span<const int> labels) {
  if (predictions.rows() != static_cast<Index>(labels.size()))
    throw ShapeError("erm_loss: " + std::to_string(predictions.rows()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw ContractError("erm_loss: empty batch");
  double total = 0.0;
  for (Index i = 0; i < predictions.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= predictions.cols()) throw ShapeError("erm_loss: label out of range");
    const double p = predictions(i, y);
    total += p > 0.0 ? -std::log(p) : std::numeric_limits<double>::infinity();
  }
  return total / static_cast<double>(labels.size());
}

double gdro_loss(std::span<const std::optional<double>> group_losses) {
  std::optional<double> worst;
  for (const auto& l : group_losses)
    if (l) worst = worst ? std::max(*worst, *l) : *l;
  if (!worst) throw ContractError("gdro_loss: every group is empty");
  return *worst;
}

double sgdro_loss(const std::vector<std::vector<std::optional<double>>>& cells) {
  if (cells.empty()) throw ContractError("sgdro_loss: no classes");
  double total = 0.0;
  for (std::size_t y = 0; y < cells.size(); ++y) {
    std::optional<double> worst;
    for (const auto& l : cells[y])
      if (l) worst = worst ? std::max(*worst, *l) : *l;
    if (!worst) throw ContractError("sgdro_loss: class " + std::to_string(y) + " has no nonempty subgroup");
    total += *worst;
  }
  return total / static_cast<double>(cells.size());
}

GroupWeights GroupWeights::uniform(Index groups, double step_size) {
  if (groups < 1) throw ParameterError("GroupWeights needs at least one group");
  if (!(step_size >= 0.0)) throw ParameterError("GroupWeights step size must be non-negative");
  return {Vector::Constant(groups, 1.0 / static_cast<double>(groups)), step_size};
}

void GroupWeights::check() const {
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-12)
    throw ContractError("group weights left the simplex");
}

GdroUpdate gdro_stochastic_update(const GroupWeights& state, const Vector& losses,
                                  std::span<const Index> group_sizes, double adjustment) {
  const Index g = state.weights.size();
  if (losses.size() != g || static_cast<Index>(group_sizes.size()) != g)
    throw ShapeError("gdro_stochastic_update: one loss and one size per group required");
  if (!losses.allFinite()) throw ContractError("gdro_stochastic_update: non-finite group loss");
  GdroUpdate out;
  out.adjusted_losses = losses;
  if (adjustment != 0.0) {
    for (Index i = 0; i < g; ++i) {
      const Index n = group_sizes[static_cast<std::size_t>(i)];
      if (n <= 0)
        throw ParameterError("gdro_stochastic_update: group " + std::to_string(i) +
                             " has size 0 but the adjustment coefficient is nonzero");
      out.adjusted_losses(i) += adjustment / std::sqrt(static_cast<double>(n));
    }
  }
  // Shift by the max exponent so the update cannot overflow.
  const Vector exponent = state.step_size * out.adjusted_losses;
  const double peak = exponent.maxCoeff();
  Vector w = state.weights.array() * (exponent.array() - peak).exp();
  w /= w.sum();
  out.state = {std::move(w), state.step_size};
  out.weighted_loss = out.state.weights.dot(out.adjusted_losses);
  return out;
}

double self_consistency(const Matrix& augmented_predictions) {
  const Index k = augmented_predictions.rows();
  if (k < 2) throw ContractError("self_consistency needs at least two augmented predictions");
  const RowVector mean = augmented_predictions.colwise().mean();
  double total = 0.0;
  for (Index z = 0; z < k; ++z) total += dv::kl(augmented_predictions.row(z), mean);
  return total / static_cast<double>(k);
}

double translation_consistency(const RowVector& original, const RowVector& mean) { return dv::kl(original, mean); }

double uda_consistency(const RowVector& original, const Matrix& augmented_predictions) {
  if (augmented_predictions.rows() < 1) throw ContractError("uda_consistency needs an augmented prediction");
  double total = 0.0;
  for (Index z = 0; z < augmented_predictions.rows(); ++z) total += dv::kl(original, augmented_predictions.row(z));
  return total;
}

double augmix_consistency(const RowVector& original, const Matrix& augmented_predictions) {
  const Index k = augmented_predictions.rows();
  if (k < 1) throw ContractError("augmix_consistency needs an augmented prediction");
  Matrix all(k + 1, original.size());
  all.row(0) = original;
  all.bottomRows(k) = augmented_predictions;
  const RowVector mean = all.colwise().mean();
  double total = 0.0;
  for (Index r = 0; r <= k; ++r) total += dv::kl(all.row(r), mean);
  return total / static_cast<double>(k + 1);
}

void AugmentedBatch::check() const {
  if (k < 1) throw ContractError("augmented batch needs k >= 1");
  if (static_cast<Index>(labels.size()) != originals.rows()) throw ShapeError("augmented batch: label count mismatch");
  if (augmented.rows() != originals.rows() * k || augmented.cols() != originals.cols())
    throw ShapeError("augmented batch: expected " + std::to_string(originals.rows() * k) + " augmented rows");
}

AugmentedPredictions predict(const MlpModel& model, const AugmentedBatch& batch) {
  batch.check();
  AugmentedPredictions out;
  out.k = batch.k;
  out.original = forward(model, batch.originals);
  out.augmented = forward(model, batch.augmented);
  out.mean.resize(batch.size(), out.original.cols());
  for (Index i = 0; i < batch.size(); ++i) out.mean.row(i) = out.augmented.middleRows(i * batch.k, batch.k).colwise().mean();
  return out;
}

double total_consistency(const AugmentedPredictions& p) {
  const Index n = p.original.rows();
  if (n == 0) throw ContractError("total_consistency: empty batch");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Matrix aug = p.augmented.middleRows(i * p.k, p.k);
    total += self_consistency(aug) + translation_consistency(p.original.row(i), p.mean.row(i));
  }
  return 0.5 * total / static_cast<double>(n);
}

ConsistencyConfig anneal_lambda(ConsistencyConfig config, std::int64_t step) {
  if (config.anneal_rate < 0.0) throw ParameterError("anneal rate must be non-negative");
  if (config.lambda_target < 0.0) throw ParameterError("lambda target must be non-negative");
  config.current = config.anneal_rate == 0.0
                       ? config.lambda_target
                       : std::min(config.lambda_target, static_cast<double>(step) * config.anneal_rate);
  return config;
}

double camel_objective(double sgdro_term, double consistency_term, const ConsistencyConfig& config) {
  if (config.current < 0.0) throw ContractError("camel_objective: negative lambda");
  return sgdro_term + config.current * consistency_term;
}

ad::Var cross_entropy(const ad::Var& logits, std::span<const int> labels) {
  return ad::scale(ad::pick(ad::log_softmax(logits), labels), -1.0);
}

ad::Var weighted_sum(const ad::Var& column, const Vector& coefficients) {
  if (column.cols() != 1 || column.rows() != coefficients.size())
    throw ShapeError("weighted_sum: column of " + std::to_string(column.rows()) + " vs " +
                     std::to_string(coefficients.size()) + " coefficients");
  return ad::sum(ad::mul(column, ad::constant(Matrix(coefficients))));
}

namespace {
// KL of each row of (probs, log_probs) against the matching row of log_target.
ad::Var kl_rows(const ad::Var& probs, const ad::Var& log_probs, const ad::Var& log_target) {
  return ad::row_sum(ad::mul(probs, ad::sub(log_probs, log_target)));
}
}  // namespace

ad::Var consistency_loss(const ad::Var& original_logits, const ad::Var& augmented_logits, Index k,
                         ConsistencyKind kind) {
  const Index n = original_logits.rows();
  if (n == 0) throw ContractError("consistency_loss: empty batch");
  if (augmented_logits.rows() != n * k) throw ShapeError("consistency_loss: expected n*k augmented rows");
  const auto log_orig = ad::log_softmax(original_logits);
  const auto p_orig = ad::softmax(original_logits);
  const auto log_aug = ad::log_softmax(augmented_logits);
  const auto p_aug = ad::softmax(augmented_logits);

  switch (kind) {
    case ConsistencyKind::camel: {
      if (k < 2) throw ContractError("self-consistency needs k >= 2");
      const auto log_mean = ad::log(ad::block_mean(p_aug, k));
      const auto self = ad::scale(ad::block_sum(kl_rows(p_aug, log_aug, ad::repeat_rows(log_mean, k)), k),
                                  1.0 / static_cast<double>(k));
      const auto translation = kl_rows(p_orig, log_orig, log_mean);
      return ad::scale(ad::mean(ad::add(self, translation)), 0.5);
    }
    case ConsistencyKind::uda: {
      const auto per = ad::block_sum(
          kl_rows(ad::repeat_rows(p_orig, k), ad::repeat_rows(log_orig, k), log_aug), k);
      return ad::mean(per);
    }
    case ConsistencyKind::augmix: {
      // mean over k+1 rows: (p_orig + sum_z p_aug_z) / (k + 1)
      const double w = 1.0 / static_cast<double>(k + 1);
      const auto mix = ad::scale(ad::add(p_orig, ad::block_sum(p_aug, k)), w);
      const auto log_mix = ad::log(mix);
      const auto orig_term = kl_rows(p_orig, log_orig, log_mix);
      const auto aug_terms = ad::block_sum(kl_rows(p_aug, log_aug, ad::repeat_rows(log_mix, k)), k);
      return ad::mean(ad::scale(ad::add(orig_term, aug_terms), w));
    }
  }
  throw ContractError("unknown consistency kind");
}

}  // namespace patchlab::objectives
