#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "patchlab/coupled_data.hpp"
#include "patchlab/metrics.hpp"
#include "patchlab/mlp.hpp"
#include "patchlab/objectives.hpp"
#include "patchlab/translate.hpp"

namespace patchlab::training {

enum class Method { erm, gdro, sgdro, camel, cdat, subgroup_pairing, heuristic_augmentation };

std::string method_name(Method method);
std::optional<Method> parse_method(const std::string& name);
/// Methods trained with group-stratified batches and per-group weights.
bool uses_groups(Method method);
/// Methods with a consistency term (augmented coupled sets).
bool uses_consistency(Method method);

struct HeuristicAugmentation {
  double noise_sigma = 0.5;
  /// Per-coordinate scale and shift drawn uniformly from [-jitter, jitter].
  double affine_jitter = 0.2;
};

struct TrainConfig {
  Method method = Method::erm;
  std::vector<Index> hidden{64};
  SgdOptions sgd{.learning_rate = 0.05, .momentum = 0.9, .weight_decay = 0.0};
  int epochs = 30;
  Index batch_size = 64;
  /// GDRO / SGDRO step size and generalization adjustment C.
  double group_step = 0.01;
  double adjustment = 0.0;
  objectives::ConsistencyConfig consistency;
  objectives::ConsistencyKind consistency_kind = objectives::ConsistencyKind::camel;
  /// CDAT domain-loss coefficient; the head's gradient reaches the features
  /// scaled by -coefficient.
  double domain_coef = 0.0;
  Index domain_hidden = 16;
  HeuristicAugmentation heuristic;
  /// Estimate I(Yhat; Z | Y) on the test split for the selected model.
  bool estimate_mi = true;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  metrics::EvalReport validation;
  metrics::EvalReport test;
  double lambda = 0.0;
  /// CDAT only: H(Z|Y) minus the domain head's validation cross-entropy.
  double domain_mi = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  MlpModel model;  // parameters of the selected epoch
  int best_epoch = 0;
  std::vector<EpochRecord> history;
  metrics::EvalReport test;
  /// NaN unless TrainConfig::estimate_mi.
  double mi_estimate = 0.0;
  std::vector<double> domain_mi_trace;
};

/// Trains a classifier with `config.method` and selects the epoch with the
/// best validation robust accuracy (earliest on ties). Consistency methods
/// built on translators (camel) need a bank; the other methods ignore it.
TrainResult train(const data::DatasetSplit& split, const TrainConfig& config,
                  const translate::TranslatorBank* bank = nullptr);

}  // namespace patchlab::training
