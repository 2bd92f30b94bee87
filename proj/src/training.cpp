#include "patchlab/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "patchlab/autodiff.hpp"
#include "patchlab/error.hpp"
#include "patchlab/invariance.hpp"

namespace patchlab::training {

namespace {

using objectives::GroupWeights;

constexpr std::uint64_t kInitStream = 10;
constexpr std::uint64_t kBatchStream = 11;
constexpr std::uint64_t kAugmentStream = 12;
constexpr std::uint64_t kHeadStream = 13;

struct Cells {
  // rows[y][z]: training rows of each cell
  std::vector<std::vector<std::vector<Index>>> rows;

  explicit Cells(const data::Dataset& d)
      : rows(static_cast<std::size_t>(d.num_classes),
             std::vector<std::vector<Index>>(static_cast<std::size_t>(d.subgroups_per_class))) {
    for (Index i = 0; i < d.size(); ++i)
      rows[static_cast<std::size_t>(d.y[static_cast<std::size_t>(i)])][static_cast<std::size_t>(d.z[static_cast<std::size_t>(i)])]
          .push_back(i);
  }
  const std::vector<Index>& at(int y, int z) const {
    return rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(z)];
  }
};

/// Online group-DRO state: one simplex over all nonempty groups (gdro) or
/// one per class (sgdro-style methods).
class GroupSolver {
 public:
  GroupSolver(const data::Dataset& train, bool per_class, double step, double adjustment)
      : adjustment_(adjustment) {
    const int k = train.subgroups_per_class;
    const auto counts = train.group_counts();
    if (per_class) {
      for (int y = 0; y < train.num_classes; ++y) {
        Block block;
        for (int z = 0; z < k; ++z)
          if (counts[static_cast<std::size_t>(y * k + z)] > 0) block.groups.push_back(y * k + z);
        if (!block.groups.empty()) blocks_.push_back(std::move(block));
      }
    } else {
      Block block;
      for (int g = 0; g < train.num_groups(); ++g)
        if (counts[static_cast<std::size_t>(g)] > 0) block.groups.push_back(g);
      blocks_.push_back(std::move(block));
    }
    for (auto& block : blocks_) {
      block.state = GroupWeights::uniform(static_cast<Index>(block.groups.size()), step);
      for (int g : block.groups) block.sizes.push_back(counts[static_cast<std::size_t>(g)]);
    }
  }

  /// Updates the weights from the batch's per-group mean losses and returns
  /// per-example coefficients of the weighted loss.
  Vector coefficients(const Matrix& per_example, std::span<const int> groups) {
    const auto n = static_cast<Index>(groups.size());
    const int num_groups = group_count();
    std::vector<double> sum(static_cast<std::size_t>(num_groups), 0.0);
    std::vector<Index> count(static_cast<std::size_t>(num_groups), 0);
    for (Index i = 0; i < n; ++i) {
      sum[static_cast<std::size_t>(groups[static_cast<std::size_t>(i)])] += per_example(i, 0);
      ++count[static_cast<std::size_t>(groups[static_cast<std::size_t>(i)])];
    }
    std::vector<double> coef_by_group(static_cast<std::size_t>(num_groups), 0.0);
    const double block_share = 1.0 / static_cast<double>(blocks_.size());
    for (auto& block : blocks_) {
      Vector losses(static_cast<Index>(block.groups.size()));
      for (std::size_t j = 0; j < block.groups.size(); ++j) {
        const auto g = static_cast<std::size_t>(block.groups[j]);
        if (count[g] == 0) throw ContractError("batch is missing group " + std::to_string(g));
        losses(static_cast<Index>(j)) = sum[g] / static_cast<double>(count[g]);
      }
      block.state = objectives::gdro_stochastic_update(block.state, losses, block.sizes, adjustment_).state;
      for (std::size_t j = 0; j < block.groups.size(); ++j) {
        const auto g = static_cast<std::size_t>(block.groups[j]);
        coef_by_group[g] = block_share * block.state.weights(static_cast<Index>(j)) / static_cast<double>(count[g]);
      }
    }
    Vector coef(n);
    for (Index i = 0; i < n; ++i) coef(i) = coef_by_group[static_cast<std::size_t>(groups[static_cast<std::size_t>(i)])];
    return coef;
  }

 private:
  struct Block {
    std::vector<int> groups;
    std::vector<Index> sizes;
    GroupWeights state;
  };
  int group_count() const {
    int most = 0;
    for (const auto& b : blocks_)
      for (int g : b.groups) most = std::max(most, g + 1);
    return most;
  }

  double adjustment_;
  std::vector<Block> blocks_;
};

Matrix gather(const Matrix& x, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

/// Augmented coupled sets (k rows per example) for a batch.
class Augmenter {
 public:
  Augmenter(const TrainConfig& config, const data::Dataset& train, const translate::TranslatorBank* bank)
      : method_(config.method), heuristic_(config.heuristic), train_(train), cells_(train),
        rng_(config.seed, kAugmentStream) {
    if (method_ == Method::camel) {
      if (bank == nullptr) throw ConfigError("camel needs translators (translator source must not be none)");
      translated_ = translate::augment_dataset(train, *bank);
    }
  }

  Matrix batch(std::span<const Index> rows) {
    const Index k = train_.subgroups_per_class, d = train_.input_dim();
    Matrix out(static_cast<Index>(rows.size()) * k, d);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const Index i = rows[b];
      const int y = train_.y[static_cast<std::size_t>(i)], z = train_.z[static_cast<std::size_t>(i)];
      for (int to = 0; to < k; ++to) {
        const Index r = static_cast<Index>(b) * k + to;
        if (method_ == Method::camel) {
          out.row(r) = translated_.row(i * k + to);
        } else if (to == z) {
          out.row(r) = train_.x.row(i);
        } else if (method_ == Method::subgroup_pairing) {
          const auto& pool = cells_.at(y, to);
          out.row(r) = pool.empty() ? train_.x.row(i)
                                    : train_.x.row(pool[static_cast<std::size_t>(rng_.below(pool.size()))]);
        } else {
          for (Index j = 0; j < d; ++j) {
            const double scale = 1.0 + rng_.uniform(-heuristic_.affine_jitter, heuristic_.affine_jitter);
            const double shift = rng_.uniform(-heuristic_.affine_jitter, heuristic_.affine_jitter);
            out(r, j) = train_.x(i, j) * scale + shift + heuristic_.noise_sigma * rng_.normal();
          }
        }
      }
    }
    return out;
  }

 private:
  Method method_;
  HeuristicAugmentation heuristic_;
  const data::Dataset& train_;
  Cells cells_;
  Rng rng_;
  Matrix translated_;
};

Matrix log_probabilities(const Matrix& logits) {
  Matrix out = logits;
  for (Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

/// Class-conditional domain heads on penultimate features.
class DomainHeads {
 public:
  DomainHeads(Index feature_dim, const data::Dataset& train, Index hidden, std::uint64_t seed)
      : k_(train.subgroups_per_class) {
    Rng rng(seed, kHeadStream);
    for (int y = 0; y < train.num_classes; ++y) {
      std::vector<Index> widths{feature_dim};
      if (hidden > 0) widths.push_back(hidden);
      widths.push_back(k_);
      heads_.emplace_back(widths, rng);
    }
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& h : heads_)
      for (auto* p : h.parameters()) out.push_back(p);
    return out;
  }

  /// Summed domain cross-entropy over the batch divided by its size.
  ad::Var loss(const ad::Var& features, std::span<const int> y, std::span<const int> z) {
    const auto n = static_cast<Index>(y.size());
    ad::Var total;
    for (std::size_t c = 0; c < heads_.size(); ++c) {
      std::vector<Index> rows;
      std::vector<int> labels;
      for (Index i = 0; i < n; ++i)
        if (y[static_cast<std::size_t>(i)] == static_cast<int>(c)) {
          rows.push_back(i);
          labels.push_back(z[static_cast<std::size_t>(i)]);
        }
      if (rows.empty()) continue;
      auto ce = ad::sum(objectives::cross_entropy(heads_[c].logits(ad::select_rows(features, rows)), labels));
      total = total.node() ? ad::add(total, ce) : ce;
    }
    return ad::scale(total, 1.0 / static_cast<double>(n));
  }

  /// Empirical H(Z|Y) minus mean head cross-entropy.
  double mi(const Matrix& features, const data::Dataset& data) const {
    double ce = 0.0;
    for (Index i = 0; i < data.size(); ++i) {
      const auto y = static_cast<std::size_t>(data.y[static_cast<std::size_t>(i)]);
      const Matrix lp = log_probabilities(heads_[y].evaluate_logits(features.row(i)));
      ce -= lp(0, data.z[static_cast<std::size_t>(i)]);
    }
    ce /= static_cast<double>(data.size());
    const auto counts = data.cell_counts();
    double h = 0.0;
    for (const auto& row : counts) {
      Index total = 0;
      for (Index c : row) total += c;
      for (Index c : row)
        if (c > 0) h -= static_cast<double>(c) / static_cast<double>(data.size()) * std::log(static_cast<double>(c) / static_cast<double>(total));
    }
    return h - ce;
  }

 private:
  Index k_;
  std::vector<MlpModel> heads_;
};

}  // namespace

std::string method_name(Method method) {
  switch (method) {
    case Method::erm: return "erm";
    case Method::gdro: return "gdro";
    case Method::sgdro: return "sgdro";
    case Method::camel: return "camel";
    case Method::cdat: return "cdat";
    case Method::subgroup_pairing: return "subgroup_pairing";
    case Method::heuristic_augmentation: return "heuristic_augmentation";
  }
  return "unknown";
}

std::optional<Method> parse_method(const std::string& name) {
  for (Method m : {Method::erm, Method::gdro, Method::sgdro, Method::camel, Method::cdat, Method::subgroup_pairing,
                   Method::heuristic_augmentation})
    if (method_name(m) == name) return m;
  return std::nullopt;
}

bool uses_groups(Method method) { return method != Method::erm && method != Method::cdat; }

bool uses_consistency(Method method) {
  return method == Method::camel || method == Method::subgroup_pairing || method == Method::heuristic_augmentation;
}

TrainResult train(const data::DatasetSplit& split, const TrainConfig& config, const translate::TranslatorBank* bank) {
  const data::Dataset& train = split.train;
  train.check();
  if (train.size() == 0) throw ParameterError("training split is empty");
  if (config.epochs < 1) throw ParameterError("epochs must be positive");
  if (config.batch_size < 1) throw ParameterError("batch size must be positive");
  const int num_classes = train.num_classes;
  const Index k = train.subgroups_per_class;

  std::vector<Index> widths{train.input_dim()};
  for (Index h : config.hidden) widths.push_back(h);
  widths.push_back(num_classes);
  Rng init(config.seed, kInitStream);
  MlpModel model(widths, init);
  Rng batch_rng(config.seed, kBatchStream);

  const bool consistency = uses_consistency(config.method);
  std::optional<Augmenter> augmenter;
  if (consistency) augmenter.emplace(config, train, bank);
  std::optional<GroupSolver> solver;
  if (uses_groups(config.method))
    solver.emplace(train, config.method != Method::gdro, config.group_step, config.adjustment);
  std::optional<DomainHeads> heads;
  if (config.method == Method::cdat)
    heads.emplace(config.hidden.empty() ? train.input_dim() : config.hidden.back(), train, config.domain_hidden, config.seed);

  std::vector<Parameter*> params = model.parameters();
  if (heads)
    for (auto* p : heads->parameters()) params.push_back(p);

  TrainResult result;
  result.mi_estimate = std::numeric_limits<double>::quiet_NaN();
  double best_robust = -1.0;
  std::int64_t step = 0;
  objectives::ConsistencyConfig lambda = objectives::anneal_lambda(config.consistency, 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto batches = uses_groups(config.method) ? data::subgroup_batches(train, config.batch_size, batch_rng)
                                                    : data::shuffled_batches(train.size(), config.batch_size, batch_rng);
    for (const auto& rows : batches) {
      std::vector<int> labels, subgroups, groups;
      for (Index i : rows) {
        labels.push_back(train.y[static_cast<std::size_t>(i)]);
        subgroups.push_back(train.z[static_cast<std::size_t>(i)]);
        groups.push_back(train.group(i));
      }
      const auto x = ad::constant(gather(train.x, rows));
      ad::Var loss;
      if (heads) {
        const auto features = model.features(x);
        loss = ad::mean(objectives::cross_entropy(model.head(features), labels));
        const auto reversed = ad::gradient_reversal(features, config.domain_coef);
        loss = ad::add(loss, heads->loss(reversed, labels, subgroups));
      } else {
        const auto logits = model.logits(x);
        const auto ce = objectives::cross_entropy(logits, labels);
        loss = solver ? objectives::weighted_sum(ce, solver->coefficients(ce.value(), groups)) : ad::mean(ce);
        lambda = objectives::anneal_lambda(config.consistency, step);
        if (consistency && lambda.current != 0.0) {
          const auto augmented = model.logits(ad::constant(augmenter->batch(rows)));
          const auto term = objectives::consistency_loss(logits, augmented, k, config.consistency_kind);
          loss = ad::add(loss, ad::scale(term, lambda.current));
        }
      }
      if (!std::isfinite(loss.scalar()))
        throw TrainingError(method_name(config.method) + " training diverged at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(step));
      for (auto* p : params) p->zero_grad();
      ad::backward(loss);
      try {
        sgd_step(params, config.sgd);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step) + ")");
      }
      ++step;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.validation = metrics::evaluate(model, split.validation);
    record.test = metrics::evaluate(model, split.test);
    record.lambda = lambda.current;
    if (heads) {
      record.domain_mi = heads->mi(model.evaluate_features(split.validation.x), split.validation);
      result.domain_mi_trace.push_back(record.domain_mi);
    }
    record.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (record.validation.robust > best_robust) {
      best_robust = record.validation.robust;
      result.best_epoch = epoch;
      result.model = model;
      result.test = record.test;
    }
    result.history.push_back(std::move(record));
  }

  if (config.estimate_mi) {
    const Matrix features = log_probabilities(result.model.evaluate_logits(split.test.x));
    invariance::HeadConfig head;
    head.seed = config.seed;
    result.mi_estimate = invariance::variational_mi_estimate(features, split.test.y, split.test.z, num_classes,
                                                             static_cast<int>(k), head)
                             .estimate;
  }
  return result;
}

}  // namespace patchlab::training
