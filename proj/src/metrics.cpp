#include "patchlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "patchlab/error.hpp"

namespace patchlab::metrics {

std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < scores.cols(); ++j)
      if (scores(i, j) > scores(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

CellTable subgroup_accuracies(std::span<const int> predicted, const data::Dataset& data) {
  if (static_cast<Index>(predicted.size()) != data.size()) throw ShapeError("one prediction per example required");
  const auto counts = data.cell_counts();
  std::vector<std::vector<Index>> correct(counts.size(), std::vector<Index>(static_cast<std::size_t>(data.subgroups_per_class), 0));
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] == data.y[i]) ++correct[static_cast<std::size_t>(data.y[i])][static_cast<std::size_t>(data.z[i])];
  CellTable table;
  table.sizes = counts;
  for (std::size_t y = 0; y < counts.size(); ++y) {
    auto& row = table.accuracy.emplace_back();
    for (std::size_t z = 0; z < counts[y].size(); ++z) {
      if (counts[y][z] == 0) {
        row.emplace_back();
      } else {
        row.emplace_back(static_cast<double>(correct[y][z]) / static_cast<double>(counts[y][z]));
      }
    }
  }
  return table;
}

CellTable subgroup_accuracies(const MlpModel& model, const data::Dataset& data) {
  const auto predicted = argmax_rows(model.evaluate_logits(data.x));
  return subgroup_accuracies(predicted, data);
}

double robust_accuracy(const CellTable& table) {
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& row : table.accuracy)
    for (const auto& cell : row)
      if (cell) worst = std::min(worst, *cell);
  if (std::isinf(worst)) throw ContractError("robust accuracy needs at least one present cell");
  return worst;
}

double subgroup_gap(const CellTable& table, int y) {
  if (y < 0 || y >= table.num_classes()) throw ContractError("class " + std::to_string(y) + " is not in the table");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& cell : table.accuracy[static_cast<std::size_t>(y)])
    if (cell) {
      lo = std::min(lo, *cell);
      hi = std::max(hi, *cell);
    }
  if (std::isinf(lo)) throw ContractError("class " + std::to_string(y) + " has no present cell");
  return hi - lo;
}

double max_subgroup_gap(const CellTable& table) {
  double gap = 0.0;
  for (int y = 0; y < table.num_classes(); ++y) {
    const auto& row = table.accuracy[static_cast<std::size_t>(y)];
    if (std::any_of(row.begin(), row.end(), [](const auto& c) { return c.has_value(); }))
      gap = std::max(gap, subgroup_gap(table, y));
  }
  return gap;
}

double aggregate_accuracy(std::span<const double> accuracies, std::span<const double> sizes) {
  if (accuracies.size() != sizes.size()) throw ShapeError("one size per cell required");
  double total = 0.0, weight = 0.0;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    if (sizes[i] <= 0.0) throw ContractError("cell sizes must be positive");
    total += sizes[i] * accuracies[i];
    weight += sizes[i];
  }
  if (weight == 0.0) throw ContractError("aggregate accuracy needs at least one cell");
  return total / weight;
}

double aggregate_accuracy(const CellTable& table) {
  std::vector<double> acc, sizes;
  for (std::size_t y = 0; y < table.accuracy.size(); ++y)
    for (std::size_t z = 0; z < table.accuracy[y].size(); ++z)
      if (table.accuracy[y][z]) {
        acc.push_back(*table.accuracy[y][z]);
        sizes.push_back(static_cast<double>(table.sizes[y][z]));
      }
  return aggregate_accuracy(acc, sizes);
}

EvalReport make_report(CellTable table) {
  EvalReport r;
  r.aggregate = aggregate_accuracy(table);
  r.robust = robust_accuracy(table);
  for (int y = 0; y < table.num_classes(); ++y) {
    const auto& row = table.accuracy[static_cast<std::size_t>(y)];
    const bool present = std::any_of(row.begin(), row.end(), [](const auto& c) { return c.has_value(); });
    r.gaps.push_back(present ? subgroup_gap(table, y) : std::numeric_limits<double>::quiet_NaN());
  }
  r.cells = std::move(table);
  return r;
}

EvalReport evaluate(const MlpModel& model, const data::Dataset& data) {
  return make_report(subgroup_accuracies(model, data));
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::string percent(double fraction) {
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "%.2f", 100.0 * fraction);
  return buffer;
}

}  // namespace patchlab::metrics
