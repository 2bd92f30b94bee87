#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchlab/coupled_data.hpp"
#include "patchlab/mlp.hpp"

namespace patchlab::metrics {

/// Per-(class, subgroup) accuracies; absent cells hold std::nullopt and are
/// skipped by every reduction.
struct CellTable {
  std::vector<std::vector<std::optional<double>>> accuracy;
  std::vector<std::vector<Index>> sizes;

  int num_classes() const { return static_cast<int>(accuracy.size()); }
};

/// Row-wise argmax; ties resolve to the lowest column.
std::vector<int> argmax_rows(const Matrix& scores);

CellTable subgroup_accuracies(std::span<const int> predicted, const data::Dataset& data);
CellTable subgroup_accuracies(const MlpModel& model, const data::Dataset& data);

/// Minimum over present cells.
double robust_accuracy(const CellTable& table);
/// max - min over the present cells of class y; 0 for a single cell.
double subgroup_gap(const CellTable& table, int y);
/// Largest per-class gap.
double max_subgroup_gap(const CellTable& table);
/// Size-weighted mean over present cells.
double aggregate_accuracy(const CellTable& table);
double aggregate_accuracy(std::span<const double> accuracies, std::span<const double> sizes);

struct EvalReport {
  CellTable cells;
  double aggregate = 0.0;
  double robust = 0.0;
  std::vector<double> gaps;  // per class; NaN for a class with no present cell
};

EvalReport make_report(CellTable table);
EvalReport evaluate(const MlpModel& model, const data::Dataset& data);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // unbiased; 0 for a single value
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

/// 0.7147 -> "71.47".
std::string percent(double fraction);

}  // namespace patchlab::metrics
