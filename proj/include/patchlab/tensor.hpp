#pragma once

#include <Eigen/Dense>
#include <string>

namespace patchlab {

// Two-dimensional row-major view of the data: rows are examples, columns are
// features (or classes, for predictions).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Trainable tensor with its gradient and SGD momentum buffer.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix momentum;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())),
        momentum(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

std::string shape_string(Index rows, Index cols);

}  // namespace patchlab
