#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "patchlab/tensor.hpp"

// Reverse-mode differentiation over dense matrices. A graph is built eagerly
// by the operations below and consumed by backward(); nodes are reference
// counted so a graph lives exactly as long as the Vars that reach it.
namespace patchlab::ad {

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> propagate;
  Parameter* parameter = nullptr;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double scalar() const;
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
/// Leaf bound to a Parameter; backward() accumulates into parameter.grad.
Var param(Parameter& parameter);

Var matmul(const Var& a, const Var& b);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
/// Sum of all entries, 1 x 1.
Var sum(const Var& a);
Var mean(const Var& a);
/// Row sums, n x 1.
Var row_sum(const Var& a);
/// out[i] = a(i, columns[i]), n x 1.
Var pick(const Var& a, std::span<const int> columns);
Var select_rows(const Var& a, std::span<const Index> rows);
Var vstack(std::span<const Var> parts);
/// Mean over consecutive blocks of `block` rows: (n*block) x m -> n x m.
Var block_mean(const Var& a, Index block);
/// Each row repeated `times` consecutively: n x m -> (n*times) x m.
Var repeat_rows(const Var& a, Index times);
/// Sum over consecutive blocks of `block` rows.
Var block_sum(const Var& a, Index block);
/// Identity forward; multiplies the incoming gradient by -coefficient.
Var gradient_reversal(const Var& a, double coefficient);

/// Populates gradients of every node reachable from `loss` and accumulates
/// them into the bound Parameters. `loss` must be 1 x 1.
void backward(const Var& loss);

}  // namespace patchlab::ad
