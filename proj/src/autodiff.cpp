#include "patchlab/autodiff.hpp"

#include <cmath>
#include <unordered_set>

#include "patchlab/error.hpp"

namespace patchlab {

std::string shape_string(Index rows, Index cols) {
  return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")";
}

namespace ad {

namespace {

using Propagate = std::function<void(Node&)>;

Var make(Matrix value, std::vector<std::shared_ptr<Node>> parents, Propagate propagate) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->propagate = std::move(propagate);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

double Var::scalar() const {
  if (rows() != 1 || cols() != 1)
    throw ContractError("scalar(): value has shape " + shape_string(rows(), cols()));
  return node_->value(0, 0);
}

Var constant(Matrix value) { return make(std::move(value), {}, nullptr); }

Var param(Parameter& parameter) {
  auto node = std::make_shared<Node>();
  node->value = parameter.value;
  node->parameter = &parameter;
  node->requires_grad = true;
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " x " +
                     shape_string(b.rows(), b.cols()));
  auto pa = a.node(), pb = b.node();
  return make(a.value() * b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad.noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->grad.noalias() += pa->value.transpose() * self.grad;
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: " + shape_string(a.rows(), a.cols()) + " + row " +
                     shape_string(row.rows(), row.cols()));
  auto pa = a.node(), pr = row.node();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {pa, pr}, [pa, pr](Node& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pr->requires_grad) pr->grad += self.grad.colwise().sum();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  return make(a.value() + b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pb->requires_grad) pb->grad += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  return make(a.value() - b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pb->requires_grad) pb->grad -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  return make(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->grad += self.grad.cwiseProduct(pb->value);
    if (pb->requires_grad) pb->grad += self.grad.cwiseProduct(pa->value);
  });
}

Var scale(const Var& a, double factor) {
  auto pa = a.node();
  return make(a.value() * factor, {pa}, [pa, factor](Node& self) { pa->grad += factor * self.grad; });
}

Var add_scalar(const Var& a, double offset) {
  auto pa = a.node();
  return make(a.value().array() + offset, {pa}, [pa](Node& self) { pa->grad += self.grad; });
}

Var relu(const Var& a) {
  auto pa = a.node();
  return make(a.value().cwiseMax(0.0), {pa}, [pa](Node& self) {
    pa->grad.array() += (pa->value.array() > 0.0).select(self.grad.array(), 0.0);
  });
}

Var sigmoid(const Var& a) {
  auto pa = a.node();
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return make(std::move(out), {pa}, [pa](Node& self) {
    pa->grad.array() += self.grad.array() * self.value.array() * (1.0 - self.value.array());
  });
}

Var log(const Var& a) {
  auto pa = a.node();
  return make(a.value().array().log().matrix(), {pa}, [pa](Node& self) {
    pa->grad.array() += self.grad.array() / pa->value.array();
  });
}

Var abs(const Var& a) {
  auto pa = a.node();
  return make(a.value().cwiseAbs(), {pa}, [pa](Node& self) {
    pa->grad.array() += self.grad.array() * pa->value.array().sign();
  });
}

Var softmax(const Var& logits) {
  auto pa = logits.node();
  return make(row_softmax(logits.value()), {pa}, [pa](Node& self) {
    // d/dz_j = p_j (g_j - sum_k g_k p_k)
    const Vector inner = self.grad.cwiseProduct(self.value).rowwise().sum();
    pa->grad.array() +=
        self.value.array() * (self.grad.colwise() - inner).array();
  });
}

Var log_softmax(const Var& logits) {
  auto pa = logits.node();
  const Matrix& z = logits.value();
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double peak = z.row(i).maxCoeff();
    const double lse = peak + std::log((z.row(i).array() - peak).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  return make(std::move(out), {pa}, [pa](Node& self) {
    const Matrix probs = self.value.array().exp();
    const Vector total = self.grad.rowwise().sum();
    pa->grad += self.grad - (probs.array().colwise() * total.array()).matrix();
  });
}

Var sum(const Var& a) {
  auto pa = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {pa}, [pa](Node& self) { pa->grad.array() += self.grad(0, 0); });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  auto pa = a.node();
  return make(a.value().rowwise().sum(), {pa}, [pa](Node& self) {
    pa->grad.colwise() += self.grad.col(0);
  });
}

Var pick(const Var& a, std::span<const int> columns) {
  if (static_cast<Index>(columns.size()) != a.rows())
    throw ShapeError("pick: " + std::to_string(columns.size()) + " labels for " +
                     std::to_string(a.rows()) + " rows");
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const int c = columns[static_cast<std::size_t>(i)];
    if (c < 0 || c >= a.cols()) throw ShapeError("pick: column " + std::to_string(c) + " out of range");
    out(i, 0) = a.value()(i, c);
  }
  auto pa = a.node();
  std::vector<int> cols(columns.begin(), columns.end());
  return make(std::move(out), {pa}, [pa, cols = std::move(cols)](Node& self) {
    for (Index i = 0; i < self.grad.rows(); ++i) pa->grad(i, cols[static_cast<std::size_t>(i)]) += self.grad(i, 0);
  });
}

Var select_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("select_rows: row out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  auto pa = a.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make(std::move(out), {pa}, [pa, idx = std::move(idx)](Node& self) {
    for (std::size_t i = 0; i < idx.size(); ++i) pa->grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("vstack of nothing");
  Index rows = 0;
  const Index cols = parts.front().cols();
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
    parents.push_back(p.node());
  }
  Matrix out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  auto captured = parents;
  return make(std::move(out), std::move(parents), [captured](Node& self) {
    Index off = 0;
    for (const auto& p : captured) {
      if (p->requires_grad) p->grad += self.grad.middleRows(off, p->value.rows());
      off += p->value.rows();
    }
  });
}

Var block_sum(const Var& a, Index block) {
  if (block <= 0 || a.rows() % block != 0)
    throw ShapeError("block_sum: " + std::to_string(a.rows()) + " rows not divisible by " + std::to_string(block));
  const Index n = a.rows() / block;
  Matrix out = Matrix::Zero(n, a.cols());
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < block; ++j) out.row(i) += a.value().row(i * block + j);
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, block](Node& self) {
    for (Index r = 0; r < pa->grad.rows(); ++r) pa->grad.row(r) += self.grad.row(r / block);
  });
}

Var block_mean(const Var& a, Index block) { return scale(block_sum(a, block), 1.0 / static_cast<double>(block)); }

Var repeat_rows(const Var& a, Index times) {
  if (times <= 0) throw ShapeError("repeat_rows: non-positive count");
  Matrix out(a.rows() * times, a.cols());
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = a.value().row(r / times);
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, times](Node& self) {
    for (Index r = 0; r < self.grad.rows(); ++r) pa->grad.row(r / times) += self.grad.row(r);
  });
}

Var gradient_reversal(const Var& a, double coefficient) {
  auto pa = a.node();
  return make(a.value(), {pa}, [pa, coefficient](Node& self) { pa->grad -= coefficient * self.grad; });
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.rows(), loss.cols()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* node : order) node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
  loss.node()->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->propagate) node->propagate(*node);
  }
  for (Node* node : order)
    if (node->parameter != nullptr) node->parameter->grad += node->grad;
}

}  // namespace ad
}  // namespace patchlab
