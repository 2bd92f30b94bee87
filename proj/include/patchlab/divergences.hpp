#pragma once

// KL / Jensen-Shannon machinery on finite categorical distributions, and the
// optimal-discriminator identities that tie GAN losses to the JSD.
//
// Distributions are any Eigen dense expression (row or column vector); a set
// of k distributions is the k rows of a matrix. All logarithms are natural.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>

#include "patchlab/error.hpp"
#include "patchlab/tensor.hpp"

namespace patchlab::divergences {

inline constexpr double kNormalizationTolerance = 1e-12;
inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// x log(x / y) with 0 log(0 / y) = 0 and +inf when x > 0 = y.
inline double relative_entropy_term(double x, double y) {
  if (x == 0.0) return 0.0;
  if (y == 0.0) return kInfinity;
  return x * std::log(x / y);
}

template <typename Derived>
void check_categorical(const Eigen::DenseBase<Derived>& p, const char* what = "distribution") {
  if (p.size() < 1) throw ContractError(std::string(what) + ": empty support");
  if ((p.derived().array() < 0.0).any() || !p.derived().allFinite())
    throw ContractError(std::string(what) + ": negative or non-finite probability");
  const double total = p.sum();
  if (std::abs(total - 1.0) > kNormalizationTolerance)
    throw ContractError(std::string(what) + ": probabilities sum to " + std::to_string(total));
}

template <typename A, typename B>
void check_same_support(const Eigen::DenseBase<A>& p, const Eigen::DenseBase<B>& q) {
  if (p.size() != q.size())
    throw ShapeError("support size mismatch: " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
}

/// KL(p || q); +inf when p is not absolutely continuous w.r.t. q.
template <typename A, typename B>
double kl(const Eigen::DenseBase<A>& p, const Eigen::DenseBase<B>& q) {
  check_same_support(p, q);
  check_categorical(p, "kl: p");
  check_categorical(q, "kl: q");
  const auto& pe = p.derived();
  const auto& qe = q.derived();
  double total = 0.0;
  for (Index i = 0; i < pe.size(); ++i) {
    const double term = relative_entropy_term(pe(i), qe(i));
    if (std::isinf(term)) return kInfinity;
    total += term;
  }
  return std::max(total, 0.0);
}

/// Weighted JSD sum_i w_i KL(P_i || M), M = sum_i w_i P_i, over the rows of
/// `dists`. Always finite.
template <typename D, typename W>
double weighted_jsd(const Eigen::MatrixBase<D>& dists, const Eigen::MatrixBase<W>& weights) {
  const Index k = dists.rows();
  if (k < 2) throw ContractError("jsd needs at least two distributions, got " + std::to_string(k));
  if (weights.size() != k) throw ShapeError("jsd: one weight per distribution required");
  check_categorical(weights, "jsd: weights");
  for (Index i = 0; i < k; ++i) check_categorical(dists.row(i), "jsd: input");
  RowVector mixture = RowVector::Zero(dists.cols());
  for (Index i = 0; i < k; ++i) mixture += weights(i) * dists.row(i);
  double total = 0.0;
  for (Index i = 0; i < k; ++i) {
    if (weights(i) == 0.0) continue;
    double row = 0.0;
    for (Index j = 0; j < dists.cols(); ++j) row += relative_entropy_term(dists(i, j), mixture(j));
    total += weights(i) * row;
  }
  return std::max(total, 0.0);
}

/// Uniformly weighted JSD of the rows of `dists`; lies in [0, log k].
template <typename D>
double jsd(const Eigen::MatrixBase<D>& dists) {
  const Index k = dists.rows();
  if (k < 2) throw ContractError("jsd needs at least two distributions, got " + std::to_string(k));
  return weighted_jsd(dists, Vector::Constant(k, 1.0 / static_cast<double>(k)));
}

template <typename A, typename B>
double jsd(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  check_same_support(p, q);
  Matrix rows(2, p.size());
  rows.row(0) = p.derived().reshaped(1, p.size());
  rows.row(1) = q.derived().reshaped(1, q.size());
  return jsd(rows);
}

/// sqrt(JSD(p,q)) + sqrt(JSD(q,r)) - sqrt(JSD(p,r)); non-negative up to
/// rounding because sqrt(JSD) is a metric.
template <typename A, typename B, typename C>
double jsd_metric_gap(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q, const Eigen::MatrixBase<C>& r) {
  return std::sqrt(jsd(p, q)) + std::sqrt(jsd(q, r)) - std::sqrt(jsd(p, r));
}

/// I(X; Z) for Z uniform over the rows of `components` and X ~ row Z,
/// evaluated directly on the joint table.
template <typename D>
double mixture_mutual_information(const Eigen::MatrixBase<D>& components) {
  const Index k = components.rows();
  if (k < 2) throw ContractError("mixture_mutual_information needs k >= 2");
  for (Index i = 0; i < k; ++i) check_categorical(components.row(i), "mixture component");
  const double pz = 1.0 / static_cast<double>(k);
  const Matrix joint = pz * components.derived();
  const RowVector px = joint.colwise().sum();
  double mi = 0.0;
  for (Index z = 0; z < k; ++z)
    for (Index x = 0; x < joint.cols(); ++x) mi += relative_entropy_term(joint(z, x), pz * px(x));
  return std::max(mi, 0.0);
}

/// Value of (1/2) E_p log D + (1/2) E_q log(1 - D) at the maximizer
/// D*(a) = p(a) / (p(a) + q(a)).
template <typename A, typename B>
double optimal_discriminator_loss(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  check_same_support(p, q);
  check_categorical(p, "discriminator: p");
  check_categorical(q, "discriminator: q");
  double loss = 0.0;
  for (Index a = 0; a < p.size(); ++a) {
    const double pa = p.derived()(a), qa = q.derived()(a);
    if (pa + qa == 0.0) continue;
    const double d = pa / (pa + qa);
    if (pa > 0.0) loss += 0.5 * pa * std::log(d);
    if (qa > 0.0) loss += 0.5 * qa * std::log(qa / (pa + qa));
  }
  return loss;
}

/// Generic discriminator objective (1/2) E_p log D + (1/2) E_q log(1 - D) for
/// a given table of discriminator outputs in (0, 1).
template <typename A, typename B, typename C>
double discriminator_objective(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q,
                               const Eigen::MatrixBase<C>& d) {
  check_same_support(p, q);
  check_same_support(p, d);
  double loss = 0.0;
  for (Index a = 0; a < p.size(); ++a) {
    if (p.derived()(a) > 0.0) loss += 0.5 * p.derived()(a) * std::log(d.derived()(a));
    if (q.derived()(a) > 0.0) loss += 0.5 * q.derived()(a) * std::log(1.0 - d.derived()(a));
  }
  return loss;
}

/// max_D E_p log D + E_q log(1 - D) + log 2 = 2 JSD(p, q) - log 2, in
/// [-log 2, log 2].
template <typename A, typename B>
double pair_discriminator_distance(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
  return 2.0 * optimal_discriminator_loss(p, q) + std::numbers::ln2;
}

}  // namespace patchlab::divergences
