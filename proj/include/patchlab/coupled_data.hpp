#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchlab/random.hpp"
#include "patchlab/tensor.hpp"

namespace patchlab::data {

struct LabeledExample {
  RowVector x;
  int y = 0;
  int z = 0;
  std::optional<std::int64_t> coupled_id;
};

/// Column-oriented collection of labeled examples. Subgroup ids are local to
/// the class (0..subgroups_per_class-1); the flat group id is y * k + z.
struct Dataset {
  Matrix x;
  std::vector<int> y;
  std::vector<int> z;
  std::vector<std::int64_t> coupled_id;  // -1 when unknown
  int num_classes = 0;
  int subgroups_per_class = 0;

  Index size() const { return x.rows(); }
  Index input_dim() const { return x.cols(); }
  int num_groups() const { return num_classes * subgroups_per_class; }
  int group(Index i) const { return y[static_cast<std::size_t>(i)] * subgroups_per_class + z[static_cast<std::size_t>(i)]; }
  LabeledExample example(Index i) const;
  /// counts[y][z]
  std::vector<std::vector<Index>> cell_counts() const;
  std::vector<Index> group_counts() const;
  Dataset subset(std::span<const Index> rows) const;
  void check() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset validation;
  Dataset test;
  std::string manifest_json() const;
  /// Free-form provenance recorded into the manifest.
  std::vector<std::pair<std::string, std::string>> metadata;
};

/// Signed-permutation-plus-offset rendering x = u P^T + b of latent class
/// features u. Entries are dyadic rationals so translations are exact.
struct Renderer {
  Matrix linear;  // d x d signed permutation
  RowVector offset;
};

struct WorldOptions {
  int num_classes = 2;
  int subgroups_per_class = 2;
  int latents_per_class = 4;
  Index input_dim = 4;
  std::uint64_t seed = 0;
  /// Leading coordinates whose latent mean differs by class.
  Index class_dims = -1;  // -1: all coordinates
  double class_separation = 1.0;
  double latent_noise = 1.0;
  /// Trailing coordinates shifted per subgroup; magnitude `subgroup_shift`.
  Index style_dims = -1;  // -1: all coordinates
  double subgroup_shift = 1.0;
  /// Random signed permutations per subgroup (subgroup 0 stays identity).
  bool permute = true;
};

/// Finite generative model of (X, Y, Z, [X]): a class y, an independent
/// subgroup z in Z_y and coupled-set latent l in class y are drawn with
/// probability p(y) p(z|y) p(l|y) and rendered as g_z(u_{y,l}).
class CoupledWorld {
 public:
  CoupledWorld() = default;
  explicit CoupledWorld(const WorldOptions& options);

  int num_classes() const { return num_classes_; }
  int subgroups_per_class() const { return k_; }
  int latents_per_class() const { return latents_; }
  Index input_dim() const { return dim_; }
  std::int64_t num_coupled_sets() const { return static_cast<std::int64_t>(num_classes_) * latents_; }
  std::int64_t coupled_id(int y, int latent) const { return static_cast<std::int64_t>(y) * latents_ + latent; }

  RowVector latent(int y, int l) const { return latents_by_class_[static_cast<std::size_t>(y)].row(l); }
  const Renderer& renderer(int z) const { return renderers_[static_cast<std::size_t>(z)]; }
  RowVector render(int y, int z, int l) const;
  /// x P_z P_{z'}^T + (b_{z'} - b_z P_z P_{z'}^T): maps g_z(u) to g_{z'}(u).
  std::pair<Matrix, RowVector> translation(int from_z, int to_z) const;

  double class_weight(int y) const { return class_weights_(y); }
  double subgroup_weight(int y, int z) const { return subgroup_weights_(y, z); }
  double latent_weight(int y, int l) const { return latent_weights_(y, l); }
  double weight(int y, int z, int l) const;
  void set_weights(Vector classes, Matrix subgroups, Matrix latents);
  bool uniform_subgroups() const;

  /// All num_classes * k * latents examples with coupled ids, in (y, l, z)
  /// order so consecutive blocks of k rows form one coupled set.
  Dataset enumerate() const;
  /// Probability of each row of enumerate().
  Vector enumerate_weights() const;

 private:
  int num_classes_ = 0;
  int k_ = 0;
  int latents_ = 0;
  Index dim_ = 0;
  std::vector<Matrix> latents_by_class_;
  std::vector<Renderer> renderers_;
  Vector class_weights_;
  Matrix subgroup_weights_;
  Matrix latent_weights_;
};

CoupledWorld generate_coupled_world(int num_classes, int subgroups_per_class, int latents_per_class,
                                    Index input_dim, std::uint64_t seed);

/// Cell counts of the correlated two-class, two-subgroup construction:
/// majority = floor((rho + 1) N / 4) for (0,0) and (1,1), minority = N/2 - majority.
struct CorrelationCounts {
  Index majority = 0;
  Index minority = 0;
};
CorrelationCounts correlation_counts(Index n, double rho);

/// Splits a cell of `total` examples: validation gets floor(total/2).
inline Index validation_share(Index total) { return total / 2; }

/// Draws N train+validation examples with the correlated cell counts (then
/// halves each cell into train/validation) and a subgroup-balanced test split
/// of N/8 per cell. Latents are partitioned per class so the splits share no
/// coupled set.
DatasetSplit sample_dataset(const CoupledWorld& world, Index n, double rho, std::uint64_t seed);

/// One epoch of batches, each containing at least one example of every
/// nonempty (y, z) cell. Cells smaller than the batch count are cycled.
std::vector<std::vector<Index>> subgroup_batches(const Dataset& data, Index batch_size, Rng& rng);
std::vector<std::vector<Index>> subgroup_batches(const Dataset& data, Index batch_size, std::uint64_t seed);
/// Plain shuffled batches, ignoring groups.
std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, Rng& rng);

}  // namespace patchlab::data
