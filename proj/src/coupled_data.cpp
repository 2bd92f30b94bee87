#include "patchlab/coupled_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "json.hpp"
#include "patchlab/error.hpp"

namespace patchlab::data {

namespace {

constexpr double kLatentQuantum = 0x1.0p-10;
constexpr double kOffsetQuantum = 0x1.0p-4;

double quantize(double v, double quantum) { return std::round(v / quantum) * quantum; }

Matrix signed_permutation(Index d, Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  Matrix p = Matrix::Zero(d, d);
  for (Index i = 0; i < d; ++i) p(i, order[static_cast<std::size_t>(i)]) = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return p;
}

}  // namespace

LabeledExample Dataset::example(Index i) const {
  LabeledExample e;
  e.x = x.row(i);
  e.y = y[static_cast<std::size_t>(i)];
  e.z = z[static_cast<std::size_t>(i)];
  if (!coupled_id.empty() && coupled_id[static_cast<std::size_t>(i)] >= 0) e.coupled_id = coupled_id[static_cast<std::size_t>(i)];
  return e;
}

std::vector<std::vector<Index>> Dataset::cell_counts() const {
  std::vector<std::vector<Index>> counts(static_cast<std::size_t>(num_classes),
                                         std::vector<Index>(static_cast<std::size_t>(subgroups_per_class), 0));
  for (std::size_t i = 0; i < y.size(); ++i) ++counts[static_cast<std::size_t>(y[i])][static_cast<std::size_t>(z[i])];
  return counts;
}

std::vector<Index> Dataset::group_counts() const {
  std::vector<Index> counts(static_cast<std::size_t>(num_groups()), 0);
  for (Index i = 0; i < size(); ++i) ++counts[static_cast<std::size_t>(group(i))];
  return counts;
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  out.num_classes = num_classes;
  out.subgroups_per_class = subgroups_per_class;
  out.x.resize(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Index>(i)) = x.row(rows[i]);
    out.y.push_back(y[static_cast<std::size_t>(rows[i])]);
    out.z.push_back(z[static_cast<std::size_t>(rows[i])]);
    out.coupled_id.push_back(coupled_id.empty() ? -1 : coupled_id[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

void Dataset::check() const {
  const auto n = static_cast<std::size_t>(x.rows());
  if (y.size() != n || z.size() != n || (!coupled_id.empty() && coupled_id.size() != n))
    throw ShapeError("dataset columns have inconsistent lengths");
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] < 0 || y[i] >= num_classes) throw ContractError("class label out of range at row " + std::to_string(i));
    if (z[i] < 0 || z[i] >= subgroups_per_class)
      throw ContractError("subgroup label out of range at row " + std::to_string(i));
  }
}

std::string DatasetSplit::manifest_json() const {
  nlohmann::json j;
  auto cells = [](const Dataset& d) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : d.cell_counts()) rows.push_back(row);
    return rows;
  };
  j["train"] = cells(train);
  j["validation"] = cells(validation);
  j["test"] = cells(test);
  j["input_dim"] = train.input_dim();
  for (const auto& [key, value] : metadata) j["metadata"][key] = value;
  return j.dump(2);
}

CoupledWorld::CoupledWorld(const WorldOptions& o) {
  if (o.num_classes < 1) throw ParameterError("world needs at least one class");
  if (o.subgroups_per_class < 2) throw ParameterError("world needs k >= 2 subgroups per class");
  if (o.latents_per_class < 2) throw ParameterError("world needs at least two latents per class");
  if (o.input_dim < 1) throw ParameterError("world needs input_dim >= 1");
  num_classes_ = o.num_classes;
  k_ = o.subgroups_per_class;
  latents_ = o.latents_per_class;
  dim_ = o.input_dim;
  const Index class_dims = o.class_dims < 0 ? dim_ : std::min(o.class_dims, dim_);
  const Index style_dims = o.style_dims < 0 ? dim_ : std::min(o.style_dims, dim_);

  Rng rng(o.seed, 1);
  std::vector<RowVector> means;
  for (int y = 0; y < num_classes_; ++y) {
    RowVector mean = RowVector::Zero(dim_);
    for (Index j = 0; j < class_dims; ++j) {
      const double sign = (num_classes_ == 2 && y == 1) ? -means[0](j) / o.class_separation
                                                         : (rng.uniform() < 0.5 ? -1.0 : 1.0);
      mean(j) = o.class_separation * sign;
    }
    means.push_back(mean);
  }
  for (int y = 0; y < num_classes_; ++y) {
    Matrix latents(latents_, dim_);
    std::set<std::vector<double>> seen;
    for (int l = 0; l < latents_; ++l) {
      for (int attempt = 0;; ++attempt) {
        std::vector<double> key(static_cast<std::size_t>(dim_));
        for (Index j = 0; j < dim_; ++j)
          key[static_cast<std::size_t>(j)] = quantize(means[static_cast<std::size_t>(y)](j) + o.latent_noise * rng.normal(), kLatentQuantum);
        if (seen.insert(key).second) {
          for (Index j = 0; j < dim_; ++j) latents(l, j) = key[static_cast<std::size_t>(j)];
          break;
        }
        if (attempt > 1000) throw ParameterError("cannot draw distinct latents; increase latent_noise or input_dim");
      }
    }
    latents_by_class_.push_back(std::move(latents));
  }

  Rng render_rng(o.seed, 2);
  std::vector<RowVector> signs;
  for (int z = 0; z < k_; ++z) {
    Renderer r;
    r.linear = (z == 0 || !o.permute) ? Matrix(Matrix::Identity(dim_, dim_)) : signed_permutation(dim_, render_rng);
    r.offset = RowVector::Zero(dim_);
    for (Index j = dim_ - style_dims; j < dim_; ++j) {
      double s = render_rng.uniform() < 0.5 ? -1.0 : 1.0;
      if (k_ == 2 && z == 1) s = -renderers_[0].offset(j) / std::max(std::abs(renderers_[0].offset(j)), 1e-300);
      r.offset(j) = quantize(o.subgroup_shift * s, kOffsetQuantum);
    }
    renderers_.push_back(std::move(r));
  }

  class_weights_ = Vector::Constant(num_classes_, 1.0 / num_classes_);
  subgroup_weights_ = Matrix::Constant(num_classes_, k_, 1.0 / k_);
  latent_weights_ = Matrix::Constant(num_classes_, latents_, 1.0 / latents_);
}

RowVector CoupledWorld::render(int y, int z, int l) const {
  const auto& r = renderers_[static_cast<std::size_t>(z)];
  return latent(y, l) * r.linear.transpose() + r.offset;
}

std::pair<Matrix, RowVector> CoupledWorld::translation(int from_z, int to_z) const {
  const auto& src = renderers_[static_cast<std::size_t>(from_z)];
  const auto& dst = renderers_[static_cast<std::size_t>(to_z)];
  Matrix a = src.linear * dst.linear.transpose();
  RowVector c = dst.offset - src.offset * a;
  return {std::move(a), std::move(c)};
}

double CoupledWorld::weight(int y, int z, int l) const {
  return class_weights_(y) * subgroup_weights_(y, z) * latent_weights_(y, l);
}

void CoupledWorld::set_weights(Vector classes, Matrix subgroups, Matrix latents) {
  if (classes.size() != num_classes_ || subgroups.rows() != num_classes_ || subgroups.cols() != k_ ||
      latents.rows() != num_classes_ || latents.cols() != latents_)
    throw ShapeError("set_weights: shapes do not match the world");
  auto normalized = [](double total) { return std::abs(total - 1.0) <= 1e-12; };
  if (!normalized(classes.sum()) || (classes.array() < 0).any()) throw ContractError("class weights must be a distribution");
  for (int y = 0; y < num_classes_; ++y) {
    if (!normalized(subgroups.row(y).sum()) || (subgroups.row(y).array() < 0).any())
      throw ContractError("subgroup weights of each class must be a distribution");
    if (!normalized(latents.row(y).sum()) || (latents.row(y).array() < 0).any())
      throw ContractError("latent weights of each class must be a distribution");
  }
  class_weights_ = std::move(classes);
  subgroup_weights_ = std::move(subgroups);
  latent_weights_ = std::move(latents);
}

bool CoupledWorld::uniform_subgroups() const {
  return ((subgroup_weights_.array() - 1.0 / k_).abs() < 1e-15).all();
}

Dataset CoupledWorld::enumerate() const {
  Dataset d;
  d.num_classes = num_classes_;
  d.subgroups_per_class = k_;
  const Index n = static_cast<Index>(num_classes_) * latents_ * k_;
  d.x.resize(n, dim_);
  Index row = 0;
  for (int y = 0; y < num_classes_; ++y)
    for (int l = 0; l < latents_; ++l)
      for (int z = 0; z < k_; ++z) {
        d.x.row(row++) = render(y, z, l);
        d.y.push_back(y);
        d.z.push_back(z);
        d.coupled_id.push_back(coupled_id(y, l));
      }
  return d;
}

Vector CoupledWorld::enumerate_weights() const {
  Vector w(static_cast<Index>(num_classes_) * latents_ * k_);
  Index row = 0;
  for (int y = 0; y < num_classes_; ++y)
    for (int l = 0; l < latents_; ++l)
      for (int z = 0; z < k_; ++z) w(row++) = weight(y, z, l);
  return w;
}

CoupledWorld generate_coupled_world(int num_classes, int subgroups_per_class, int latents_per_class,
                                    Index input_dim, std::uint64_t seed) {
  WorldOptions o;
  o.num_classes = num_classes;
  o.subgroups_per_class = subgroups_per_class;
  o.latents_per_class = latents_per_class;
  o.input_dim = input_dim;
  o.seed = seed;
  return CoupledWorld(o);
}

CorrelationCounts correlation_counts(Index n, double rho) {
  if (n < 0) throw ParameterError("dataset size must be non-negative");
  if (!(rho >= -1.0 && rho <= 1.0)) throw ParameterError("correlation must lie in [-1, 1]");
  CorrelationCounts c;
  // (rho + 1) N / 4 evaluated so that exact products are not pushed below an
  // integer by rounding (e.g. 1.98 * 40000 / 4).
  const double raw = (rho + 1.0) * static_cast<double>(n) / 4.0;
  double floored = std::floor(raw);
  if (raw - floored > 1.0 - 1e-9) floored += 1.0;
  c.majority = static_cast<Index>(floored);
  c.minority = n / 2 - c.majority;
  if (c.minority < 0) throw ParameterError("correlation leaves a negative minority count");
  return c;
}

DatasetSplit sample_dataset(const CoupledWorld& world, Index n, double rho, std::uint64_t seed) {
  if (world.num_classes() != 2 || world.subgroups_per_class() != 2)
    throw ParameterError("correlated sampling is defined for two classes with two subgroups each");
  const auto counts = correlation_counts(n, rho);
  const int latents = world.latents_per_class();
  if (latents < 3) throw ParameterError("need at least three latents per class to separate splits");
  const int n_test = std::max(1, latents / 5);
  const int n_val = std::max(1, (latents - n_test) / 2);

  Rng rng(seed, 11);
  // pools[y][split]: 0 train, 1 validation, 2 test
  std::vector<std::array<std::vector<int>, 3>> pools(2);
  for (int y = 0; y < 2; ++y) {
    std::vector<int> order(static_cast<std::size_t>(latents));
    for (int l = 0; l < latents; ++l) order[static_cast<std::size_t>(l)] = l;
    rng.shuffle(order);
    auto& p = pools[static_cast<std::size_t>(y)];
    p[2].assign(order.begin(), order.begin() + n_test);
    p[1].assign(order.begin() + n_test, order.begin() + n_test + n_val);
    p[0].assign(order.begin() + n_test + n_val, order.end());
  }

  struct Draw {
    int y, z, latent;
  };
  std::array<std::vector<Draw>, 3> draws;
  auto draw = [&](std::vector<Draw>& out, int y, int z, Index count, const std::vector<int>& pool) {
    std::vector<int> cycle = pool;
    std::size_t next = cycle.size();
    for (Index i = 0; i < count; ++i) {
      if (next == cycle.size()) {
        rng.shuffle(cycle);
        next = 0;
      }
      out.push_back({y, z, cycle[next++]});
    }
  };
  for (int y = 0; y < 2; ++y) {
    for (int z = 0; z < 2; ++z) {
      const Index total = (y == z) ? counts.majority : counts.minority;
      const Index val = validation_share(total);
      const auto& p = pools[static_cast<std::size_t>(y)];
      draw(draws[0], y, z, total - val, p[0]);
      draw(draws[1], y, z, val, p[1]);
      draw(draws[2], y, z, std::max<Index>(1, n / 8), p[2]);
    }
  }

  DatasetSplit split;
  Dataset* targets[3] = {&split.train, &split.validation, &split.test};
  for (std::size_t s = 0; s < 3; ++s) {
    Dataset& d = *targets[s];
    d.num_classes = 2;
    d.subgroups_per_class = 2;
    d.x.resize(static_cast<Index>(draws[s].size()), world.input_dim());
    for (std::size_t i = 0; i < draws[s].size(); ++i) {
      const auto& [y, z, l] = draws[s][i];
      d.x.row(static_cast<Index>(i)) = world.render(y, z, l);
      d.y.push_back(y);
      d.z.push_back(z);
      d.coupled_id.push_back(world.coupled_id(y, l));
    }
  }
  split.metadata = {{"source", "coupled_world"},
                    {"N", std::to_string(n)},
                    {"rho", std::to_string(rho)},
                    {"seed", std::to_string(seed)}};
  return split;
}

std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, Rng& rng) {
  if (batch_size <= 0) throw ParameterError("batch size must be positive");
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n; start += batch_size)
    batches.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch_size));
  return batches;
}

std::vector<std::vector<Index>> subgroup_batches(const Dataset& data, Index batch_size, Rng& rng) {
  if (batch_size <= 0) throw ParameterError("batch size must be positive");
  std::vector<std::vector<Index>> cells(static_cast<std::size_t>(data.num_groups()));
  for (Index i = 0; i < data.size(); ++i) cells[static_cast<std::size_t>(data.group(i))].push_back(i);
  std::erase_if(cells, [](const auto& c) { return c.empty(); });
  if (cells.empty()) return {};
  if (static_cast<Index>(cells.size()) > batch_size)
    throw ParameterError("batch size " + std::to_string(batch_size) + " cannot hold all " +
                         std::to_string(cells.size()) + " nonempty subgroups");
  if (cells.size() == 1) return shuffled_batches(data.size(), batch_size, rng);

  const Index num_batches = (data.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<Index>> batches(static_cast<std::size_t>(num_batches));
  for (auto& cell : cells) {
    rng.shuffle(cell);
    const auto n_c = static_cast<Index>(cell.size());
    if (n_c >= num_batches) {
      for (Index j = 0; j < n_c; ++j) batches[static_cast<std::size_t>(j * num_batches / n_c)].push_back(cell[static_cast<std::size_t>(j)]);
    } else {
      for (Index b = 0; b < num_batches; ++b) batches[static_cast<std::size_t>(b)].push_back(cell[static_cast<std::size_t>(b % n_c)]);
    }
  }
  for (auto& batch : batches) rng.shuffle(batch);
  return batches;
}

std::vector<std::vector<Index>> subgroup_batches(const Dataset& data, Index batch_size, std::uint64_t seed) {
  Rng rng(seed, 21);
  return subgroup_batches(data, batch_size, rng);
}

}  // namespace patchlab::data
