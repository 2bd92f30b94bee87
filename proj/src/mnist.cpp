#include "patchlab/mnist.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "patchlab/error.hpp"

namespace patchlab::data {

namespace {

struct Point {
  double x, y;
};

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

void draw_segments(std::span<std::uint8_t> image, Index width, std::span<const std::pair<Point, Point>> segments,
                   double thickness, double intensity) {
  const Index height = static_cast<Index>(image.size()) / width;
  for (Index r = 0; r < height; ++r)
    for (Index c = 0; c < width; ++c) {
      const Point p{static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5};
      double best = 1e9;
      for (const auto& [a, b] : segments) best = std::min(best, segment_distance(p, a, b));
      const double coverage = std::clamp(thickness / 2.0 + 0.5 - best, 0.0, 1.0);
      auto& px = image[static_cast<std::size_t>(r * width + c)];
      px = static_cast<std::uint8_t>(std::max<double>(px, std::round(coverage * intensity)));
    }
}

// Segments a..g of a seven-segment glyph in unit coordinates (u in [0,1],
// v in [0,2], v pointing down).
constexpr std::array<std::array<double, 4>, 7> kSegments{{
    {0, 0, 1, 0},  // a
    {1, 0, 1, 1},  // b
    {1, 1, 1, 2},  // c
    {0, 2, 1, 2},  // d
    {0, 1, 0, 2},  // e
    {0, 0, 0, 1},  // f
    {0, 1, 1, 1},  // g
}};
constexpr std::array<const char*, 10> kDigitSegments{"abcdef", "bc", "abged", "abgcd", "fgbc",
                                                     "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"};

}  // namespace

ImageSet images_from_idx(const IdxArray& images, const IdxArray& labels) {
  if (images.dims.size() != 3) throw DataError("image IDX must have rank 3");
  if (labels.dims.size() != 1) throw DataError("label IDX must have rank 1");
  if (images.items() != labels.items()) throw DataError("image and label counts differ");
  ImageSet out;
  out.height = images.dims[1];
  out.width = images.dims[2];
  out.pixels = images.data;
  out.labels.assign(labels.data.begin(), labels.data.end());
  for (int l : out.labels)
    if (l > 9) throw DataError("digit label out of range: " + std::to_string(l));
  return out;
}

ImageSet synthetic_digits(Index count, std::uint64_t seed) {
  ImageSet out;
  out.pixels.assign(static_cast<std::size_t>(count * out.pixel_count()), 0);
  out.labels.resize(static_cast<std::size_t>(count));
  Rng rng(seed, 31);
  for (Index i = 0; i < count; ++i) {
    const int digit = static_cast<int>(rng.below(10));
    out.labels[static_cast<std::size_t>(i)] = digit;
    const double cx = 14.0 + rng.uniform(-2.0, 2.0), cy = 14.0 + rng.uniform(-2.0, 2.0);
    const double scale = rng.uniform(0.85, 1.15);
    const double half_w = 5.0 * scale, half_h = 9.0 * scale;
    const double slant = rng.uniform(-0.25, 0.25);
    const double thickness = rng.uniform(1.6, 2.8);
    const double intensity = rng.uniform(190.0, 255.0);
    auto to_pixel = [&](double u, double v) {
      const double y = cy + (v - 1.0) * half_h;
      const double x = cx + (u - 0.5) * 2.0 * half_w - slant * (v - 1.0) * half_h;
      return Point{x + rng.uniform(-0.4, 0.4), y + rng.uniform(-0.4, 0.4)};
    };
    std::vector<std::pair<Point, Point>> segments;
    for (const char* s = kDigitSegments[static_cast<std::size_t>(digit)]; *s != '\0'; ++s) {
      const auto& seg = kSegments[static_cast<std::size_t>(*s - 'a')];
      segments.emplace_back(to_pixel(seg[0], seg[1]), to_pixel(seg[2], seg[3]));
    }
    draw_segments({out.pixels.data() + i * out.pixel_count(), static_cast<std::size_t>(out.pixel_count())},
                  out.width, segments, thickness, intensity);
  }
  return out;
}

ImageSet zigzag_overlay(const ImageSet& clean) {
  ImageSet out = clean;
  const double w = static_cast<double>(clean.width), h = static_cast<double>(clean.height);
  std::vector<std::pair<Point, Point>> segments;
  constexpr int kTurns = 6;
  Point prev{0, 0};
  for (int i = 0; i <= kTurns; ++i) {
    const double t = static_cast<double>(i) / kTurns;
    const double side = (i % 2 == 0 ? 1.0 : -1.0) * 0.11;
    const Point p{(0.08 + 0.84 * t + side) * w, (0.08 + 0.84 * t - side) * h};
    if (i > 0) segments.emplace_back(prev, p);
    prev = p;
  }
  for (Index i = 0; i < out.size(); ++i)
    draw_segments({out.pixels.data() + i * out.pixel_count(), static_cast<std::size_t>(out.pixel_count())},
                  out.width, segments, 1.2, 255.0);
  return out;
}

MnistSources load_mnist_sources(const std::optional<std::filesystem::path>& dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  MnistSources s;
  auto have = [&](const std::string& prefix) {
    return dir && fs::exists(*dir / (prefix + "train-images-idx3-ubyte")) &&
           fs::exists(*dir / (prefix + "train-labels-idx1-ubyte")) &&
           fs::exists(*dir / (prefix + "t10k-images-idx3-ubyte")) &&
           fs::exists(*dir / (prefix + "t10k-labels-idx1-ubyte"));
  };
  auto load = [&](const std::string& prefix, const std::string& split) {
    return images_from_idx(read_idx(*dir / (prefix + split + "-images-idx3-ubyte")),
                           read_idx(*dir / (prefix + split + "-labels-idx1-ubyte")));
  };
  if (have("")) {
    s.clean_train = load("", "train");
    s.clean_test = load("", "t10k");
    if (have("zigzag-")) {
      s.zigzag_train = load("zigzag-", "train");
      s.zigzag_test = load("zigzag-", "t10k");
    }
  } else {
    s.clean_train = synthetic_digits(60000, seed);
    s.clean_test = synthetic_digits(10000, seed + 1);
    s.synthetic_digits = true;
  }
  return s;
}

DatasetSplit mnist_correlation(const MnistSources& sources, Index n, double rho, std::uint64_t seed) {
  const auto counts = correlation_counts(n, rho);
  const ImageSet zig_train = sources.zigzag_train ? *sources.zigzag_train : zigzag_overlay(sources.clean_train);
  const ImageSet zig_test = sources.zigzag_test ? *sources.zigzag_test : zigzag_overlay(sources.clean_test);
  const Index pixels = sources.clean_train.pixel_count();
  if (zig_train.pixel_count() != pixels || sources.clean_test.pixel_count() != pixels)
    throw DataError("MNIST sources disagree on image size");

  static constexpr const char* kClass[] = {"even", "odd"};
  static constexpr const char* kSubgroup[] = {"clean", "zigzag"};
  Rng rng(seed, 41);

  struct Pick {
    const ImageSet* source;
    Index index;
    int y, z;
    std::int64_t coupled;
  };
  std::vector<Pick> train, validation, test;
  for (int y = 0; y < 2; ++y) {
    for (int z = 0; z < 2; ++z) {
      const ImageSet& src = z == 0 ? sources.clean_train : zig_train;
      std::vector<Index> pool;
      for (Index i = 0; i < src.size(); ++i)
        if (src.labels[static_cast<std::size_t>(i)] % 2 == y) pool.push_back(i);
      const Index total = (y == z) ? counts.majority : counts.minority;
      if (static_cast<Index>(pool.size()) < total)
        throw DataError(std::string("cell (") + kClass[y] + ", " + kSubgroup[z] + ") needs " + std::to_string(total) +
                        " images but the source has " + std::to_string(pool.size()));
      rng.shuffle(pool);
      const Index val = validation_share(total);
      for (Index i = 0; i < total; ++i) {
        const Index idx = pool[static_cast<std::size_t>(i)];
        (i < val ? validation : train).push_back({&src, idx, y, z, idx});
      }
    }
  }
  const Index offset = sources.clean_train.size();
  for (int z = 0; z < 2; ++z) {
    const ImageSet& src = z == 0 ? sources.clean_test : zig_test;
    for (Index i = 0; i < src.size(); ++i) test.push_back({&src, i, src.labels[static_cast<std::size_t>(i)] % 2, z, offset + i});
  }

  auto materialize = [&](const std::vector<Pick>& picks) {
    Dataset d;
    d.num_classes = 2;
    d.subgroups_per_class = 2;
    d.x.resize(static_cast<Index>(picks.size()), pixels);
    for (std::size_t r = 0; r < picks.size(); ++r) {
      const auto img = picks[r].source->image(picks[r].index);
      for (Index c = 0; c < pixels; ++c) d.x(static_cast<Index>(r), c) = img[static_cast<std::size_t>(c)] / 255.0;
      d.y.push_back(picks[r].y);
      d.z.push_back(picks[r].z);
      d.coupled_id.push_back(picks[r].coupled);
    }
    return d;
  };
  DatasetSplit split;
  split.train = materialize(train);
  split.validation = materialize(validation);
  split.test = materialize(test);
  split.metadata = {{"source", "mnist_correlation"},
                    {"N", std::to_string(n)},
                    {"rho", std::to_string(rho)},
                    {"seed", std::to_string(seed)},
                    {"synthetic_digits", sources.synthetic_digits ? "true" : "false"},
                    {"synthetic_corruption", (sources.zigzag_train && sources.zigzag_test) ? "false" : "true"}};
  return split;
}

}  // namespace patchlab::data
