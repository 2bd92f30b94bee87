#pragma once

#include <filesystem>
#include <optional>

#include "patchlab/coupled_data.hpp"
#include "patchlab/idx.hpp"

namespace patchlab::data {

/// Grayscale digit images (row-major u8 pixels) with digit labels.
struct ImageSet {
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  Index height = 28;
  Index width = 28;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index pixel_count() const { return height * width; }
  std::span<const std::uint8_t> image(Index i) const {
    return {pixels.data() + i * pixel_count(), static_cast<std::size_t>(pixel_count())};
  }
};

ImageSet images_from_idx(const IdxArray& images, const IdxArray& labels);

/// Procedural stand-in for MNIST: seven-segment strokes with seeded jitter in
/// position, scale, slant, thickness and intensity.
ImageSet synthetic_digits(Index count, std::uint64_t seed);

/// Seed-free zigzag corruption: a fixed diagonal zigzag stroke drawn over the
/// image with max-blending.
ImageSet zigzag_overlay(const ImageSet& clean);

struct MnistSources {
  ImageSet clean_train;
  std::optional<ImageSet> zigzag_train;
  ImageSet clean_test;
  std::optional<ImageSet> zigzag_test;
  bool synthetic_digits = false;
};

/// Looks for train-images-idx3-ubyte / train-labels-idx1-ubyte /
/// t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte in `dir`, and the same
/// names prefixed with "zigzag-" for the corrupted copies. Without a
/// directory (or without the clean files) procedural digits are generated.
MnistSources load_mnist_sources(const std::optional<std::filesystem::path>& dir, std::uint64_t seed);

/// Parity classes (0 = even, 1 = odd) split into subgroups (0 = clean,
/// 1 = zigzag) with the correlated train/validation counts of
/// correlation_counts(); the test split holds every test image once per
/// subgroup. Missing zigzag sources fall back to zigzag_overlay(). Pixels are
/// scaled to [0, 1]; coupled ids are source image indices.
DatasetSplit mnist_correlation(const MnistSources& sources, Index n, double rho, std::uint64_t seed);

}  // namespace patchlab::data
