#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

/// Raised for malformed or missing dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One or two class labels per item (two for overlapped-digit data).
struct LabelSet {
  int first = -1;
  int second = -1;

  bool single() const { return second < 0; }
  std::vector<int> to_vector() const {
    return single() ? std::vector<int>{first} : std::vector<int>{first, second};
  }
  bool contains(int c) const { return first == c || second == c; }
};

/// In-memory image classification dataset. Pixels are stored flat in
/// [N x C x H x W] order with values in [0, 1].
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  std::vector<LabelSet> labels;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  /// Copy of image i as a [C x H x W] tensor.
  Tensor image(std::size_t i) const;

  void append(const Tensor& image, LabelSet label);

  /// Throws unless every pixel lies in [0, 1].
  void check_pixel_range() const;
};

struct SplitPair {
  Dataset train;
  Dataset test;
};

// --- MNIST (IDX format) ---

/// Loads the four canonical IDX files (train-images-idx3-ubyte, ...) from a
/// directory. Pixel bytes are scaled by 1/255.
SplitPair load_mnist(const std::filesystem::path& dir);

/// Reads one images file (magic 2051) plus one labels file (magic 2049).
Dataset load_idx_pair(const std::filesystem::path& images_file,
                      const std::filesystem::path& labels_file,
                      const std::string& split);

void write_idx_images(const Dataset& ds, const std::filesystem::path& file);
/// Single-label data writes a 1-D label file (magic 2049); two-label data
/// writes an [N x 2] ubyte file.
void write_idx_labels(const Dataset& ds, const std::filesystem::path& file);

/// Loads an images file plus the [N x 2] two-label file written by
/// write_idx_labels for overlapped-digit datasets.
Dataset load_idx_two_label_pair(const std::filesystem::path& images_file,
                                const std::filesystem::path& labels_file,
                                const std::string& split);

// --- CIFAR-10 (binary batches, 1 label byte + 3072 pixel bytes) ---

/// Loads data_batch_1..5.bin as the train split and test_batch.bin as the
/// test split from a directory.
SplitPair load_cifar10(const std::filesystem::path& dir);

Dataset load_cifar_batches(const std::vector<std::filesystem::path>& files,
                           const std::string& split);
void write_cifar_batch(const Dataset& ds, const std::filesystem::path& file);

// --- MultiMNIST synthesis ---

/// Overlays pairs of digits of distinct classes on a 36x36 canvas, each
/// shifted independently by up to 4 px per axis, merged by pixelwise max.
/// Produces per_image items per base image. Deterministic per seed.
Dataset synthesize_multimnist(const Dataset& base, int per_image,
                              std::uint64_t seed);

// --- Helpers ---

/// First-n-per-class subset, preserving original order.
Dataset stratified_subset(const Dataset& ds, std::size_t per_class);

/// Copy shifted by (dx, dy) pixels with zero fill.
Tensor shifted_image(const Tensor& image, int dx, int dy);

// --- Synthetic fixtures ---
// Procedurally generated 10-class datasets in the same shapes as MNIST
// (1x28x28) and CIFAR-10 (3x32x32). Pixels are quantized to k/255 so a trip
// through the byte-level file formats is lossless. Intended for smoke runs
// and tests when the real datasets are not on disk.

Dataset synthetic_digits(std::size_t count, std::uint64_t seed,
                         const std::string& split = "train");
Dataset synthetic_color_shapes(std::size_t count, std::uint64_t seed,
                               const std::string& split = "train");

}  // namespace capsroute
