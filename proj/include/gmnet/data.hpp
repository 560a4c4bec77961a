// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion (MNIST IDX, CIFAR-10/100 binary), channel normalization,
// pad-crop-flip augmentation and seeded batch iteration.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmnet/tensor.hpp"

namespace gmnet {

/// Malformed or missing dataset files; the message names the file and offset.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSplit {
  Tensor<float> images;  // (N,C,H,W); [0,1] until normalized
  std::vector<std::int32_t> labels;
  std::string dataset;  // "mnist", "cifar10", "cifar100"
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
};

struct DatasetPair {
  DatasetSplit train;
  DatasetSplit test;
};

/// Reads one IDX image file and its label file.
DatasetSplit load_mnist_files(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Expects train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte
/// and t10k-labels-idx1-ubyte under `dir`.
DatasetPair load_mnist(const std::filesystem::path& dir);

/// Concatenates CIFAR binary batch files. variant 10: 1 label byte per record;
/// variant 100: coarse then fine label byte, the fine label is kept.
DatasetSplit load_cifar_files(const std::vector<std::filesystem::path>& files, int variant);

/// CIFAR-10: data_batch_{1..5}.bin + test_batch.bin. CIFAR-100: train.bin + test.bin.
/// Both layouts are also accepted inside the archive's usual subdirectory.
DatasetPair load_cifar(const std::filesystem::path& dir, int variant);

/// Loads "mnist", "cifar10" or "cifar100" from `dir`.
DatasetPair load_dataset(const std::string& dataset, const std::filesystem::path& dir);

struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;  // all ones when std division is off
};

/// Per-channel mean (and std when `divide_std`) of a split. A std below 1e-6 is
/// clamped to 1 so constant channels map to zero.
NormStats fit_normalization(const DatasetSplit& split, bool divide_std);

/// x <- (x - mean[c]) / std[c]
void apply_normalization(DatasetSplit& split, const NormStats& stats);

/// Fits on the training split and applies the result to both splits.
NormStats preprocess(DatasetPair& data, bool divide_std = true);

/// Zero-pads by `pad`, takes the H x W window at (oy, ox) of the padded image,
/// then mirrors horizontally when `flip`.
void crop_flip(const float* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t oy,
               std::size_t ox, bool flip, float* dst);

/// Random pad-4 crop and a horizontal flip with probability 0.5.
Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng);

/// In-place augmentation of every image in an (N,C,H,W) batch.
void augment_batch(Tensor<float>& images, std::mt19937_64& rng);

/// Datasets that get pad-crop-flip augmentation during training.
bool uses_augmentation(const std::string& dataset);

/// First `count` examples (all of them when count >= size).
DatasetSplit take(const DatasetSplit& split, std::size_t count);

struct Batch {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
};

/// One pass over a split in fixed-size batches; the final batch may be short.
class BatchIterator {
 public:
  BatchIterator(const DatasetSplit& split, std::size_t batch_size, bool shuffle, std::uint64_t seed);

  std::size_t num_batches() const;
  /// Fills `out` with the next batch; false once the pass is exhausted.
  bool next(Batch& out);
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const DatasetSplit* split_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace gmnet
