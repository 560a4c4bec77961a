// SPDX-License-Identifier: Apache-2.0
#include "gmnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace gmnet {
namespace {

namespace fs = std::filesystem;

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarPixels = 3 * 32 * 32;

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const fs::path& path) {
  if (offset + 4 > bytes.size()) {
    throw DataError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::string hex32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xf];
  return s;
}

void expect_magic(std::uint32_t got, std::uint32_t want, const fs::path& path) {
  if (got != want) {
    throw DataError(path.string() + ": bad magic " + hex32(got) + " at offset 0, expected " + hex32(want));
  }
}

void expect_payload(const std::vector<std::uint8_t>& bytes, std::size_t header, std::size_t payload,
                    const fs::path& path) {
  if (bytes.size() < header + payload) {
    throw DataError(path.string() + ": truncated at offset " + std::to_string(bytes.size()) + ", expected " +
                    std::to_string(header + payload) + " bytes");
  }
}

}  // namespace

DatasetSplit load_mnist_files(const fs::path& images, const fs::path& labels) {
  const std::vector<std::uint8_t> img = read_file(images);
  expect_magic(read_be32(img, 0, images), kIdxImages, images);
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  if (n == 0 || rows == 0 || cols == 0) {
    throw DataError(images.string() + ": empty dimension in header at offset 4");
  }
  expect_payload(img, 16, n * rows * cols, images);

  const std::vector<std::uint8_t> lab = read_file(labels);
  expect_magic(read_be32(lab, 0, labels), kIdxLabels, labels);
  const std::size_t nl = read_be32(lab, 4, labels);
  if (nl != n) {
    throw DataError(labels.string() + ": label count " + std::to_string(nl) + " at offset 4 does not match " +
                    std::to_string(n) + " images in " + images.string());
  }
  expect_payload(lab, 8, n, labels);

  DatasetSplit split;
  split.dataset = "mnist";
  split.num_classes = 10;
  split.images = Tensor<float>::uninitialized({n, 1, rows, cols});
  float* dst = split.images.ptr();
  for (std::size_t i = 0; i < n * rows * cols; ++i) dst[i] = static_cast<float>(img[16 + i]) / 255.0f;
  split.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t y = lab[8 + i];
    if (y >= split.num_classes) {
      throw DataError(labels.string() + ": label " + std::to_string(y) + " out of range at offset " +
                      std::to_string(8 + i));
    }
    split.labels[i] = y;
  }
  return split;
}

DatasetPair load_mnist(const fs::path& dir) {
  DatasetPair out;
  out.train = load_mnist_files(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  out.test = load_mnist_files(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  return out;
}

DatasetSplit load_cifar_files(const std::vector<fs::path>& files, int variant) {
  if (variant != 10 && variant != 100) throw DataError("cifar variant must be 10 or 100, got " + std::to_string(variant));
  if (files.empty()) throw DataError("no cifar batch files given");
  const std::size_t label_bytes = variant == 10 ? 1 : 2;
  const std::size_t record = label_bytes + kCifarPixels;

  std::vector<std::vector<std::uint8_t>> contents;
  std::size_t total = 0;
  for (const fs::path& f : files) {
    contents.push_back(read_file(f));
    const std::size_t size = contents.back().size();
    if (size == 0 || size % record != 0) {
      throw DataError(f.string() + ": size " + std::to_string(size) + " is not a multiple of the " +
                      std::to_string(record) + "-byte record; last full record ends at offset " +
                      std::to_string(size - size % record));
    }
    total += size / record;
  }

  DatasetSplit split;
  split.dataset = variant == 10 ? "cifar10" : "cifar100";
  split.num_classes = static_cast<std::size_t>(variant);
  split.images = Tensor<float>::uninitialized({total, 3, 32, 32});
  split.labels.resize(total);
  std::size_t idx = 0;
  for (std::size_t fi = 0; fi < files.size(); ++fi) {
    const std::vector<std::uint8_t>& bytes = contents[fi];
    for (std::size_t off = 0; off < bytes.size(); off += record, ++idx) {
      const std::uint8_t y = bytes[off + label_bytes - 1];
      if (y >= split.num_classes) {
        throw DataError(files[fi].string() + ": label " + std::to_string(y) + " out of range at offset " +
                        std::to_string(off + label_bytes - 1));
      }
      split.labels[idx] = y;
      float* dst = split.images.ptr() + idx * kCifarPixels;
      const std::uint8_t* src = bytes.data() + off + label_bytes;
      for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = static_cast<float>(src[p]) / 255.0f;
    }
  }
  return split;
}

DatasetPair load_cifar(const fs::path& dir, int variant) {
  fs::path root = dir;
  const char* nested = variant == 10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (fs::is_directory(dir / nested)) root = dir / nested;
  DatasetPair out;
  if (variant == 10) {
    std::vector<fs::path> train;
    for (int b = 1; b <= 5; ++b) train.push_back(root / ("data_batch_" + std::to_string(b) + ".bin"));
    out.train = load_cifar_files(train, 10);
    out.test = load_cifar_files({root / "test_batch.bin"}, 10);
  } else {
    out.train = load_cifar_files({root / "train.bin"}, variant);
    out.test = load_cifar_files({root / "test.bin"}, variant);
  }
  return out;
}

DatasetPair load_dataset(const std::string& dataset, const fs::path& dir) {
  if (dataset == "mnist") return load_mnist(dir);
  if (dataset == "cifar10") return load_cifar(dir, 10);
  if (dataset == "cifar100") return load_cifar(dir, 100);
  throw DataError("unknown dataset '" + dataset + "' (expected mnist, cifar10 or cifar100)");
}

NormStats fit_normalization(const DatasetSplit& split, bool divide_std) {
  const std::size_t n = split.images.dim(0), c = split.images.dim(1);
  const std::size_t hw = split.images.dim(2) * split.images.dim(3);
  const float* x = split.images.ptr();
  NormStats stats{std::vector<float>(c, 0.0f), std::vector<float>(c, 1.0f)};
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = x + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) sum += p[j];
    }
    const double mean = sum / count;
    stats.mean[ch] = static_cast<float>(mean);
    if (!divide_std) continue;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = x + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) sq += (p[j] - mean) * (p[j] - mean);
    }
    const double sd = std::sqrt(sq / count);
    stats.std[ch] = sd < 1e-6 ? 1.0f : static_cast<float>(sd);
  }
  return stats;
}

void apply_normalization(DatasetSplit& split, const NormStats& stats) {
  const std::size_t n = split.images.dim(0), c = split.images.dim(1);
  const std::size_t hw = split.images.dim(2) * split.images.dim(3);
  if (stats.mean.size() != c || stats.std.size() != c) {
    throw std::invalid_argument("normalization stats have " + std::to_string(stats.mean.size()) +
                                " channels, split has " + std::to_string(c));
  }
  float* x = split.images.ptr();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = x + (i * c + ch) * hw;
      const float m = stats.mean[ch], inv = 1.0f / stats.std[ch];
      for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] - m) * inv;
    }
  }
}

NormStats preprocess(DatasetPair& data, bool divide_std) {
  NormStats stats = fit_normalization(data.train, divide_std);
  apply_normalization(data.train, stats);
  apply_normalization(data.test, stats);
  return stats;
}

void crop_flip(const float* src, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t oy,
               std::size_t ox, bool flip, float* dst) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* plane = src + ch * h * w;
    float* out = dst + ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y + oy) - static_cast<long>(pad);
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x + ox) - static_cast<long>(pad);
        const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w);
        const std::size_t dx = flip ? w - 1 - x : x;
        out[y * w + dx] = inside ? plane[sy * static_cast<long>(w) + sx] : 0.0f;
      }
    }
  }
}

Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng) {
  if (image.rank() != 3) throw std::invalid_argument("augment expects a (C,H,W) image, got " + shape_str(image.shape()));
  constexpr std::size_t pad = 4;
  std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
  const std::size_t oy = offset(rng), ox = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  Tensor<float> out = Tensor<float>::uninitialized(image.shape());
  crop_flip(image.ptr(), image.dim(0), image.dim(1), image.dim(2), pad, oy, ox, flip, out.ptr());
  return out;
}

void augment_batch(Tensor<float>& images, std::mt19937_64& rng) {
  const std::size_t n = images.dim(0), per = images.numel() / n;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> one({images.dim(1), images.dim(2), images.dim(3)},
                      std::vector<float>(images.ptr() + i * per, images.ptr() + (i + 1) * per));
    const Tensor<float> out = augment(one, rng);
    std::copy_n(out.ptr(), per, images.ptr() + i * per);
  }
}

bool uses_augmentation(const std::string& dataset) { return dataset == "cifar10" || dataset == "cifar100"; }

DatasetSplit take(const DatasetSplit& split, std::size_t count) {
  if (count >= split.size()) return split;
  if (count == 0) throw std::invalid_argument("take() needs count >= 1");
  DatasetSplit out;
  out.dataset = split.dataset;
  out.num_classes = split.num_classes;
  Shape s = split.images.shape();
  const std::size_t per = split.images.numel() / s[0];
  s[0] = count;
  out.images = Tensor<float>::uninitialized(s);
  std::copy_n(split.images.ptr(), count * per, out.images.ptr());
  out.labels.assign(split.labels.begin(), split.labels.begin() + static_cast<long>(count));
  return out;
}

BatchIterator::BatchIterator(const DatasetSplit& split, std::size_t batch_size, bool shuffle, std::uint64_t seed)
    : split_(&split), batch_size_(batch_size), order_(split.size()) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t b = std::min(batch_size_, order_.size() - cursor_);
  Shape s = split_->images.shape();
  const std::size_t per = split_->images.numel() / s[0];
  s[0] = b;
  out.images = Tensor<float>::uninitialized(s);
  out.labels.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t idx = order_[cursor_ + i];
    std::copy_n(split_->images.ptr() + idx * per, per, out.images.ptr() + i * per);
    out.labels[i] = split_->labels[idx];
  }
  cursor_ += b;
  return true;
}

}  // namespace gmnet
