// SPDX-License-Identifier: Apache-2.0
//
// Test-side reference implementations. Nothing here calls into the library's
// kernels, so agreement with them is independent evidence.
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "gmnet/autodiff.hpp"
#include "gmnet/ops.hpp"
#include "gmnet/tensor.hpp"

namespace gmnet::testing {

/// Direct 7-loop dense convolution (groups = 1), zero padding.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride,
                                 std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y({n, o, oh, ow}, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long yy = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                acc += x.at(b, ic, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) * w.at(oc, ic, ki, kj);
              }
          y.at(b, oc, i, j) = acc;
        }
  return y;
}

/// Grouped conv as g independent dense convolutions on channel slices.
inline Tensor<double> sliced_conv(const Tensor<double>& x, const Tensor<double>& w, std::size_t g,
                                  std::size_t stride, std::size_t pad) {
  const std::size_t c = x.dim(1), o = w.dim(0);
  const std::size_t cg = c / g, og = o / g;
  std::vector<Tensor<double>> parts;
  for (std::size_t j = 0; j < g; ++j) {
    Tensor<double> wj({og, cg, w.dim(2), w.dim(3)});
    std::copy_n(w.ptr() + j * og * cg * w.dim(2) * w.dim(3), wj.numel(), wj.ptr());
    parts.push_back(naive_conv(slice_channels(x, j * cg, (j + 1) * cg), wj, stride, pad));
  }
  const Tensor<double>& p0 = parts.front();
  Tensor<double> y({x.dim(0), o, p0.dim(2), p0.dim(3)});
  const std::size_t hw = p0.dim(2) * p0.dim(3);
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t j = 0; j < g; ++j)
      std::copy_n(parts[j].ptr() + b * og * hw, og * hw, y.ptr() + (b * o + j * og) * hw);
  return y;
}

/// Scalar probe sum(out * R) for a fixed random R, so every output element
/// contributes a distinct weight to the gradient.
template <typename T>
Var<T> probe(const Var<T>& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(out, constant(Tensor<T>::randn(out->value.shape(), rng))));
}

struct FdResult {
  double worst = 0.0;
  std::string where;
  std::size_t kinks = 0;
  std::size_t checked = 0;
};

struct FdValue {
  double value = 0.0;
  bool kink = false;
};

/// Central difference at `eps`. When it disagrees with the eps/10 estimate
/// beyond `agree` (relative) plus the round-off of the finer step, the step
/// straddles a ReLU kink; the step keeps shrinking tenfold until two consecutive
/// estimates agree or it reaches `min_eps`, and the element is flagged.
template <typename F>
FdValue robust_fd(F&& f, Node<double>& node, std::size_t i, double eps, double agree = 1e-6,
                  double min_eps = 1e-8) {
  const double scale = std::max(1.0, std::abs(f()));
  auto agrees = [&](double a, double b, double step) {
    const double roundoff = 8.0 * std::numeric_limits<double>::epsilon() * scale / step;
    return std::abs(a - b) <= agree * std::max(std::abs(a), std::abs(b)) + roundoff;
  };
  double coarse = finite_diff_at(f, node, i, eps);
  double fine = finite_diff_at(f, node, i, eps / 10);
  if (agrees(coarse, fine, eps / 10)) return {coarse, false};
  for (eps /= 10; eps / 10 >= min_eps * (1 - 1e-9); eps /= 10) {
    coarse = fine;
    fine = finite_diff_at(f, node, i, eps / 10);
    if (agrees(coarse, fine, eps / 10)) break;
  }
  return {fine, true};
}

/// Backward gradient of `loss()` against central differences for every element
/// of every listed leaf.
inline FdResult fd_check(const std::function<Var<double>()>& loss, const std::vector<Var<double>>& leaves,
                         double eps = 1e-4, double floor = 1e-7) {
  for (const auto& l : leaves) l->grad.reset();
  Var<double> out = loss();
  backward(out);
  FdResult r;
  auto f = [&] { return loss()->value.item(); };
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Node<double>& leaf = *leaves[li];
    const Tensor<double> analytic = leaf.grad ? *leaf.grad : Tensor<double>(leaf.value.shape(), 0.0);
    for (std::size_t i = 0; i < leaf.value.numel(); ++i) {
      const FdValue numeric = robust_fd(f, leaf, i, eps);
      r.kinks += numeric.kink;
      ++r.checked;
      const double e = relative_error(analytic[i], numeric.value, floor);
      if (e > r.worst) {
        r.worst = e;
        r.where = "leaf " + std::to_string(li) + " index " + std::to_string(i) + " analytic " +
                  std::to_string(analytic[i]) + " numeric " + std::to_string(numeric.value);
      }
    }
  }
  return r;
}

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gmnet_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

/// IDX image file: magic 0x803, count, rows, cols, then pixels.
inline std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                            const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x803);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

/// IDX label file: magic 0x801, count, then labels.
inline std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x801);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

/// Writes a synthetic MNIST directory whose digits are learnable: class k
/// lights a distinct 7x7 block plus noise.
inline void write_synthetic_mnist(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_test,
                                  std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(0, 60);
  auto make = [&](std::size_t n, const std::string& img, const std::string& lab) {
    std::vector<std::uint8_t> px(n * 784), labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int k = static_cast<int>(i % 10);
      labels[i] = static_cast<std::uint8_t>(k);
      const int by = (k / 4) * 7 + 3, bx = (k % 4) * 7;
      for (int y = 0; y < 28; ++y)
        for (int x = 0; x < 28; ++x) {
          const bool on = y >= by && y < by + 7 && x >= bx && x < bx + 7;
          px[i * 784 + y * 28 + x] = static_cast<std::uint8_t>(on ? 255 - noise(rng) : noise(rng));
        }
    }
    write_bytes(dir / img, idx_images(static_cast<std::uint32_t>(n), 28, 28, px));
    write_bytes(dir / lab, idx_labels(labels));
  };
  make(n_train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
  make(n_test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
}

}  // namespace gmnet::testing
