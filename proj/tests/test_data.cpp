// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <map>

#include "gmnet/data.hpp"
#include "oracles.hpp"

namespace gmnet {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;
using testing::write_bytes;

fs::path mnist_dir() {
  const char* env = std::getenv("GMNET_MNIST_DIR");
  return env ? fs::path(env) : fs::path("/root/data/mnist");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

// ---- MNIST ------------------------------------------------------------------

TEST(Mnist, OneImageFixtureRoundTrips) {
  TempDir dir;
  std::vector<std::uint8_t> px(6);
  for (std::size_t i = 0; i < 6; ++i) px[i] = static_cast<std::uint8_t>(i * 51);
  write_bytes(dir / "img", testing::idx_images(1, 2, 3, px));
  write_bytes(dir / "lab", testing::idx_labels({7}));
  const DatasetSplit s = load_mnist_files(dir / "img", dir / "lab");
  EXPECT_EQ(s.images.shape(), (Shape{1, 1, 2, 3}));
  ASSERT_EQ(s.labels.size(), 1u);
  EXPECT_EQ(s.labels[0], 7);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(s.images[i], static_cast<float>(i * 51) / 255.0f);
  EXPECT_EQ(s.dataset, "mnist");
  EXPECT_EQ(s.num_classes, 10u);
}

TEST(Mnist, MalformedFilesNameFileAndOffset) {
  TempDir dir;
  write_bytes(dir / "lab", testing::idx_labels({1, 2}));
  auto img = testing::idx_images(2, 2, 2, std::vector<std::uint8_t>(8, 0));

  auto bad_magic = img;
  bad_magic[3] = 0x04;
  write_bytes(dir / "magic", bad_magic);
  std::string msg = error_of([&] { load_mnist_files(dir / "magic", dir / "lab"); });
  EXPECT_NE(msg.find("magic"), std::string::npos) << msg;
  EXPECT_NE(msg.find("offset 0"), std::string::npos) << msg;

  auto truncated = img;
  truncated.resize(truncated.size() - 3);
  write_bytes(dir / "short", truncated);
  msg = error_of([&] { load_mnist_files(dir / "short", dir / "lab"); });
  EXPECT_NE(msg.find("short"), std::string::npos) << msg;
  EXPECT_NE(msg.find("truncated at offset 21"), std::string::npos) << msg;

  write_bytes(dir / "img", img);
  write_bytes(dir / "lab3", testing::idx_labels({1, 2, 3}));
  msg = error_of([&] { load_mnist_files(dir / "img", dir / "lab3"); });
  EXPECT_NE(msg.find("does not match"), std::string::npos) << msg;

  write_bytes(dir / "lab_bad", testing::idx_labels({1, 12}));
  msg = error_of([&] { load_mnist_files(dir / "img", dir / "lab_bad"); });
  EXPECT_NE(msg.find("offset 9"), std::string::npos) << msg;

  write_bytes(dir / "stub", {0, 0});
  msg = error_of([&] { load_mnist_files(dir / "stub", dir / "lab"); });
  EXPECT_NE(msg.find("truncated header"), std::string::npos) << msg;

  msg = error_of([&] { load_mnist_files(dir / "missing", dir / "lab"); });
  EXPECT_NE(msg.find("cannot open"), std::string::npos) << msg;
}

TEST(Mnist, RealFilesHaveStandardSplits) {
  if (!fs::exists(mnist_dir() / "t10k-labels-idx1-ubyte")) GTEST_SKIP() << "MNIST not present at " << mnist_dir();
  const DatasetPair d = load_mnist(mnist_dir());
  EXPECT_EQ(d.train.size(), 60000u);
  EXPECT_EQ(d.test.size(), 10000u);
  EXPECT_EQ(d.train.images.shape(), (Shape{60000, 1, 28, 28}));
  std::vector<std::size_t> hist(10, 0);
  for (auto y : d.test.labels) ++hist.at(static_cast<std::size_t>(y));
  std::size_t total = 0;
  for (auto h : hist) {
    EXPECT_GT(h, 800u);
    total += h;
  }
  EXPECT_EQ(total, 10000u);
  const auto [lo, hi] = std::minmax_element(d.train.images.data().begin(), d.train.images.data().end());
  EXPECT_EQ(*lo, 0.0f);
  EXPECT_EQ(*hi, 1.0f);
}

// ---- CIFAR ------------------------------------------------------------------

std::vector<std::uint8_t> cifar_record(std::uint8_t coarse, std::uint8_t label, bool two_labels, std::uint8_t base) {
  std::vector<std::uint8_t> r;
  if (two_labels) r.push_back(coarse);
  r.push_back(label);
  for (std::size_t p = 0; p < 3072; ++p) r.push_back(static_cast<std::uint8_t>((p + base) % 256));
  return r;
}

TEST(Cifar, SingleRecordFixtureRoundTrips) {
  TempDir dir;
  write_bytes(dir / "one.bin", cifar_record(0, 6, false, 9));
  const DatasetSplit s = load_cifar_files({dir / "one.bin"}, 10);
  EXPECT_EQ(s.images.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(s.labels, std::vector<std::int32_t>{6});
  EXPECT_FLOAT_EQ(s.images.at(0, 0, 0, 0), 9.0f / 255.0f);
  EXPECT_FLOAT_EQ(s.images.at(0, 1, 0, 0), static_cast<float>((1024 + 9) % 256) / 255.0f);
  EXPECT_FLOAT_EQ(s.images.at(0, 2, 31, 31), static_cast<float>((3071 + 9) % 256) / 255.0f);
}

TEST(Cifar, HundredKeepsFineLabel) {
  TempDir dir;
  auto bytes = cifar_record(3, 87, true, 0);
  const auto second = cifar_record(19, 5, true, 1);
  bytes.insert(bytes.end(), second.begin(), second.end());
  write_bytes(dir / "train.bin", bytes);
  const DatasetSplit s = load_cifar_files({dir / "train.bin"}, 100);
  EXPECT_EQ(s.labels, (std::vector<std::int32_t>{87, 5}));
  EXPECT_EQ(s.num_classes, 100u);
}

TEST(Cifar, DirectoryLayoutAndCounts) {
  TempDir dir;
  const fs::path root = dir / "cifar-10-batches-bin";
  fs::create_directories(root);
  for (int b = 1; b <= 5; ++b) {
    std::vector<std::uint8_t> bytes;
    for (std::uint8_t k = 0; k < 10; ++k) {
      const auto r = cifar_record(0, k, false, static_cast<std::uint8_t>(b));
      bytes.insert(bytes.end(), r.begin(), r.end());
    }
    write_bytes(root / ("data_batch_" + std::to_string(b) + ".bin"), bytes);
  }
  std::vector<std::uint8_t> test;
  for (std::uint8_t k = 0; k < 10; ++k) {
    for (int rep = 0; rep < 2; ++rep) {
      const auto r = cifar_record(0, k, false, 0);
      test.insert(test.end(), r.begin(), r.end());
    }
  }
  write_bytes(root / "test_batch.bin", test);
  const DatasetPair d = load_dataset("cifar10", dir.path());
  EXPECT_EQ(d.train.size(), 50u);
  std::map<std::int32_t, int> per_class;
  for (auto y : d.test.labels) ++per_class[y];
  EXPECT_EQ(per_class.size(), 10u);
  for (const auto& [k, n] : per_class) EXPECT_EQ(n, 2) << "class " << k;
}

TEST(Cifar, MalformedFilesAreRejected) {
  TempDir dir;
  auto rec = cifar_record(0, 1, false, 0);
  rec.pop_back();
  write_bytes(dir / "short.bin", rec);
  std::string msg = error_of([&] { load_cifar_files({dir / "short.bin"}, 10); });
  EXPECT_NE(msg.find("short.bin"), std::string::npos) << msg;
  EXPECT_NE(msg.find("3073"), std::string::npos) << msg;

  write_bytes(dir / "label.bin", cifar_record(0, 10, false, 0));
  msg = error_of([&] { load_cifar_files({dir / "label.bin"}, 10); });
  EXPECT_NE(msg.find("offset 0"), std::string::npos) << msg;

  EXPECT_THROW(load_cifar_files({dir / "label.bin"}, 7), DataError);
  EXPECT_THROW(load_dataset("svhn", dir.path()), DataError);
  EXPECT_THROW(load_cifar(dir.path(), 10), DataError);
}

// ---- normalization ----------------------------------------------------------

DatasetSplit random_split(std::size_t n, std::size_t c, std::uint64_t seed, float offset) {
  Rng rng(seed);
  DatasetSplit s;
  s.images = Tensor<float>::uniform({n, c, 5, 5}, rng, 0.0f, 1.0f);
  for (float& v : s.images.data()) v += offset;
  s.labels.assign(n, 0);
  s.num_classes = 10;
  return s;
}

std::vector<double> channel_means(const DatasetSplit& s) {
  const std::size_t n = s.images.dim(0), c = s.images.dim(1), hw = 25;
  std::vector<double> m(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) m[ch] += s.images[(i * c + ch) * hw + p];
  for (double& v : m) v /= static_cast<double>(n * hw);
  return m;
}

TEST(Preprocess, TrainMeansVanishAndTestUsesTrainStats) {
  DatasetPair d{random_split(40, 3, 1, 0.0f), random_split(10, 3, 2, 0.5f)};
  const DatasetPair raw = d;
  const NormStats st = preprocess(d);
  for (double m : channel_means(d.train)) EXPECT_LT(std::abs(m), 1e-6);
  for (std::size_t i = 0; i < d.test.images.numel(); ++i) {
    const std::size_t ch = (i / 25) % 3;
    EXPECT_NEAR(d.test.images[i], (raw.test.images[i] - st.mean[ch]) / st.std[ch], 1e-5);
  }
  const auto own = channel_means(d.test);
  EXPECT_GT(own[0], 0.5);

  DatasetPair m{random_split(10, 1, 3, 0.0f), random_split(2, 1, 4, 0.0f)};
  const NormStats mean_only = preprocess(m, false);
  EXPECT_EQ(mean_only.std[0], 1.0f);
}

TEST(Preprocess, ConstantDatasetBecomesZeros) {
  DatasetPair d{random_split(4, 2, 5, 0.0f), random_split(2, 2, 6, 0.0f)};
  d.train.images.fill(0.3f);
  d.test.images.fill(0.3f);
  const NormStats st = preprocess(d);
  EXPECT_EQ(st.std[0], 1.0f);
  for (float v : d.train.images.data()) EXPECT_EQ(v, 0.0f);
  DatasetSplit wrong = random_split(2, 1, 7, 0.0f);
  EXPECT_THROW(apply_normalization(wrong, st), std::invalid_argument);
}

// ---- augmentation -----------------------------------------------------------

TEST(Augment, CenterCropIdentityAndDoubleFlip) {
  Rng rng(8);
  const auto img = Tensor<float>::uniform({3, 8, 8}, rng, 0.1f, 1.0f);
  Tensor<float> out({3, 8, 8}), back({3, 8, 8});
  crop_flip(img.ptr(), 3, 8, 8, 4, 4, 4, false, out.ptr());
  EXPECT_EQ(out, img);
  crop_flip(img.ptr(), 3, 8, 8, 4, 4, 4, true, out.ptr());
  EXPECT_NE(out, img);
  crop_flip(out.ptr(), 3, 8, 8, 4, 4, 4, true, back.ptr());
  EXPECT_EQ(back, img);
  crop_flip(img.ptr(), 3, 8, 8, 4, 5, 4, false, out.ptr());
  EXPECT_EQ(out.data()[0], img.data()[8]);
  EXPECT_EQ(out.data()[7 * 8], 0.0f);
}

TEST(Augment, OutputPixelsArePaddingOrSource) {
  Rng rng(9);
  const auto img = Tensor<float>::uniform({3, 32, 32}, rng, 0.1f, 1.0f);
  std::vector<float> pool(img.data().begin(), img.data().end());
  std::sort(pool.begin(), pool.end());
  std::mt19937_64 arng(10);
  bool saw_padding = false;
  for (int t = 0; t < 50; ++t) {
    const auto out = augment(img, arng);
    EXPECT_EQ(out.shape(), img.shape());
    for (float v : out.data()) {
      if (v == 0.0f) {
        saw_padding = true;
        continue;
      }
      EXPECT_TRUE(std::binary_search(pool.begin(), pool.end(), v));
    }
  }
  EXPECT_TRUE(saw_padding);
  EXPECT_THROW(augment(Tensor<float>::zeros({1, 3, 4, 4}), arng), std::invalid_argument);
  EXPECT_TRUE(uses_augmentation("cifar10"));
  EXPECT_FALSE(uses_augmentation("mnist"));
}

// ---- batching ---------------------------------------------------------------

DatasetSplit labelled(std::size_t n) {
  DatasetSplit s;
  s.images = Tensor<float>({n, 1, 2, 2});
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(static_cast<std::int32_t>(i % 10));
    for (std::size_t p = 0; p < 4; ++p) s.images[i * 4 + p] = static_cast<float>(i);
  }
  s.num_classes = 10;
  return s;
}

TEST(BatchIterator, SizesOrderAndMultiset) {
  const DatasetSplit s = labelled(10);
  BatchIterator it(s, 4, true, 42);
  EXPECT_EQ(it.num_batches(), 3u);
  std::vector<std::size_t> sizes;
  std::vector<std::int32_t> seen;
  Batch b;
  while (it.next(b)) {
    sizes.push_back(b.labels.size());
    EXPECT_EQ(b.images.dim(0), b.labels.size());
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      EXPECT_EQ(static_cast<std::int32_t>(b.images[i * 4]) % 10, b.labels[i]);
      seen.push_back(b.labels[i]);
    }
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  auto expect = s.labels;
  std::sort(seen.begin(), seen.end());
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(seen, expect);

  BatchIterator again(s, 4, true, 42), other(s, 4, true, 43), plain(s, 4, false, 42);
  EXPECT_EQ(again.order(), it.order());
  EXPECT_NE(other.order(), it.order());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(plain.order()[i], i);
  EXPECT_THROW(BatchIterator(s, 0, false, 0), std::invalid_argument);
}

TEST(Take, PrefixSubset) {
  const DatasetSplit s = labelled(10);
  const DatasetSplit t = take(s, 3);
  EXPECT_EQ(t.size(), 3u);
  EXPECT_EQ(t.images.dim(0), 3u);
  EXPECT_EQ(t.images[8], 2.0f);
  EXPECT_EQ(take(s, 50).size(), 10u);
}

}  // namespace
}  // namespace gmnet
