#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "lakit/data.hpp"

using namespace lakit;
namespace fs = std::filesystem;

namespace {

std::string cifar_dir() {
  if (const char* env = std::getenv("LAKIT_CIFAR10_DIR")) return env;
  return LAKIT_CIFAR10_DIR;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("lakit_test_" + name); }

void write_records(const fs::path& p, std::size_t n, std::size_t bytes_extra = 0) {
  std::ofstream os(p, std::ios::binary);
  for (std::size_t i = 0; i < n; ++i) {
    os.put(static_cast<char>(i % 10));
    for (std::size_t j = 0; j < 3072; ++j) os.put(static_cast<char>((i + j) % 256));
  }
  for (std::size_t j = 0; j < bytes_extra; ++j) os.put('\0');
}

}  // namespace

TEST(CifarBinary, ParsesRecords) {
  const auto p = temp_file("five.bin");
  write_records(p, 5);
  const auto ds = load_cifar_binary(p.string(), CifarVariant::cifar10, "train");
  ASSERT_EQ(ds.size(), 5u);
  EXPECT_EQ(ds.labels[3], 3u);
  // record 1, red plane, pixel 0 -> byte (1 + 0) / 255
  EXPECT_FLOAT_EQ(ds.pixels_of(1)[0], 1.0f / 255.0f);
  EXPECT_FLOAT_EQ(ds.pixels_of(1)[1024], static_cast<float>((1 + 1024) % 256) / 255.0f);
  fs::remove(p);
}

TEST(CifarBinary, TruncatedFileIsDataError) {
  const auto p = temp_file("trunc.bin");
  write_records(p, 2, 100);
  EXPECT_THROW(load_cifar_binary(p.string(), CifarVariant::cifar10), DataError);
  EXPECT_THROW(load_cifar_binary((p.string() + ".missing"), CifarVariant::cifar10), DataError);
  fs::remove(p);
}

TEST(CifarBinary, RealFirstTrainingLabel) {
  const auto dir = cifar_dir();
  const fs::path first = fs::path(dir) / "data_batch_1.bin";
  if (dir.empty() || !fs::exists(first)) GTEST_SKIP() << "CIFAR-10 binaries not available";
  const auto ds = load_cifar_binary(first.string(), CifarVariant::cifar10, "train");
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_EQ(ds.labels[0], 6u);  // frog
  EXPECT_EQ(ds.labels[1], 9u);  // truck
}

TEST(Subset, StratifiedSortedDeterministic) {
  const auto ds = synthesize_shapes(400, 4, 1);
  const auto a = subset_indices(ds, 101, 5);
  EXPECT_EQ(a, subset_indices(ds, 101, 5));
  EXPECT_NE(a, subset_indices(ds, 101, 6));
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 101u);
  std::vector<std::size_t> per_class(4);
  for (std::size_t i : a) ++per_class[ds.labels[i]];
  for (std::size_t c : per_class) EXPECT_TRUE(c == 25 || c == 26);
  EXPECT_THROW(subset_indices(ds, 401, 0), ValidationError);
  EXPECT_THROW(subset_indices(ds, 3, 0), ValidationError);
}

TEST(Subset, UnevenAvailabilityFillsOtherClasses) {
  Dataset ds;
  ds.num_classes = 2;
  ds.channels = ds.height = ds.width = 1;
  ds.labels = {0, 1, 1, 1, 1, 1};
  ds.pixels.assign(6, 0.5f);
  const auto idx = subset_indices(ds, 4, 0);
  std::size_t zeros = 0;
  for (std::size_t i : idx) zeros += ds.labels[i] == 0;
  EXPECT_EQ(zeros, 1u);
  EXPECT_EQ(idx.size(), 4u);
}

TEST(Batches, PartitionAndDeterminism) {
  const auto b = batches(1000, 128, 3, 0);
  EXPECT_EQ(b.size(), 8u);
  EXPECT_EQ(b.back().size(), 1000u - 7 * 128);
  std::vector<std::size_t> all;
  for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(b, batches(1000, 128, 3, 0));
  EXPECT_NE(b, batches(1000, 128, 3, 1));
  EXPECT_THROW(batches(10, 0, 0, 0), ValidationError);
}

TEST(Synthetic, ShapesAreValidAndSeeded) {
  const auto a = synthesize_shapes(64, 8, 3);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.labels[13], 13u % 8);
  EXPECT_EQ(a, synthesize_shapes(64, 8, 3));
  EXPECT_NE(a.pixels, synthesize_shapes(64, 8, 4).pixels);
  for (float v : a.pixels) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  EXPECT_THROW(synthesize_shapes(10, 9, 0), ValidationError);
}

TEST(Gather, CopiesPixels) {
  const auto ds = synthesize_shapes(8, 4, 0);
  const std::vector<std::size_t> idx{5, 2};
  const auto t = gather_batch<float>(ds, idx);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(t[0], ds.pixels_of(5)[0]);
  EXPECT_EQ(t[3072 + 100], ds.pixels_of(2)[100]);
}

TEST(Subset, SubsetOfSubsetKeepsEverything) {
  const auto ds = synthesize_shapes(300, 5, 2);
  const auto once = subset(ds, 120, 9);
  EXPECT_EQ(subset(once, once.size(), 9), once);
  EXPECT_EQ(subset(once, once.size(), 1234), once);
}

TEST(Subset, FullSizeIsAPermutation) {
  const auto ds = synthesize_shapes(97, 3, 4);
  const auto idx = subset_indices(ds, ds.size(), 17);
  std::vector<std::size_t> expect(ds.size());
  std::iota(expect.begin(), expect.end(), std::size_t{0});
  EXPECT_EQ(idx, expect);
}

TEST(Batches, EveryTrialIsAPermutation) {
  std::vector<int> first_slot(37, 0);
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 37, bs = 1 + trial % 40;
    const auto b = batches(n, bs, trial, trial % 3);
    std::vector<char> seen(n, 0);
    std::size_t count = 0;
    for (std::size_t j = 0; j < b.size(); ++j) {
      ASSERT_EQ(b[j].size(), j + 1 < b.size() ? bs : n - bs * (b.size() - 1));
      for (std::size_t i : b[j]) {
        ASSERT_LT(i, n);
        ASSERT_FALSE(seen[i]);
        seen[i] = 1;
        ++count;
      }
    }
    ASSERT_EQ(count, n);
    ++first_slot[b[0][0]];
  }
  // shuffle reaches every position; 1000 draws over 37 slots
  for (int c : first_slot) EXPECT_GT(c, 5);
}
