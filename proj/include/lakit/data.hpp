#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lakit/augment.hpp"
#include "lakit/errors.hpp"
#include "lakit/random.hpp"
#include "lakit/tensor.hpp"

namespace lakit {

// N images (channels x height x width, values in [0, 1]) with class labels.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 0;
  std::string split;
  std::vector<float> pixels;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return channels * height * width; }

  std::span<const float> pixels_of(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }

  Image image(std::size_t i) const {
    const auto px = pixels_of(i);
    return Image(channels, height, width, std::vector<float>(px.begin(), px.end()));
  }

  // Throws unless labels < K, N > 0 and pixel storage matches.
  void validate() const {
    if (labels.empty()) throw DataError("dataset '" + split + "' is empty");
    if (pixels.size() != labels.size() * image_size()) throw DataError("dataset '" + split + "': pixel count mismatch");
    for (std::size_t l : labels)
      if (l >= num_classes) throw DataError("dataset '" + split + "': label " + std::to_string(l) + " >= K");
  }

  bool operator==(const Dataset&) const = default;
};

enum class CifarVariant { cifar10, cifar100_fine };

// Appends the records of one CIFAR binary file. cifar10 record: 1 label byte
// + 3072 pixel bytes (R, G, B planes, row-major); cifar100: coarse byte, fine
// byte, 3072 pixel bytes.
inline void append_cifar_binary(Dataset& ds, const std::string& path, CifarVariant variant) {
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t record = label_bytes + 3072;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset file " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % record != 0) {
    throw DataError(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                    std::to_string(record) + "-byte record (truncated or wrong variant)");
  }
  const std::size_t n = bytes.size() / record;
  ds.pixels.reserve(ds.pixels.size() + n * 3072);
  ds.labels.reserve(ds.labels.size() + n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const std::size_t label = rec[label_bytes - 1];
    if (label >= ds.num_classes) throw DataError(path + ": label " + std::to_string(label) + " out of range");
    ds.labels.push_back(label);
    for (std::size_t j = 0; j < 3072; ++j) ds.pixels.push_back(static_cast<float>(rec[label_bytes + j]) / 255.0f);
  }
}

inline Dataset load_cifar_binary(std::span<const std::string> paths, CifarVariant variant, std::string split = "") {
  Dataset ds;
  ds.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  ds.split = std::move(split);
  for (const auto& p : paths) append_cifar_binary(ds, p, variant);
  ds.validate();
  return ds;
}

inline Dataset load_cifar_binary(const std::string& path, CifarVariant variant, std::string split = "") {
  return load_cifar_binary(std::span<const std::string>(&path, 1), variant, std::move(split));
}

inline Dataset select(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.pixels.reserve(indices.size() * ds.image_size());
  for (std::size_t i : indices) {
    const auto px = ds.pixels_of(i);
    out.pixels.insert(out.pixels.end(), px.begin(), px.end());
    out.labels.push_back(ds.labels.at(i));
  }
  return out;
}

// Class-stratified sample of n indices, returned in ascending order. Per-class
// quotas are as even as availability allows; the members of each class are
// chosen by a seeded shuffle.
inline std::vector<std::size_t> subset_indices(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) throw ValidationError("subset: n exceeds dataset size");
  if (n < ds.num_classes) throw ValidationError("subset: n smaller than class count, cannot stratify");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  // water-fill quotas: raise every class by one until n is reached
  std::vector<std::size_t> quota(ds.num_classes, 0);
  std::size_t assigned = 0;
  while (assigned < n) {
    for (std::size_t c = 0; c < ds.num_classes && assigned < n; ++c) {
      if (quota[c] < by_class[c].size()) {
        ++quota[c];
        ++assigned;
      }
    }
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    Rng rng(derive_seed({seed, c}));
    auto members = by_class[c];
    shuffle(members.begin(), members.end(), rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  const auto idx = subset_indices(ds, n, seed);
  return select(ds, idx);
}

// Procedural 3 x 32 x 32 shapes (square, disc, horizontal bar, vertical bar,
// plus, ring, diagonal, triangle) with random colors, position and size on a
// noisy background. Label of sample i is i mod K.
inline Dataset synthesize_shapes(std::size_t n, std::size_t k = 4, std::uint64_t seed = 0) {
  if (k < 2 || k > 8) throw ValidationError("synthesize_shapes: K must be in [2, 8]");
  if (n < k) throw ValidationError("synthesize_shapes: n must be at least K");
  Dataset ds;
  ds.num_classes = k;
  ds.split = "synthetic";
  ds.pixels.resize(n * 3 * 32 * 32);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed({seed, i}));
    const std::size_t label = i % k;
    ds.labels[i] = label;
    float* img = ds.pixels.data() + i * 3 * 1024;
    double bg[3], fg[3];
    for (auto& v : bg) v = rng.uniform(0.0, 0.45);
    for (auto& v : fg) v = rng.uniform(0.55, 1.0);
    const double cy = 15.5 + rng.uniform(-6.0, 6.0);
    const double cx = 15.5 + rng.uniform(-6.0, 6.0);
    const double r = rng.uniform(5.0, 9.0);
    const double t = r * 0.35;  // stroke half-width
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double d = std::sqrt(dx * dx + dy * dy);
        bool inside = false;
        switch (label) {
          case 0: inside = std::abs(dx) <= r * 0.8 && std::abs(dy) <= r * 0.8; break;
          case 1: inside = d <= r; break;
          case 2: inside = std::abs(dx) <= r && std::abs(dy) <= t; break;
          case 3: inside = std::abs(dy) <= r && std::abs(dx) <= t; break;
          case 4: inside = (std::abs(dx) <= r && std::abs(dy) <= t * 0.7) || (std::abs(dy) <= r && std::abs(dx) <= t * 0.7); break;
          case 5: inside = d <= r && d >= r * 0.55; break;
          case 6: inside = std::abs(dx - dy) <= t * 1.2 && std::abs(dx + dy) <= 2 * r; break;
          case 7: inside = dy <= r * 0.7 && dy >= -r && std::abs(dx) <= (dy + r) * 0.6; break;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = inside ? fg[c] : bg[c];
          img[c * 1024 + y * 32 + x] = clamp01(base + 0.05 * rng.normal());
        }
      }
  }
  return ds;
}

// Index batches for one epoch: a seeded permutation of [0, n) cut into
// batch_size chunks; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                     std::uint64_t epoch) {
  if (batch_size == 0) throw ValidationError("batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed, epoch, 0x5348554646ULL}));
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// Sequential (unshuffled) chunks, for evaluation.
inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("batches: batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> b(std::min(n, start + batch_size) - start);
    std::iota(b.begin(), b.end(), start);
    out.push_back(std::move(b));
  }
  return out;
}

template <class T>
Tensor<T> stack_images(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const auto& f = images.front();
  Tensor<T> out({images.size(), f.channels, f.height, f.width});
  auto dst = out.data();
  const std::size_t sz = f.pixels.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].pixels.size() != sz) throw ShapeError("stack_images: images differ in shape");
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * sz));
  }
  return out;
}

template <class T>
Tensor<T> gather_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Tensor<T> out({indices.size(), ds.channels, ds.height, ds.width});
  auto dst = out.data();
  const std::size_t sz = ds.image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto px = ds.pixels_of(indices[i]);
    std::copy(px.begin(), px.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * sz));
  }
  return out;
}

}  // namespace lakit
