#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lakit/errors.hpp"
#include "lakit/random.hpp"

namespace lakit {

// channels x height x width, values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}
  Image(std::size_t c, std::size_t h, std::size_t w, std::vector<float> data)
      : channels(c), height(h), width(w), pixels(std::move(data)) {
    if (pixels.size() != c * h * w) throw ShapeError("image: pixel count does not match extents");
  }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  bool operator==(const Image&) const = default;
};

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// ---- label-preserving training operations --------------------------------

struct GammaRange {
  double lo = 0.5;
  double hi = 2.0;
};

// out = in^gamma per pixel.
inline Image apply_gamma(const Image& img, double gamma, GammaRange range = {}) {
  if (!(gamma >= range.lo && gamma <= range.hi)) {
    throw ValidationError("gamma: " + std::to_string(gamma) + " outside [" + std::to_string(range.lo) + ", " +
                          std::to_string(range.hi) + "]");
  }
  Image out = img;
  if (gamma == 1.0) return out;
  for (auto& v : out.pixels) v = clamp01(std::pow(static_cast<double>(v), gamma));
  return out;
}

inline constexpr double kJitterMinKelvin = 3000.0;
inline constexpr double kJitterMaxKelvin = 15000.0;
// Gains are expressed relative to the locus color at this temperature, so
// jittering to it leaves an image unchanged.
inline constexpr double kJitterNeutralKelvin = 6500.0;

// CIE 1931 chromaticity of a blackbody at `kelvin`, cubic-spline
// approximation of the Planckian locus (Kim et al.), valid 1667 K - 25000 K.
inline std::array<double, 2> planckian_chromaticity(double kelvin) {
  const double t = kelvin;
  const double t2 = t * t, t3 = t2 * t;
  double x = 0.0;
  if (t <= 4000.0) {
    x = -0.2661239e9 / t3 - 0.2343589e6 / t2 + 0.8776956e3 / t + 0.179910;
  } else {
    x = -3.0258469e9 / t3 + 2.1070379e6 / t2 + 0.2226347e3 / t + 0.240390;
  }
  const double x2 = x * x, x3 = x2 * x;
  double y = 0.0;
  if (t <= 2222.0) {
    y = -1.1063814 * x3 - 1.34811020 * x2 + 2.18555832 * x - 0.20219683;
  } else if (t <= 4000.0) {
    y = -0.9549476 * x3 - 1.37418593 * x2 + 2.09137015 * x - 0.16748867;
  } else {
    y = 3.0817580 * x3 - 5.87338670 * x2 + 3.75112997 * x - 0.37001483;
  }
  return {x, y};
}

// Linear sRGB (D65) of the locus point with luminance Y = 1.
inline std::array<double, 3> planckian_rgb(double kelvin) {
  const auto [x, y] = planckian_chromaticity(kelvin);
  const double cx = x / y, cy = 1.0, cz = (1.0 - x - y) / y;
  return {3.2404542 * cx - 1.5371385 * cy - 0.4985314 * cz, -0.9692660 * cx + 1.8760108 * cy + 0.0415560 * cz,
          0.0556434 * cx - 0.2040259 * cy + 1.0572252 * cz};
}

// Per-channel (r, g, b) gains with g = 1.
inline std::array<double, 3> planckian_gains(double kelvin) {
  if (!(kelvin >= kJitterMinKelvin && kelvin <= kJitterMaxKelvin)) {
    throw ValidationError("planckian_jitter: temperature " + std::to_string(kelvin) + " K outside [3000, 15000]");
  }
  const auto rgb = planckian_rgb(kelvin);
  const auto ref = planckian_rgb(kJitterNeutralKelvin);
  const std::array<double, 3> rel = {rgb[0] / ref[0], rgb[1] / ref[1], rgb[2] / ref[2]};
  return {rel[0] / rel[1], rel[1] / rel[1], rel[2] / rel[1]};
}

inline Image apply_planckian_jitter(const Image& img, double kelvin) {
  if (img.channels != 3) throw ShapeError("planckian_jitter: needs a 3-channel image");
  const auto gains = planckian_gains(kelvin);
  Image out = img;
  for (std::size_t c = 0; c < 3; ++c) {
    if (gains[c] == 1.0) continue;
    float* plane = out.pixels.data() + c * img.height * img.width;
    for (std::size_t i = 0; i < img.height * img.width; ++i) plane[i] = clamp01(gains[c] * plane[i]);
  }
  return out;
}

// Square (2^n + 1) fractal field from classic diamond-square, unnormalized.
// Random draws, all U(-1, 1) from Rng(seed), are consumed in this order: the
// four corners (0,0), (0,S-1), (S-1,0), (S-1,S-1); then per level l = 1..n the
// diamond centers row-major followed by the square-step edge points row-major.
// Level l displacements are scaled by roughness^l. Edge points average only
// the neighbours inside the grid.
inline std::vector<double> diamond_square(std::size_t levels, double roughness, std::uint64_t seed) {
  if (levels == 0 || levels > 16) throw ValidationError("plasma: level count must be in [1, 16]");
  const std::size_t s = (std::size_t{1} << levels) + 1;
  std::vector<double> f(s * s, 0.0);
  Rng rng(seed);
  auto draw = [&rng] { return rng.uniform(-1.0, 1.0); };
  auto at = [&f, s](std::size_t y, std::size_t x) -> double& { return f[y * s + x]; };
  at(0, 0) = draw();
  at(0, s - 1) = draw();
  at(s - 1, 0) = draw();
  at(s - 1, s - 1) = draw();
  double scale = 1.0;
  for (std::size_t step = s - 1; step > 1; step /= 2) {
    const std::size_t half = step / 2;
    scale *= roughness;
    for (std::size_t y = half; y < s; y += step)
      for (std::size_t x = half; x < s; x += step) {
        const double avg = (at(y - half, x - half) + at(y - half, x + half) + at(y + half, x - half) +
                            at(y + half, x + half)) / 4.0;
        at(y, x) = avg + draw() * scale;
      }
    for (std::size_t y = 0; y < s; y += half) {
      for (std::size_t x = ((y / half) % 2 == 0) ? half : 0; x < s; x += step) {
        double total = 0.0;
        int count = 0;
        if (y >= half) total += at(y - half, x), ++count;
        if (y + half < s) total += at(y + half, x), ++count;
        if (x >= half) total += at(y, x - half), ++count;
        if (x + half < s) total += at(y, x + half), ++count;
        at(y, x) = total / count + draw() * scale;
      }
    }
  }
  return f;
}

// Field cropped to height x width and min-max normalized to [0, 1].
inline std::vector<double> plasma_field(std::size_t height, std::size_t width, double roughness, std::uint64_t seed) {
  std::size_t levels = 1;
  while ((std::size_t{1} << levels) + 1 < std::max(height, width)) ++levels;
  const std::size_t s = (std::size_t{1} << levels) + 1;
  const auto full = diamond_square(levels, roughness, seed);
  std::vector<double> out(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) out[y * width + x] = full[y * s + x];
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double mn = *lo, span = *hi - *lo;
  for (auto& v : out) v = span > 0.0 ? (v - mn) / span : 0.5;
  return out;
}

// out = clamp((1 - alpha) * img + alpha * F) with F the plasma field.
inline Image apply_plasma(const Image& img, double roughness, double alpha, std::uint64_t seed) {
  if (!(roughness > 0.0 && roughness <= 1.0)) throw ValidationError("plasma: roughness outside (0, 1]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("plasma: alpha outside [0, 1]");
  Image out = img;
  if (alpha == 0.0) return out;
  const auto field = plasma_field(img.height, img.width, roughness, seed);
  const std::size_t hw = img.height * img.width;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      float& v = out.pixels[c * hw + i];
      v = clamp01((1.0 - alpha) * v + alpha * field[i]);
    }
  return out;
}

// ---- operation descriptors -------------------------------------------------

enum class AugOp { identity, plasma, planckian_jitter, gamma };

inline const char* aug_op_name(AugOp op) {
  switch (op) {
    case AugOp::identity: return "identity";
    case AugOp::plasma: return "plasma";
    case AugOp::planckian_jitter: return "planckian_jitter";
    case AugOp::gamma: return "gamma";
  }
  return "?";
}

inline AugOp parse_aug_op(std::string_view s) {
  if (s == "identity") return AugOp::identity;
  if (s == "plasma") return AugOp::plasma;
  if (s == "planckian_jitter" || s == "jitter") return AugOp::planckian_jitter;
  if (s == "gamma") return AugOp::gamma;
  throw ConfigError("unknown augmentation op '" + std::string(s) + "'");
}

// params: plasma {roughness, alpha}; planckian_jitter {kelvin}; gamma {gamma};
// identity {}.
struct AugOpDescriptor {
  AugOp op = AugOp::identity;
  std::vector<double> params;
  std::uint64_t seed = 0;
};

// Sampling ranges for training-time operation parameters.
struct AugParamRanges {
  double gamma_lo = 0.5, gamma_hi = 2.0;
  double kelvin_lo = kJitterMinKelvin, kelvin_hi = kJitterMaxKelvin;
  double roughness_lo = 0.4, roughness_hi = 0.8;
  double alpha_lo = 0.2, alpha_hi = 0.5;
};

inline AugOpDescriptor sample_op(AugOp op, Rng& rng, const AugParamRanges& r = {}) {
  AugOpDescriptor d{op, {}, 0};
  switch (op) {
    case AugOp::identity: break;
    case AugOp::plasma:
      d.params = {rng.uniform(r.roughness_lo, r.roughness_hi), rng.uniform(r.alpha_lo, r.alpha_hi)};
      d.seed = rng.next_u64();
      break;
    case AugOp::planckian_jitter: d.params = {rng.uniform(r.kelvin_lo, r.kelvin_hi)}; break;
    case AugOp::gamma: {
      // log-uniform so darkening and brightening are equally likely
      const double lg = rng.uniform(std::log(r.gamma_lo), std::log(r.gamma_hi));
      d.params = {std::clamp(std::exp(lg), r.gamma_lo, r.gamma_hi)};
      break;
    }
  }
  return d;
}

inline Image apply_op(const Image& img, const AugOpDescriptor& d) {
  auto need = [&](std::size_t n) {
    if (d.params.size() != n) {
      throw ValidationError(std::string(aug_op_name(d.op)) + ": expected " + std::to_string(n) + " parameters");
    }
  };
  switch (d.op) {
    case AugOp::identity: need(0); return img;
    case AugOp::plasma: need(2); return apply_plasma(img, d.params[0], d.params[1], d.seed);
    case AugOp::planckian_jitter: need(1); return apply_planckian_jitter(img, d.params[0]);
    case AugOp::gamma: need(1); return apply_gamma(img, d.params[0]);
  }
  return img;
}

// ---- preprocessing ---------------------------------------------------------

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

// Mirror padding that excludes the edge pixel (a b c | b a for pad 2 on the left of "a b c").
inline Image reflect_pad(const Image& img, std::size_t pad) {
  if (pad >= img.height || pad >= img.width) throw ShapeError("reflect_pad: pad must be smaller than the image");
  Image out(img.channels, img.height + 2 * pad, img.width + 2 * pad);
  auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::ptrdiff_t y = 0; y < h + 2 * p; ++y)
      for (std::ptrdiff_t x = 0; x < w + 2 * p; ++x)
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            img.at(c, static_cast<std::size_t>(reflect(y - p, h)), static_cast<std::size_t>(reflect(x - p, w)));
  return out;
}

inline Image crop(const Image& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (top + height > img.height || left + width > img.width) throw ShapeError("crop: window outside image");
  Image out(img.channels, height, width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, top + y, left + x);
  return out;
}

struct FlipCropParams {
  std::size_t pad = 4;
  std::size_t crop = 32;
  double flip_probability = 0.5;
};

// Random horizontal flip, reflect-pad, random crop back to `crop` x `crop`.
inline Image preprocess_flip_crop(const Image& img, std::uint64_t seed, const FlipCropParams& p = {}) {
  if (img.height < p.crop || img.width < p.crop) throw ShapeError("preprocess: image smaller than crop size");
  Rng rng(seed);
  const bool flip = rng.bernoulli(p.flip_probability);
  const auto top = static_cast<std::size_t>(rng.below(img.height + 2 * p.pad - p.crop + 1));
  const auto left = static_cast<std::size_t>(rng.below(img.width + 2 * p.pad - p.crop + 1));
  const Image base = flip ? flip_horizontal(img) : img;
  if (p.pad == 0) return crop(base, top, left, p.crop, p.crop);
  return crop(reflect_pad(base, p.pad), top, left, p.crop, p.crop);
}

// ---- corruption benchmark ----------------------------------------------------

enum class Corruption { gaussian_noise, shot_noise, impulse_noise, box_blur, brightness, contrast, pixelate };

inline constexpr std::array<Corruption, 7> kAllCorruptions = {
    Corruption::gaussian_noise, Corruption::shot_noise, Corruption::impulse_noise, Corruption::box_blur,
    Corruption::brightness,     Corruption::contrast,   Corruption::pixelate};

inline const char* corruption_name(Corruption c) {
  switch (c) {
    case Corruption::gaussian_noise: return "gaussian_noise";
    case Corruption::shot_noise: return "shot_noise";
    case Corruption::impulse_noise: return "impulse_noise";
    case Corruption::box_blur: return "box_blur";
    case Corruption::brightness: return "brightness";
    case Corruption::contrast: return "contrast";
    case Corruption::pixelate: return "pixelate";
  }
  return "?";
}

inline Corruption parse_corruption(std::string_view s) {
  for (Corruption c : kAllCorruptions)
    if (s == corruption_name(c)) return c;
  throw ConfigError("unknown corruption '" + std::string(s) + "'");
}

struct CorruptionSpec {
  Corruption corruption = Corruption::gaussian_noise;
  int severity = 1;  // 1..5
};

// Per-corruption parameter for severities 1..5. Meaning per family:
//   gaussian_noise: noise sigma; shot_noise: photon count lambda (smaller is
//   noisier); impulse_noise: salt-and-pepper fraction; box_blur: kernel
//   radius; brightness: additive shift; contrast: scale toward the mean
//   (smaller is stronger); pixelate: block size.
class SeverityTable {
 public:
  static constexpr int kVersion = 1;

  static SeverityTable builtin() {
    SeverityTable t;
    t.version_ = kVersion;
    t.rows_[Corruption::gaussian_noise] = {0.04, 0.06, 0.08, 0.09, 0.10};
    t.rows_[Corruption::shot_noise] = {60, 25, 12, 5, 3};
    t.rows_[Corruption::impulse_noise] = {0.01, 0.02, 0.03, 0.05, 0.07};
    t.rows_[Corruption::box_blur] = {1, 2, 3, 4, 5};
    t.rows_[Corruption::brightness] = {0.1, 0.2, 0.3, 0.4, 0.5};
    t.rows_[Corruption::contrast] = {0.75, 0.5, 0.4, 0.3, 0.15};
    t.rows_[Corruption::pixelate] = {2, 3, 4, 6, 8};
    return t;
  }

  // Format: '#' comments, "version = N", then "<corruption> = v1 v2 v3 v4 v5".
  static SeverityTable parse(const std::string& text) {
    SeverityTable t;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      if (eq == std::string::npos) throw ConfigError("severity table line " + std::to_string(lineno) + ": missing '='");
      std::string key = trim(line.substr(0, eq));
      std::istringstream values(line.substr(eq + 1));
      if (key == "version") {
        if (!(values >> t.version_)) throw ConfigError("severity table: bad version");
        continue;
      }
      const Corruption c = parse_corruption(key);
      std::array<double, 5> row{};
      for (auto& v : row)
        if (!(values >> v)) {
          throw ConfigError("severity table line " + std::to_string(lineno) + ": expected 5 values for " + key);
        }
      std::string extra;
      if (values >> extra) throw ConfigError("severity table line " + std::to_string(lineno) + ": too many values");
      t.rows_[c] = row;
    }
    if (t.version_ != kVersion) throw ConfigError("severity table: unsupported version " + std::to_string(t.version_));
    for (Corruption c : kAllCorruptions)
      if (!t.rows_.count(c)) throw ConfigError(std::string("severity table: missing row for ") + corruption_name(c));
    return t;
  }

  static SeverityTable load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open severity table " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  int version() const noexcept { return version_; }

  double param(const CorruptionSpec& spec) const {
    if (spec.severity < 1 || spec.severity > 5) {
      throw ValidationError("corruption severity " + std::to_string(spec.severity) + " outside 1..5");
    }
    return rows_.at(spec.corruption)[static_cast<std::size_t>(spec.severity - 1)];
  }

  const std::array<double, 5>& row(Corruption c) const { return rows_.at(c); }

  bool operator==(const SeverityTable&) const = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }

  int version_ = 0;
  std::map<Corruption, std::array<double, 5>> rows_;
};

template <class R>
concept NoiseSource = requires(R r, double lambda) {
  { r.normal() } -> std::convertible_to<double>;
  { r.uniform() } -> std::convertible_to<double>;
  { r.poisson(lambda) } -> std::convertible_to<std::uint64_t>;
};

template <NoiseSource R>
Image apply_corruption(const Image& img, const CorruptionSpec& spec, R& noise,
                       const SeverityTable& table = SeverityTable::builtin()) {
  const double p = table.param(spec);
  Image out = img;
  switch (spec.corruption) {
    case Corruption::gaussian_noise:
      for (auto& v : out.pixels) v = clamp01(v + p * noise.normal());
      break;
    case Corruption::shot_noise:
      for (auto& v : out.pixels) v = clamp01(static_cast<double>(noise.poisson(v * p)) / p);
      break;
    case Corruption::impulse_noise:
      for (auto& v : out.pixels) {
        if (noise.uniform() < p) v = noise.uniform() < 0.5 ? 0.0f : 1.0f;
      }
      break;
    case Corruption::box_blur: {
      const auto r = static_cast<std::ptrdiff_t>(p);
      const auto h = static_cast<std::ptrdiff_t>(img.height), w = static_cast<std::ptrdiff_t>(img.width);
      for (std::size_t c = 0; c < img.channels; ++c)
        for (std::ptrdiff_t y = 0; y < h; ++y)
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            double total = 0.0;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
              for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                const auto yy = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y + dy, 0, h - 1));
                const auto xx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x + dx, 0, w - 1));
                total += img.at(c, yy, xx);
              }
            out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                clamp01(total / static_cast<double>((2 * r + 1) * (2 * r + 1)));
          }
      break;
    }
    case Corruption::brightness:
      for (auto& v : out.pixels) v = clamp01(v + p);
      break;
    case Corruption::contrast: {
      double mean = 0.0;
      for (float v : img.pixels) mean += v;
      mean /= static_cast<double>(img.pixels.size());
      for (auto& v : out.pixels) v = clamp01((v - mean) * p + mean);
      break;
    }
    case Corruption::pixelate: {
      const auto b = static_cast<std::size_t>(p);
      for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t by = 0; by < img.height; by += b)
          for (std::size_t bx = 0; bx < img.width; bx += b) {
            const std::size_t ey = std::min(by + b, img.height), ex = std::min(bx + b, img.width);
            double total = 0.0;
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t x = bx; x < ex; ++x) total += img.at(c, y, x);
            const float mean = clamp01(total / static_cast<double>((ey - by) * (ex - bx)));
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t x = bx; x < ex; ++x) out.at(c, y, x) = mean;
          }
      break;
    }
  }
  return out;
}

inline Image apply_corruption(const Image& img, const CorruptionSpec& spec, std::uint64_t seed,
                              const SeverityTable& table = SeverityTable::builtin()) {
  Rng rng(seed);
  return apply_corruption(img, spec, rng, table);
}

}  // namespace lakit
