#pragma once

// Synthetic blended-forgery datasets: procedural source images, shape masks,
// Gaussian-feathered alpha blending, and the on-disk dataset layout
//   images/*.png  masks/*.png  manifest.jsonl

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sola/image_io.hpp"
#include "sola/supervision.hpp"
#include "sola/tensor.hpp"

namespace sola::data {

namespace fs = std::filesystem;

inline constexpr int kImageSize = 256;

enum class BlendFamily { ellipse, rectangle, polygon };
enum class DonorStrategy { other_image, jittered_self };

inline std::string to_string(BlendFamily f) {
  switch (f) {
    case BlendFamily::ellipse: return "ellipse";
    case BlendFamily::rectangle: return "rectangle";
    case BlendFamily::polygon: return "polygon";
  }
  return "?";
}
inline BlendFamily blend_family_from_string(const std::string& s) {
  if (s == "ellipse") return BlendFamily::ellipse;
  if (s == "rectangle") return BlendFamily::rectangle;
  if (s == "polygon") return BlendFamily::polygon;
  throw ConfigError("unknown blend family '" + s + "' (expected ellipse|rectangle|polygon)");
}
inline std::string to_string(DonorStrategy d) {
  return d == DonorStrategy::other_image ? "other-image" : "color-jittered-self";
}
inline DonorStrategy donor_strategy_from_string(const std::string& s) {
  if (s == "other-image") return DonorStrategy::other_image;
  if (s == "color-jittered-self" || s == "jittered-self") return DonorStrategy::jittered_self;
  throw ConfigError("unknown donor strategy '" + s + "' (expected other-image|color-jittered-self)");
}

struct BlendRecipe {
  BlendFamily family = BlendFamily::ellipse;
  DonorStrategy donor = DonorStrategy::other_image;
  double blur_sigma = 3.0;
  double area_lo = 0.08, area_hi = 0.35;

  void validate() const {
    if (!(area_lo > 0 && area_lo < area_hi && area_hi < 1))
      throw ParameterError("blend recipe: area range must satisfy 0 < lo < hi < 1");
    if (blur_sigma < 0) throw ParameterError("blend recipe: blur sigma must be >= 0");
  }
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Float RGB planes in [0, 1], used while composing images.
struct RgbPlanes {
  int height = 0, width = 0;
  std::vector<float> values;  // 3 x h x w

  RgbPlanes(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(3) * h * w, 0.f) {}
  float& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

inline ImageU8 to_u8(const RgbPlanes& p) {
  ImageU8 out(p.height, p.width, 3);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(p.at(c, y, x), 0.f, 1.f) * 255.f));
  return out;
}

inline RgbPlanes to_planes(const ImageU8& img) {
  RgbPlanes p(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) p.at(c, y, x) = img.at(y, x, c) / 255.f;
  return p;
}

/// A natural-looking procedural image: smooth colour field made of a linear
/// gradient and Gaussian blobs, a faint oriented texture, and per-image
/// sensor noise whose strength differs from image to image.
inline ImageU8 synthetic_source(std::uint64_t pool_seed, std::uint64_t index, int size = kImageSize) {
  std::mt19937_64 rng(mix_seed(pool_seed, index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  RgbPlanes p(size, size);
  const double s = size;
  for (int c = 0; c < 3; ++c) {
    const double base = uni(0.25, 0.75), gx = uni(-0.3, 0.3) / s, gy = uni(-0.3, 0.3) / s;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) p.at(c, y, x) = static_cast<float>(base + gx * (x - s / 2) + gy * (y - s / 2));
  }
  const int blobs = 4 + static_cast<int>(u(rng) * 7);
  std::vector<double> ex(size), ey(size);
  for (int b = 0; b < blobs; ++b) {
    const double cx = uni(0, s), cy = uni(0, s), sx = uni(12, 70), sy = uni(12, 70);
    double amp[3];
    for (double& a : amp) a = uni(-0.35, 0.35);
    for (int i = 0; i < size; ++i) {
      ex[i] = std::exp(-0.5 * (i - cx) * (i - cx) / (sx * sx));
      ey[i] = std::exp(-0.5 * (i - cy) * (i - cy) / (sy * sy));
    }
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) p.at(c, y, x) += static_cast<float>(amp[c] * ey[y] * ex[x]);
  }
  const double tex_amp = uni(0.0, 0.04), freq = uni(0.05, 0.4), angle = uni(0, std::numbers::pi), phase = uni(0, 6.3);
  const double fx = freq * std::cos(angle), fy = freq * std::sin(angle);
  // Log-uniform sensor noise level, so base and donor usually differ clearly.
  const double noise_sigma = std::exp(uni(std::log(0.5), std::log(20.0))) / 255.0;
  std::normal_distribution<double> noise(0.0, noise_sigma);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        p.at(c, y, x) += static_cast<float>(tex_amp * std::sin(fx * x + fy * y + phase) + noise(rng));
  return to_u8(p);
}

/// Images to draw bases and donors from. `id` names a source for provenance.
struct SourcePool {
  std::string name;
  std::size_t size = 0;
  std::function<ImageU8(std::size_t)> get;
  std::function<std::string(std::size_t)> id;
};

inline SourcePool procedural_pool(std::uint64_t seed, int image_size = kImageSize) {
  SourcePool p;
  p.name = "procedural:" + std::to_string(seed);
  p.size = std::size_t(1) << 40;
  p.get = [seed, image_size](std::size_t i) { return synthetic_source(seed, i, image_size); };
  p.id = [seed](std::size_t i) { return "procedural:" + std::to_string(seed) + ":" + std::to_string(i); };
  return p;
}

/// Bilinear resize of an interleaved image.
inline ImageU8 resize_bilinear(const ImageU8& in, int h, int w) {
  if (in.height == h && in.width == w) return in;
  ImageU8 out(h, w, in.channels);
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * in.height / h - 0.5, 0.0, in.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, in.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * in.width / w - 0.5, 0.0, in.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, in.width - 1);
      const double ax = fx - x0;
      for (int c = 0; c < in.channels; ++c) {
        const double v = (1 - ay) * ((1 - ax) * in.at(y0, x0, c) + ax * in.at(y0, x1, c)) +
                          ay * ((1 - ax) * in.at(y1, x0, c) + ax * in.at(y1, x1, c));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

/// PNG files of a directory (sorted by name); the [begin, end) fraction of
/// the sorted list forms the pool so train/test pools can be split disjointly.
inline SourcePool folder_pool(const std::string& dir, double begin = 0.0, double end = 1.0,
                              int image_size = kImageSize) {
  std::vector<std::string> files;
  if (!fs::is_directory(dir)) throw LoadError("source directory '" + dir + "' does not exist");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  const auto lo = static_cast<std::size_t>(std::floor(begin * files.size()));
  const auto hi = static_cast<std::size_t>(std::floor(end * files.size()));
  std::vector<std::string> picked(files.begin() + lo, files.begin() + std::max(lo, hi));
  SourcePool p;
  p.name = "folder:" + dir;
  p.size = picked.size();
  p.get = [picked, image_size](std::size_t i) {
    return resize_bilinear(read_png(picked.at(i), 3), image_size, image_size);
  };
  p.id = [picked](std::size_t i) { return fs::path(picked.at(i)).filename().string(); };
  return p;
}

/// Separable Gaussian blur with edge clamping; sigma 0 returns the input.
inline std::vector<float> gaussian_blur(const std::vector<float>& plane, int h, int w, double sigma) {
  if (sigma <= 0) return plane;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  std::vector<float> tmp(plane.size()), out(plane.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * plane[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = static_cast<float>(s);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      out[y * w + x] = static_cast<float>(s);
    }
  return out;
}

/// Hard 0/1 shape of the given family covering roughly `area_fraction` of a
/// size x size frame.
template <typename Rng>
std::vector<float> shape_mask(BlendFamily family, double area_fraction, Rng& rng, int size = kImageSize) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double s = size, area = area_fraction * s * s;
  std::vector<float> m(static_cast<std::size_t>(size) * size, 0.f);
  const double aspect = uni(0.6, 1.6);
  switch (family) {
    case BlendFamily::ellipse: {
      const double a = std::sqrt(area / (std::numbers::pi * aspect)), b = aspect * a;
      const double ext = std::max(a, b);
      const double cx = ext < s / 2 ? uni(ext, s - ext) : s / 2, cy = ext < s / 2 ? uni(ext, s - ext) : s / 2;
      const double th = uni(0, std::numbers::pi), ct = std::cos(th), st = std::sin(th);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double px = ct * dx + st * dy, py = -st * dx + ct * dy;
          if (px * px / (a * a) + py * py / (b * b) <= 1.0) m[y * size + x] = 1.f;
        }
      break;
    }
    case BlendFamily::rectangle: {
      const double rw = std::min(s, std::sqrt(area / aspect)), rh = std::min(s, area / rw);
      const double x0 = uni(0, s - rw), y0 = uni(0, s - rh);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if (x + 0.5 >= x0 && x + 0.5 < x0 + rw && y + 0.5 >= y0 && y + 0.5 < y0 + rh) m[y * size + x] = 1.f;
      break;
    }
    case BlendFamily::polygon: {
      const int k = 5 + static_cast<int>(u(rng) * 5);
      std::vector<double> ang(k), rad(k);
      for (int i = 0; i < k; ++i) {
        ang[i] = (i + uni(0.1, 0.9)) * 2 * std::numbers::pi / k;
        rad[i] = uni(0.6, 1.0);
      }
      double unit_area = 0;
      for (int i = 0; i < k; ++i) {
        const int j = (i + 1) % k;
        unit_area += 0.5 * rad[i] * rad[j] * std::sin(ang[j] - ang[i] + (j == 0 ? 2 * std::numbers::pi : 0));
      }
      const double scale = std::sqrt(area / unit_area);
      const double cx = scale < s / 2 ? uni(scale, s - scale) : s / 2, cy = scale < s / 2 ? uni(scale, s - scale) : s / 2;
      std::vector<double> vx(k), vy(k);
      for (int i = 0; i < k; ++i) {
        vx[i] = cx + scale * rad[i] * std::cos(ang[i]);
        vy[i] = cy + scale * rad[i] * std::sin(ang[i]);
      }
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          bool inside = false;
          for (int i = 0, j = k - 1; i < k; j = i++)
            if ((vy[i] > py) != (vy[j] > py) && px < (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i])
              inside = !inside;
          if (inside) m[y * size + x] = 1.f;
        }
      break;
    }
  }
  return m;
}

struct Blend {
  ImageU8 image;
  ForgeryMask mask;
};

/// base * (1 - alpha) + donor * alpha with alpha = blur(shape, sigma); the
/// mask marks alpha > 0.5.
inline Blend blend(const ImageU8& base, const ImageU8& donor, const std::vector<float>& shape, double sigma) {
  if (base.height != donor.height || base.width != donor.width || base.channels != 3 || donor.channels != 3)
    throw ShapeError("blend: base and donor must be RGB images of equal size");
  const int h = base.height, w = base.width;
  const std::vector<float> alpha = gaussian_blur(shape, h, w, sigma);
  Blend out{ImageU8(h, w, 3), ForgeryMask(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float a = alpha[y * w + x];
      out.mask.at(y, x) = a > 0.5f;
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) =
            static_cast<std::uint8_t>(std::lround((1.f - a) * base.at(y, x, c) + a * donor.at(y, x, c)));
    }
  return out;
}

/// Per-channel gain/offset jitter of an image.
template <typename Rng>
ImageU8 color_jitter(const ImageU8& img, Rng& rng) {
  std::uniform_real_distribution<double> gain(0.75, 1.25), offset(-25.0, 25.0);
  double g[3], o[3];
  for (int c = 0; c < 3; ++c) {
    g[c] = gain(rng);
    o[c] = offset(rng);
  }
  ImageU8 out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(g[c] * img.at(y, x, c) + o[c]), 0L, 255L));
  return out;
}

/// Draws shapes until the thresholded mask area lands inside the recipe's
/// range, then blends.
template <typename Rng>
Blend make_fake(const ImageU8& base, const ImageU8& donor, const BlendRecipe& recipe, Rng& rng) {
  recipe.validate();
  std::uniform_real_distribution<double> area(recipe.area_lo, recipe.area_hi);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto shape = shape_mask(recipe.family, area(rng), rng, base.height);
    Blend b = blend(base, donor, shape, recipe.blur_sigma);
    const double f = b.mask.area_fraction();
    if (f >= recipe.area_lo && f <= recipe.area_hi) return b;
  }
  throw ParameterError("make_fake: could not realise a mask inside the area range");
}

struct Sample {
  ImageU8 image;
  int label = 0;  // 0 real, 1 fake
  std::optional<ForgeryMask> mask;
  std::string family;
  std::string file;
};

/// Writes n_real untouched sources and n_fake blends plus their masks and a
/// manifest. Output is a deterministic function of (pool, recipe, counts, seed).
inline void generate_dataset(const SourcePool& pool, const BlendRecipe& recipe, int n_real, int n_fake,
                             std::uint64_t seed, const std::string& dir) {
  recipe.validate();
  if (n_real < 0 || n_fake < 0) throw ParameterError("generate_dataset: negative sample count");
  if (pool.size < 2) throw ParameterError("generate_dataset: need at least 2 source images, pool has " +
                                          std::to_string(pool.size));
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  const int total = n_real + n_fake;
  std::vector<int> order(total);
  for (int i = 0; i < total; ++i) order[i] = i;  // < n_real: real, else fake
  std::mt19937_64 shuffle_rng(mix_seed(seed, 0xD15EA5E));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw LoadError("cannot create manifest in '" + dir + "'");
  for (int k = 0; k < total; ++k) {
    const int id = order[k];
    const std::uint64_t sample_seed = mix_seed(seed, static_cast<std::uint64_t>(id));
    std::mt19937_64 rng(sample_seed);
    char name[32];
    std::snprintf(name, sizeof name, "%06d.png", k);
    nlohmann::ordered_json rec;
    rec["file"] = std::string("images/") + name;
    if (id < n_real) {
      const std::size_t src = static_cast<std::size_t>(id) % pool.size;
      write_png((fs::path(dir) / "images" / name).string(), pool.get(src));
      rec["label"] = 0;
      rec["family"] = "real";
      rec["mask"] = nullptr;
      rec["seed"] = sample_seed;
      rec["base"] = pool.id(src);
    } else {
      const std::size_t j = static_cast<std::size_t>(id - n_real);
      const std::size_t b = (static_cast<std::size_t>(n_real) + 2 * j) % pool.size;
      std::size_t d = (b + 1) % pool.size;
      const ImageU8 base = pool.get(b);
      const ImageU8 donor = recipe.donor == DonorStrategy::other_image ? pool.get(d) : color_jitter(base, rng);
      const Blend fake = make_fake(base, donor, recipe, rng);
      write_png((fs::path(dir) / "images" / name).string(), fake.image);
      ImageU8 m(fake.mask.height, fake.mask.width, 1);
      for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = fake.mask.pixels[i] ? 255 : 0;
      write_png((fs::path(dir) / "masks" / name).string(), m);
      rec["label"] = 1;
      rec["family"] = to_string(recipe.family);
      rec["mask"] = std::string("masks/") + name;
      rec["seed"] = sample_seed;
      rec["base"] = pool.id(b);
      rec["donor"] = recipe.donor == DonorStrategy::other_image ? pool.id(d) : pool.id(b) + "#jitter";
    }
    manifest << rec.dump() << "\n";
  }
}

/// Reads a dataset directory. Samples come in manifest order, or shuffled
/// deterministically when a seed is given.
inline std::vector<Sample> load_dataset(const std::string& dir, std::optional<std::uint64_t> shuffle_seed = {}) {
  const fs::path root(dir);
  std::ifstream in(root / "manifest.jsonl");
  if (!in) throw LoadError("dataset '" + dir + "': missing manifest.jsonl");
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "manifest.jsonl:" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw LoadError("dataset '" + dir + "': corrupt record at " + where + ": " + e.what());
    }
    Sample s;
    try {
      s.file = rec.at("file").get<std::string>();
      s.label = rec.at("label").get<int>();
      s.family = rec.value("family", "");
    } catch (const std::exception& e) {
      throw LoadError("dataset '" + dir + "': bad record at " + where + ": " + e.what());
    }
    if (s.label != 0 && s.label != 1) throw LoadError("dataset '" + dir + "': label must be 0/1 at " + where);
    const fs::path img = root / s.file;
    if (!fs::exists(img)) throw LoadError("dataset '" + dir + "': missing image file '" + s.file + "' (" + where + ")");
    s.image = read_png(img.string(), 3);
    if (rec.contains("mask") && !rec["mask"].is_null()) {
      const std::string mf = rec["mask"].get<std::string>();
      const fs::path mp = root / mf;
      if (!fs::exists(mp)) throw LoadError("dataset '" + dir + "': missing mask file '" + mf + "' (" + where + ")");
      const ImageU8 m = read_png(mp.string(), 1);
      if (m.height != s.image.height || m.width != s.image.width)
        throw LoadError("dataset '" + dir + "': mask '" + mf + "' size differs from its image");
      ForgeryMask fm(m.height, m.width);
      for (std::size_t i = 0; i < m.pixels.size(); ++i) {
        if (m.pixels[i] != 0 && m.pixels[i] != 255)
          throw ValidationError("dataset '" + dir + "': mask '" + mf + "' is not binary (value " +
                                std::to_string(m.pixels[i]) + ")");
        fm.pixels[i] = m.pixels[i] ? 1 : 0;
      }
      if (s.label == 0 && fm.area_fraction() > 0)
        throw ValidationError("dataset '" + dir + "': real sample '" + s.file + "' has a non-empty mask");
      s.mask = std::move(fm);
    }
    out.push_back(std::move(s));
  }
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(out.begin(), out.end(), rng);
  }
  return out;
}

/// Stacks images [first, first + count) of `order` into an N x 3 x H x W batch in [0, 1].
template <typename T>
Tensor<T> image_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  const ImageU8& ref = samples.at(indices.at(0)).image;
  Tensor<T> out(static_cast<int>(indices.size()), 3, ref.height, ref.width);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const ImageU8& img = samples.at(indices[b]).image;
    if (img.height != ref.height || img.width != ref.width)
      throw ShapeError("image_batch: images differ in size (" + samples[indices[b]].file + ")");
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) out(static_cast<int>(b), c, y, x) = static_cast<T>(img.at(y, x, c) / 255.0);
  }
  return out;
}

template <typename T>
Tensor<T> image_tensor(const ImageU8& img) {
  Tensor<T> out(1, 3, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out(0, c, y, x) = static_cast<T>(img.at(y, x, c) / 255.0);
  return out;
}

}  // namespace sola::data
