#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tconv/conv.hpp"
#include "tconv/random.hpp"
#include "tconv/serialize.hpp"

namespace tconv::nn {

struct Dataset {
  Tensor4<double> images;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
};

inline void check_dataset(const Dataset& d) {
  if (d.labels.size() != d.images.shape().n) throw ShapeError("label count does not match images");
  for (std::size_t l : d.labels)
    if (l >= d.classes) throw std::out_of_range("label " + std::to_string(l) + " >= class count");
}

inline Tensor4<double> gather_images(const Dataset& d, std::span<const std::size_t> idx) {
  const Shape4 s = d.images.shape();
  Tensor4<double> out(idx.size(), s.c, s.h, s.w);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = d.images.item(idx[i]);
    std::copy(src.begin(), src.end(), out.item(i).begin());
  }
  return out;
}

inline std::vector<std::size_t> gather_labels(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = d.labels[idx[i]];
  return out;
}

namespace detail {

constexpr std::size_t cifar_record = 3073;

// Appends up to `limit` raw records (pixels scaled to [0,1]).
inline void read_cifar_records(const std::filesystem::path& path, std::size_t limit,
                               std::vector<double>& pixels, std::vector<std::size_t>& labels) {
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  if (bytes % cifar_record != 0) {
    throw FormatError(path.string() + ": length " + std::to_string(bytes) +
                      " is not a whole number of 3073-byte records (truncated file?)");
  }
  const std::size_t n = std::min<std::size_t>(bytes / cifar_record, limit);
  auto is = io::open_in(path);
  std::vector<unsigned char> buf(cifar_record);
  for (std::size_t i = 0; i < n; ++i) {
    if (!is.read(reinterpret_cast<char*>(buf.data()), cifar_record)) {
      throw FormatError(path.string() + ": truncated at record " + std::to_string(i));
    }
    if (buf[0] > 9) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + " has label byte " +
                        std::to_string(buf[0]));
    }
    labels.push_back(buf[0]);
    for (std::size_t p = 1; p < cifar_record; ++p) pixels.push_back(buf[p] / 255.0);
  }
}

// Zero mean, unit variance per channel over the whole set.
inline void standardize_channels(Tensor4<double>& images) {
  const Shape4 s = images.shape();
  if (s.n == 0) return;
  const double count = static_cast<double>(s.n * s.plane());
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < s.n; ++i)
      for (double v : images.plane(i, c)) sum += v, sq += v * v;
    const double mean = sum / count;
    const double var = std::max(sq / count - mean * mean, 0.0);
    const double inv = var > 0 ? 1 / std::sqrt(var) : 1.0;
    for (std::size_t i = 0; i < s.n; ++i)
      for (double& v : images.plane(i, c)) v = (v - mean) * inv;
  }
}

inline Dataset load_cifar_files(const std::vector<std::filesystem::path>& files,
                                std::optional<std::size_t> max_items, std::string split) {
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  const std::size_t limit = max_items.value_or(std::numeric_limits<std::size_t>::max());
  for (const auto& f : files) {
    if (labels.size() >= limit) break;
    read_cifar_records(f, limit - labels.size(), pixels, labels);
  }
  const std::size_t n = labels.size();
  Dataset d{Tensor4<double>(Shape4{n, 3, 32, 32}, std::move(pixels)), std::move(labels), 10,
            std::move(split)};
  standardize_channels(d.images);
  return d;
}

}  // namespace detail

// Standard CIFAR-10 binary records: 1 label byte then 3072 pixel bytes
// (R, G, B planes of 32x32). Pixels scale to [0,1], then every channel is
// standardized with mean/std of the loaded subset.
inline Dataset load_cifar10_binary(const std::filesystem::path& path,
                                   std::optional<std::size_t> max_items = std::nullopt) {
  return detail::load_cifar_files({path}, max_items, path.stem().string());
}

// data_batch_1..5.bin (train) or test_batch.bin (test), standardized jointly.
inline Dataset load_cifar10_dir(const std::filesystem::path& dir, bool train,
                                std::optional<std::size_t> max_items = std::nullopt) {
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  return detail::load_cifar_files(files, max_items, train ? "train" : "test");
}

// Oriented Gaussian bars on RGB canvases. The class fixes the bar
// orientation (evenly spaced over a half turn); position, length, colour,
// orientation jitter, an isotropic distractor blob and pixel noise are
// random. Sample i has label i mod classes.
inline Dataset make_synthetic_dataset(std::size_t classes, std::size_t n, std::uint64_t seed,
                                      std::size_t image = 32) {
  if (classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> noise(0, 0.35);
  Dataset d{Tensor4<double>(n, 3, image, image), std::vector<std::size_t>(n), classes, "synthetic"};
  const double size = static_cast<double>(image);
  const double spacing = std::numbers::pi / static_cast<double>(classes);
  auto centre = [&] { return size / 2 - 0.5 + (u(rng) - 0.5) * size * 0.4; };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    d.labels[i] = label;
    const double theta = spacing * (static_cast<double>(label) + 0.5 * (u(rng) - 0.5));
    const double cy = centre(), cx = centre();
    const double major = size * (0.1 + 0.06 * u(rng));
    const double minor = size * 0.045;
    const double by = centre(), bx = centre();
    const double blob = size * (0.06 + 0.04 * u(rng));
    double colour[3], blob_colour[3];
    for (double& c : colour) c = 0.4 + 0.6 * u(rng);
    for (double& c : blob_colour) c = 0.6 * u(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < image; ++y)
      for (std::size_t x = 0; x < image; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double along = dx * ct + dy * st, across = -dx * st + dy * ct;
        const double bar = std::exp(-0.5 * (along * along / (major * major) +
                                            across * across / (minor * minor)));
        const double ry = static_cast<double>(y) - by, rx = static_cast<double>(x) - bx;
        const double spot = std::exp(-0.5 * (ry * ry + rx * rx) / (blob * blob));
        for (std::size_t c = 0; c < 3; ++c)
          d.images(i, c, y, x) = colour[c] * bar + blob_colour[c] * spot + noise(rng);
      }
  }
  return d;
}

struct AugmentFlags {
  bool flip = false;
  bool crop = false;
  bool rotate = false;
  std::size_t crop_padding = 4;
  double max_rotation_deg = 15;
};

// Mirrors every plane of image i left-right.
inline void flip_image(Tensor4<double>& batch, std::size_t i) {
  const Shape4 s = batch.shape();
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < s.h; ++y) {
      auto row = batch.plane(i, c).subspan(y * s.w, s.w);
      std::reverse(row.begin(), row.end());
    }
}

// Window at (top, left) of the image zero-padded by `pad` on every side.
inline void crop_image(Tensor4<double>& batch, std::size_t i, std::size_t pad, std::size_t top,
                       std::size_t left) {
  const Shape4 s = batch.shape();
  for (std::size_t c = 0; c < s.c; ++c) {
    auto plane = batch.plane(i, c);
    const std::vector<double> src(plane.begin(), plane.end());
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const auto sy = static_cast<std::ptrdiff_t>(y + top) - static_cast<std::ptrdiff_t>(pad);
        const auto sx = static_cast<std::ptrdiff_t>(x + left) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(s.h) &&
                            sx < static_cast<std::ptrdiff_t>(s.w);
        plane[y * s.w + x] = inside ? src[static_cast<std::size_t>(sy) * s.w +
                                          static_cast<std::size_t>(sx)]
                                    : 0.0;
      }
  }
}

// Rotation by `radians` about the image centre with bilinear resampling.
inline void rotate_image(Tensor4<double>& batch, std::size_t i, double radians) {
  const Shape4 s = batch.shape();
  if (s.h != s.w) throw ShapeError("rotation augmentation needs square images");
  const double c0 = (static_cast<double>(s.h) - 1) / 2;
  const double ct = std::cos(radians), st = std::sin(radians);
  for (std::size_t c = 0; c < s.c; ++c) {
    auto plane = batch.plane(i, c);
    const std::vector<double> src(plane.begin(), plane.end());
    const GridView<double> view{src, s.h, s.w};
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        const double qy = static_cast<double>(y) - c0, qx = static_cast<double>(x) - c0;
        plane[y * s.w + x] = bilinear_sample(view, c0 - st * qx + ct * qy, c0 + ct * qx + st * qy);
      }
  }
}

// Per image: flip with p = 0.5, random crop from the zero-padded image,
// uniform rotation in +-max_rotation_deg. Draw order is fixed.
inline Tensor4<double> augment(Tensor4<double> batch, const AugmentFlags& flags, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> angle(-flags.max_rotation_deg, flags.max_rotation_deg);
  for (std::size_t i = 0; i < batch.shape().n; ++i) {
    if (flags.flip && coin(rng)) flip_image(batch, i);
    if (flags.crop) {
      const std::size_t top = uniform_index(rng, 0, 2 * flags.crop_padding);
      const std::size_t left = uniform_index(rng, 0, 2 * flags.crop_padding);
      crop_image(batch, i, flags.crop_padding, top, left);
    }
    if (flags.rotate) rotate_image(batch, i, angle(rng) * std::numbers::pi / 180);
  }
  return batch;
}

}  // namespace tconv::nn
