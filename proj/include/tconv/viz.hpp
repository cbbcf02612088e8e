#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "tconv/serialize.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

// Grayscale image, row-major, one byte per pixel.
struct GrayImage {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
  bool operator==(const GrayImage&) const = default;
};

struct ValueRange {
  double lo = 0, hi = 0;
  bool empty = true;
  void include(double v) {
    if (v == 0) return;
    lo = empty ? v : std::min(lo, v);
    hi = empty ? v : std::max(hi, v);
    empty = false;
  }
};

inline constexpr std::uint8_t kSeparator = 255;

// Exact zeros are black; every other value maps into [1, 255] over range.
inline std::uint8_t gray_level(double v, const ValueRange& range) {
  if (v == 0) return 0;
  if (range.empty || range.hi <= range.lo) return 255;
  const double t = std::clamp((v - range.lo) / (range.hi - range.lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(1 + std::lround(t * 254));
}

inline ValueRange nonzero_range(const std::vector<const Tensor4<double>*>& filters, std::size_t channel) {
  ValueRange r;
  for (const auto* w : filters)
    for (std::size_t n = 0; n < w->shape().n; ++n)
      for (std::size_t i = 0; i < w->shape().h; ++i)
        for (std::size_t j = 0; j < w->shape().w; ++j) r.include((*w)(n, channel, i, j));
  return r;
}

// One K x K tile per output filter (input channel `channel`), left to right,
// separated by single white columns: K rows by N*K + N - 1 columns.
inline GrayImage render_filters(const Tensor4<double>& w, const ValueRange& range, std::size_t channel = 0) {
  const Shape4 s = w.shape();
  if (channel >= s.c) throw ShapeError("render_filters: channel out of range");
  GrayImage img{s.h, s.n * s.w + (s.n - 1), {}};
  img.pixels.assign(img.rows * img.cols, kSeparator);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j)
        img.pixels[i * img.cols + n * (s.w + 1) + j] = gray_level(w(n, channel, i, j), range);
  return img;
}

// Pixels of output filter n's tile, row by row.
inline std::vector<std::uint8_t> tile_bytes(const GrayImage& img, std::size_t k, std::size_t n) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < img.rows; ++i)
    for (std::size_t j = 0; j < k; ++j) out.push_back(img.at(i, n * (k + 1) + j));
  return out;
}

inline void write_pgm(std::ostream& os, const GrayImage& img) {
  os << "P5\n" << img.cols << ' ' << img.rows << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write_pgm: stream failure");
}

inline GrayImage read_pgm(std::istream& is) {
  std::string magic;
  std::size_t cols = 0, rows = 0, maxval = 0;
  if (!(is >> magic >> cols >> rows >> maxval) || magic != "P5" || maxval != 255) {
    throw FormatError("read_pgm: expected a binary P5 header with maxval 255");
  }
  is.get();
  GrayImage img{rows, cols, std::vector<std::uint8_t>(rows * cols)};
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError("read_pgm: truncated pixel data");
  }
  return img;
}

// The three views of a converted layer: the dense source filters, the
// filters the template layer reconstructs, and the source with every
// non-kept filter zeroed (plain filter pruning).
struct FilterVariants {
  Tensor4<double> original, reconstructed, zeroed;
};

inline FilterVariants filter_variants(const Tensor4<double>& original, const TemplateConvLayer<double>& layer) {
  if (original.shape() != layer.reconstructed().shape()) {
    throw ShapeError("filter_variants: layer does not match source filters");
  }
  FilterVariants v{original, layer.reconstructed(), original};
  for (std::size_t n = 0; n < original.shape().n; ++n)
    if (!layer.is_identity(n))
      for (double& x : v.zeroed.item(n)) x = 0;
  return v;
}

inline const char* const kVariantNames[] = {"original", "reconstructed", "zeroed"};

struct RenderedVariants {
  GrayImage original, reconstructed, zeroed;
  ValueRange range;
};

// Renders all three variants over one shared value range.
inline RenderedVariants render_variants(const FilterVariants& v, std::size_t channel = 0) {
  const auto range = nonzero_range({&v.original, &v.reconstructed, &v.zeroed}, channel);
  return {render_filters(v.original, range, channel), render_filters(v.reconstructed, range, channel),
          render_filters(v.zeroed, range, channel), range};
}

// Raw values behind the images: variant,out,row,col,value.
inline void write_filter_values_csv(std::ostream& os, const FilterVariants& v, std::size_t layer_id,
                                    std::size_t channel = 0, bool header = true) {
  if (header) os << "layer,variant,out,row,col,value\n";
  os.precision(17);
  const Tensor4<double>* views[] = {&v.original, &v.reconstructed, &v.zeroed};
  for (std::size_t k = 0; k < 3; ++k) {
    const Shape4 s = views[k]->shape();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j)
          os << layer_id << ',' << kVariantNames[k] << ',' << n << ',' << i << ',' << j << ','
             << (*views[k])(n, channel, i, j) << '\n';
  }
}

}  // namespace tconv
