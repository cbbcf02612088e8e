#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tconv/gemm.hpp"
#include "tconv/parallel.hpp"
#include "tconv/tensor.hpp"

namespace tconv {

struct ConvGeometry {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  static ConvGeometry square(std::size_t k, std::size_t stride = 1, std::size_t padding = 0,
                             std::size_t groups = 1) {
    return ConvGeometry{k, k, stride, padding, groups};
  }

  std::size_t offsets() const { return kernel_h * kernel_w; }

  std::size_t out_h(std::size_t in) const { return out_extent(in, kernel_h, "height"); }
  std::size_t out_w(std::size_t in) const { return out_extent(in, kernel_w, "width"); }

  void validate() const {
    if (kernel_h == 0 || kernel_w == 0) throw GeometryError("kernel extent must be positive");
    if (stride == 0) throw GeometryError("stride must be >= 1");
    if (groups == 0) throw GeometryError("groups must be >= 1");
  }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;

 private:
  std::size_t out_extent(std::size_t in, std::size_t k, const char* axis) const {
    validate();
    if (in + 2 * padding < k) {
      throw GeometryError(std::string("empty output along ") + axis + ": input " +
                          std::to_string(in) + " + 2*" + std::to_string(padding) +
                          " padding is smaller than kernel " + std::to_string(k));
    }
    return (in + 2 * padding - k) / stride + 1;
  }
};

// Multiply-accumulates executed by an instrumented kernel.
struct MacCounter {
  std::uint64_t macs = 0;
};

namespace detail {

template <typename T>
void check_conv_operands(const Tensor4<T>& x, const Tensor4<T>& weight, const ConvGeometry& g) {
  g.validate();
  const Shape4& ws = weight.shape();
  if (ws.h != g.kernel_h) {
    throw ShapeError("kernel height axis: weight has " + std::to_string(ws.h) +
                     ", geometry has " + std::to_string(g.kernel_h));
  }
  if (ws.w != g.kernel_w) {
    throw ShapeError("kernel width axis: weight has " + std::to_string(ws.w) +
                     ", geometry has " + std::to_string(g.kernel_w));
  }
  if (ws.c * g.groups != x.shape().c) {
    throw ShapeError("channel axis: weight in-channels " + std::to_string(ws.c) + " x groups " +
                     std::to_string(g.groups) + " != input channels " +
                     std::to_string(x.shape().c));
  }
  if (ws.n % g.groups != 0) {
    throw ShapeError("output channel axis: " + std::to_string(ws.n) +
                     " filters not divisible by groups " + std::to_string(g.groups));
  }
}

}  // namespace detail

// Direct nested-loop convolution with zero padding. Per output element the
// products are summed kernel-row outer, kernel-col middle, channel inner.
template <typename T>
Tensor4<T> conv2d_reference(const Tensor4<T>& x, const Tensor4<T>& weight,
                            const ConvGeometry& geom) {
  detail::check_conv_operands(x, weight, geom);
  const Shape4 xs = x.shape();
  const std::size_t out_ch = weight.shape().n;
  const std::size_t ho = geom.out_h(xs.h);
  const std::size_t wo = geom.out_w(xs.w);
  const std::size_t cg = weight.shape().c;
  const std::size_t og = out_ch / geom.groups;
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  const auto s = static_cast<std::ptrdiff_t>(geom.stride);

  Tensor4<T> y(xs.n, out_ch, ho, wo);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < out_ch; ++o) {
      const std::size_t c0 = (o / og) * cg;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T acc = T{0};
          for (std::size_t kh = 0; kh < geom.kernel_h; ++kh) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s +
                                      static_cast<std::ptrdiff_t>(kh) - pad;
            for (std::size_t kw = 0; kw < geom.kernel_w; ++kw) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s +
                                        static_cast<std::ptrdiff_t>(kw) - pad;
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(xs.h) &&
                                  ix < static_cast<std::ptrdiff_t>(xs.w);
              for (std::size_t c = 0; c < cg; ++c) {
                const T xv = inside ? x(n, c0 + c, static_cast<std::size_t>(iy),
                                        static_cast<std::size_t>(ix))
                                    : T{0};
                acc += xv * weight(o, c, kh, kw);
              }
            }
          }
          y(n, o, oy, ox) = acc;
        }
    }
  return y;
}

// Expanded channel index of the gathered (im2row) view.
inline std::size_t gathered_channel(std::size_t kh, std::size_t kw, std::size_t c,
                                    std::size_t kernel_w, std::size_t channels) {
  return (kh * kernel_w + kw) * channels + c;
}

// Materializes x at every kernel offset: output channel (kh, kw, c) at (y, x)
// holds x[c, y*s + kh - p, x*s + kw - p], zero outside the input.
template <typename T>
Tensor4<T> gather_offsets(const Tensor4<T>& x, const ConvGeometry& geom) {
  const Shape4 xs = x.shape();
  const std::size_t ho = geom.out_h(xs.h);
  const std::size_t wo = geom.out_w(xs.w);
  Tensor4<T> out(xs.n, xs.c * geom.offsets(), ho, wo);
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  const auto s = static_cast<std::ptrdiff_t>(geom.stride);
  parallel_for(xs.n, [&](std::size_t n) {
    for (std::size_t kh = 0; kh < geom.kernel_h; ++kh)
      for (std::size_t kw = 0; kw < geom.kernel_w; ++kw)
        for (std::size_t c = 0; c < xs.c; ++c) {
          auto dst = out.plane(n, gathered_channel(kh, kw, c, geom.kernel_w, xs.c));
          auto src = x.plane(n, c);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s +
                                      static_cast<std::ptrdiff_t>(kh) - pad;
            T* drow = dst.data() + oy * wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xs.h)) {
              std::fill(drow, drow + wo, T{0});
              continue;
            }
            const T* srow = src.data() + static_cast<std::size_t>(iy) * xs.w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s +
                                        static_cast<std::ptrdiff_t>(kw) - pad;
              drow[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(xs.w))
                             ? srow[static_cast<std::size_t>(ix)]
                             : T{0};
            }
          }
        }
  });
  return out;
}

// Pointwise (grouped) contraction of a gathered tensor with conv weights laid
// out (out_ch, in_ch/groups, k_h, k_w). Summation order matches
// conv2d_reference exactly.
template <typename T>
Tensor4<T> contract_gathered(const Tensor4<T>& gathered, const Tensor4<T>& weight,
                             const ConvGeometry& geom, MacCounter* counter = nullptr) {
  geom.validate();
  const Shape4 gs = gathered.shape();
  const Shape4 ws = weight.shape();
  const std::size_t offsets = geom.offsets();
  if (ws.h != geom.kernel_h || ws.w != geom.kernel_w) {
    throw ShapeError("kernel axis: weight kernel does not match geometry");
  }
  if (gs.c % offsets != 0) {
    throw ShapeError("channel axis: gathered channels not a multiple of kernel offsets");
  }
  const std::size_t channels = gs.c / offsets;
  if (ws.c * geom.groups != channels) {
    throw ShapeError("channel axis: weight in-channels x groups != gathered channels");
  }
  if (ws.n % geom.groups != 0) {
    throw ShapeError("output channel axis: filters not divisible by groups");
  }
  const std::size_t cg = ws.c;
  const std::size_t og = ws.n / geom.groups;
  const std::size_t positions = gs.plane();

  Tensor4<T> y(gs.n, ws.n, gs.h, gs.w);
  parallel_for(gs.n, [&](std::size_t n) {
    for (std::size_t o = 0; o < ws.n; ++o) {
      const std::size_t c0 = (o / og) * cg;
      T* __restrict yrow = y.plane(n, o).data();
      for (std::size_t kh = 0; kh < geom.kernel_h; ++kh)
        for (std::size_t kw = 0; kw < geom.kernel_w; ++kw)
          for (std::size_t c = 0; c < cg; ++c) {
            const T wv = weight(o, c, kh, kw);
            const T* __restrict grow =
                gathered.plane(n, gathered_channel(kh, kw, c0 + c, geom.kernel_w, channels))
                    .data();
            for (std::size_t p = 0; p < positions; ++p) yrow[p] += wv * grow[p];
          }
    }
  });
  if (counter) counter->macs += gs.n * ws.n * offsets * cg * positions;
  return y;
}

// Weights reordered to rows (out_ch) x cols (kh, kw, c), the gathered order.
template <typename T>
std::vector<T> weight_matrix(const Tensor4<T>& weight) {
  const Shape4 ws = weight.shape();
  std::vector<T> m(ws.count());
  const std::size_t cols = ws.c * ws.h * ws.w;
  for (std::size_t o = 0; o < ws.n; ++o)
    for (std::size_t kh = 0; kh < ws.h; ++kh)
      for (std::size_t kw = 0; kw < ws.w; ++kw)
        for (std::size_t c = 0; c < ws.c; ++c)
          m[o * cols + gathered_channel(kh, kw, c, ws.w, ws.c)] = weight(o, c, kh, kw);
  return m;
}

// Dense (groups == 1) convolution through gather + GEMM. Bit-identical to
// conv2d_reference.
template <typename T>
Tensor4<T> conv2d_gathered(const Tensor4<T>& gathered, const Tensor4<T>& weight,
                           const ConvGeometry& geom, MacCounter* counter = nullptr) {
  if (geom.groups != 1) return contract_gathered(gathered, weight, geom, counter);
  const Shape4 gs = gathered.shape();
  const Shape4 ws = weight.shape();
  const std::size_t k = ws.c * ws.h * ws.w;
  if (ws.h != geom.kernel_h || ws.w != geom.kernel_w || gs.c != k) {
    throw ShapeError("channel axis: gathered channels do not match weight (c, k_h, k_w)");
  }
  const std::vector<T> wm = weight_matrix(weight);
  const std::size_t positions = gs.plane();
  Tensor4<T> y(gs.n, ws.n, gs.h, gs.w);
  parallel_for(gs.n, [&](std::size_t n) {
    gemm_nn(ws.n, positions, k, wm.data(), k, gathered.item(n).data(), positions,
            y.item(n).data(), positions);
  });
  if (counter) counter->macs += gs.n * ws.n * k * positions;
  return y;
}

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, const ConvGeometry& geom,
                  MacCounter* counter = nullptr) {
  detail::check_conv_operands(x, weight, geom);
  return conv2d_gathered(gather_offsets(x, geom), weight, geom, counter);
}

// Scatter-adds a gathered-layout gradient back onto the input grid.
template <typename T>
Tensor4<T> scatter_offsets(const Tensor4<T>& grad_gathered, const Shape4& input_shape,
                           const ConvGeometry& geom) {
  Tensor4<T> dx(input_shape);
  const std::size_t ho = grad_gathered.shape().h;
  const std::size_t wo = grad_gathered.shape().w;
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  const auto s = static_cast<std::ptrdiff_t>(geom.stride);
  for (std::size_t n = 0; n < input_shape.n; ++n)
    for (std::size_t kh = 0; kh < geom.kernel_h; ++kh)
      for (std::size_t kw = 0; kw < geom.kernel_w; ++kw)
        for (std::size_t c = 0; c < input_shape.c; ++c) {
          auto src = grad_gathered.plane(n, gathered_channel(kh, kw, c, geom.kernel_w,
                                                             input_shape.c));
          auto dst = dx.plane(n, c);
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s +
                                      static_cast<std::ptrdiff_t>(kh) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(input_shape.h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s +
                                        static_cast<std::ptrdiff_t>(kw) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(input_shape.w)) continue;
              dst[static_cast<std::size_t>(iy) * input_shape.w + static_cast<std::size_t>(ix)] +=
                  src[oy * wo + ox];
            }
          }
        }
  return dx;
}

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  Tensor4<T> weight;
};

// Gradients of a groups == 1 convolution given the gathered input it saw.
// Batch contributions to the weight gradient are reduced sequentially.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& gathered, const Shape4& input_shape,
                             const Tensor4<T>& weight, const Tensor4<T>& grad_out,
                             const ConvGeometry& geom, bool need_input_grad = true) {
  if (geom.groups != 1) throw GeometryError("conv2d_backward supports groups == 1 only");
  const Shape4 ws = weight.shape();
  const Shape4 gs = gathered.shape();
  const std::size_t k = ws.c * ws.h * ws.w;
  const std::size_t positions = gs.plane();
  if (grad_out.shape() != Shape4{gs.n, ws.n, gs.h, gs.w}) {
    throw ShapeError("upstream gradient shape " + to_string(grad_out.shape()) +
                     " does not match convolution output");
  }

  std::vector<T> dwm(ws.n * k, T{0});
  std::vector<T> gt(positions * k);
  for (std::size_t n = 0; n < gs.n; ++n) {
    transpose(k, positions, gathered.item(n).data(), gt.data());
    gemm_nn(ws.n, k, positions, grad_out.item(n).data(), positions, gt.data(), k, dwm.data(), k);
  }
  Tensor4<T> dw(ws);
  for (std::size_t o = 0; o < ws.n; ++o)
    for (std::size_t kh = 0; kh < ws.h; ++kh)
      for (std::size_t kw = 0; kw < ws.w; ++kw)
        for (std::size_t c = 0; c < ws.c; ++c)
          dw(o, c, kh, kw) = dwm[o * k + gathered_channel(kh, kw, c, ws.w, ws.c)];

  if (!need_input_grad) return {Tensor4<T>{}, std::move(dw)};

  const std::vector<T> wm = weight_matrix(weight);
  Tensor4<T> dg(gs);
  parallel_for(gs.n, [&](std::size_t n) {
    gemm_tn(k, positions, ws.n, wm.data(), k, grad_out.item(n).data(), positions,
            dg.item(n).data(), positions);
  });
  return {scatter_offsets(dg, input_shape, geom), std::move(dw)};
}

// Reference grids for bilinear sampling: a read-only (h, w) row-major view.
template <typename T>
struct GridView {
  std::span<const T> values;
  std::size_t h = 0;
  std::size_t w = 0;

  T at(std::ptrdiff_t i, std::ptrdiff_t j) const {
    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(h) ||
        j >= static_cast<std::ptrdiff_t>(w))
      return T{0};
    return values[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)];
  }
};

template <typename T>
struct BilinearTaps {
  std::ptrdiff_t i = 0;
  std::ptrdiff_t j = 0;
  T weight[4] = {};  // (i, j), (i, j+1), (i+1, j), (i+1, j+1)
  T dweight_dy[4] = {};
  T dweight_dx[4] = {};
  bool active = false;
};

// Tap positions, weights, and weight derivatives w.r.t. the coordinates.
template <typename T>
BilinearTaps<T> bilinear_taps(std::size_t h, std::size_t w, T y, T x) {
  BilinearTaps<T> t;
  const T fy = std::floor(y);
  const T fx = std::floor(x);
  if (fy < T{-2} || fx < T{-2} || fy > static_cast<T>(h) || fx > static_cast<T>(w)) return t;
  t.active = true;
  t.i = static_cast<std::ptrdiff_t>(fy);
  t.j = static_cast<std::ptrdiff_t>(fx);
  const T dy = y - fy;
  const T dx = x - fx;
  t.weight[0] = (T{1} - dy) * (T{1} - dx);
  t.weight[1] = (T{1} - dy) * dx;
  t.weight[2] = dy * (T{1} - dx);
  t.weight[3] = dy * dx;
  t.dweight_dy[0] = -(T{1} - dx);
  t.dweight_dy[1] = -dx;
  t.dweight_dy[2] = T{1} - dx;
  t.dweight_dy[3] = dx;
  t.dweight_dx[0] = -(T{1} - dy);
  t.dweight_dx[1] = T{1} - dy;
  t.dweight_dx[2] = -dy;
  t.dweight_dx[3] = dy;
  return t;
}

// Four-neighbour bilinear interpolation; neighbours outside the grid are zero.
template <typename T>
T bilinear_sample(const GridView<T>& map, T y, T x) {
  const BilinearTaps<T> t = bilinear_taps(map.h, map.w, y, x);
  if (!t.active) return T{0};
  return t.weight[0] * map.at(t.i, t.j) + t.weight[1] * map.at(t.i, t.j + 1) +
         t.weight[2] * map.at(t.i + 1, t.j) + t.weight[3] * map.at(t.i + 1, t.j + 1);
}

}  // namespace tconv
