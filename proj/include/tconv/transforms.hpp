#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tconv/conv.hpp"
#include "tconv/tensor.hpp"

namespace tconv {

enum class TransformFamily : std::uint32_t { Scalar = 0, Rotation = 1, Affine = 2 };

inline std::string_view family_name(TransformFamily f) {
  switch (f) {
    case TransformFamily::Scalar: return "scalar";
    case TransformFamily::Rotation: return "rotation";
    case TransformFamily::Affine: return "affine";
  }
  return "unknown";
}

inline TransformFamily parse_family(std::string_view name) {
  if (name == "scalar") return TransformFamily::Scalar;
  if (name == "rotation") return TransformFamily::Rotation;
  if (name == "affine") return TransformFamily::Affine;
  throw std::invalid_argument("unknown transform family '" + std::string(name) + "'");
}

// Shape of one template slice: channels x kernel rows x kernel cols.
struct KernelDims {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t count() const { return c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const KernelDims&, const KernelDims&) = default;
};

// Per-position weights shared by all channels of the template.
template <typename T>
struct ScalarTransform {
  std::size_t h = 1;
  std::size_t w = 1;
  std::vector<T> weights;  // h * w, row-major
};

// In-plane rotation by theta (radians) about the kernel centre.
template <typename T>
struct RotationTransform {
  std::array<T, 1> theta{};
};

// Row-major [[a, b, tx], [c, d, ty]] acting on (col, row) offsets from the
// kernel centre.
template <typename T>
struct AffineTransform {
  std::array<T, 6> matrix{T{1}, T{0}, T{0}, T{0}, T{1}, T{0}};
};

template <typename T>
using SpatialTransform = std::variant<ScalarTransform<T>, RotationTransform<T>, AffineTransform<T>>;

template <typename T>
TransformFamily family_of(const SpatialTransform<T>& t) {
  return static_cast<TransformFamily>(t.index());
}

template <typename T>
SpatialTransform<T> identity_transform(TransformFamily family, std::size_t kh, std::size_t kw) {
  switch (family) {
    case TransformFamily::Scalar:
      return ScalarTransform<T>{kh, kw, std::vector<T>(kh * kw, T{1})};
    case TransformFamily::Rotation:
      return RotationTransform<T>{};
    case TransformFamily::Affine:
      return AffineTransform<T>{};
  }
  throw std::invalid_argument("unknown transform family");
}

inline std::size_t family_param_count(TransformFamily f, std::size_t kh, std::size_t kw) {
  switch (f) {
    case TransformFamily::Scalar: return kh * kw;
    case TransformFamily::Rotation: return 1;
    case TransformFamily::Affine: return 6;
  }
  return 0;
}

// Flat view of the learnable parameters.
template <typename T>
std::span<T> parameters(SpatialTransform<T>& t) {
  return std::visit(
      [](auto& v) -> std::span<T> {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ScalarTransform<T>>) return v.weights;
        else if constexpr (std::is_same_v<V, RotationTransform<T>>) return v.theta;
        else return v.matrix;
      },
      t);
}

template <typename T>
std::span<const T> parameters(const SpatialTransform<T>& t) {
  return parameters(const_cast<SpatialTransform<T>&>(t));
}

template <typename T>
std::size_t param_count(const SpatialTransform<T>& t) {
  return parameters(const_cast<SpatialTransform<T>&>(t)).size();
}

// Multiply-accumulates per output position spent applying the transform to a
// template feature: one product for scalar weights, four bilinear taps for
// resampling families.
inline std::size_t transform_macs_per_position(TransformFamily f) {
  return f == TransformFamily::Scalar ? 1 : 4;
}

template <typename T>
std::size_t transform_macs_per_position(const SpatialTransform<T>& t) {
  return transform_macs_per_position(family_of(t));
}

template <typename T>
AffineTransform<T> rotation_as_affine(T theta) {
  const T c = std::cos(theta);
  const T s = std::sin(theta);
  return AffineTransform<T>{{c, -s, T{0}, s, c, T{0}}};
}

namespace detail {

template <typename T>
struct InverseAffine {
  T inv[2][2] = {};  // inverse of the linear part, indices [out][in] over (x, y)
  T tx = 0;
  T ty = 0;
  bool singular = false;
};

template <typename T>
InverseAffine<T> invert(const std::array<T, 6>& m) {
  InverseAffine<T> r;
  const T det = m[0] * m[4] - m[1] * m[3];
  r.tx = m[2];
  r.ty = m[5];
  if (std::abs(det) < T(1e-12)) {
    r.singular = true;
    return r;
  }
  r.inv[0][0] = m[4] / det;
  r.inv[0][1] = -m[1] / det;
  r.inv[1][0] = -m[3] / det;
  r.inv[1][1] = m[0] / det;
  return r;
}

template <typename T>
std::array<T, 6> affine_matrix(const SpatialTransform<T>& t) {
  if (const auto* r = std::get_if<RotationTransform<T>>(&t)) return rotation_as_affine(r->theta[0]).matrix;
  return std::get<AffineTransform<T>>(t).matrix;
}

// Source coordinates (relative to the centre) of output position (i, j).
template <typename T>
std::pair<T, T> source_offset(const InverseAffine<T>& a, std::size_t i, std::size_t j, T cy,
                              T cx) {
  const T qx = static_cast<T>(j) - cx - a.tx;
  const T qy = static_cast<T>(i) - cy - a.ty;
  return {a.inv[0][0] * qx + a.inv[0][1] * qy, a.inv[1][0] * qx + a.inv[1][1] * qy};
}

template <typename T>
void check_scalar_dims(const ScalarTransform<T>& s, const KernelDims& d) {
  if (s.h != d.h || s.w != d.w || s.weights.size() != d.plane()) {
    throw ShapeError("scalar transform grid " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " does not match kernel " + std::to_string(d.h) + "x" + std::to_string(d.w));
  }
}

}  // namespace detail

// Applies t to a (c, h, w) template. Scalar weights multiply each spatial
// position across all channels; rotation and affine resample every channel
// slice at inverse-mapped coordinates about the kernel centre.
template <typename T>
std::vector<T> apply_to_kernel(std::span<const T> tmpl, const KernelDims& dims,
                               const SpatialTransform<T>& t) {
  if (tmpl.size() != dims.count()) throw ShapeError("template size does not match kernel dims");
  std::vector<T> out(dims.count(), T{0});
  if (const auto* s = std::get_if<ScalarTransform<T>>(&t)) {
    detail::check_scalar_dims(*s, dims);
    for (std::size_t c = 0; c < dims.c; ++c)
      for (std::size_t p = 0; p < dims.plane(); ++p)
        out[c * dims.plane() + p] = tmpl[c * dims.plane() + p] * s->weights[p];
    return out;
  }
  const auto inv = detail::invert(detail::affine_matrix(t));
  if (inv.singular) return out;
  const T cy = static_cast<T>(dims.h - 1) / T{2};
  const T cx = static_cast<T>(dims.w - 1) / T{2};
  for (std::size_t i = 0; i < dims.h; ++i)
    for (std::size_t j = 0; j < dims.w; ++j) {
      const auto [sx, sy] = detail::source_offset(inv, i, j, cy, cx);
      const BilinearTaps<T> taps = bilinear_taps(dims.h, dims.w, sy + cy, sx + cx);
      if (!taps.active) continue;
      for (std::size_t c = 0; c < dims.c; ++c) {
        const GridView<T> grid{tmpl.subspan(c * dims.plane(), dims.plane()), dims.h, dims.w};
        out[c * dims.plane() + i * dims.w + j] =
            taps.weight[0] * grid.at(taps.i, taps.j) + taps.weight[1] * grid.at(taps.i, taps.j + 1) +
            taps.weight[2] * grid.at(taps.i + 1, taps.j) +
            taps.weight[3] * grid.at(taps.i + 1, taps.j + 1);
      }
    }
  return out;
}

template <typename T>
struct KernelTransformGrads {
  std::vector<T> grad_template;
  std::vector<T> grad_params;
};

// Vector-Jacobian product of apply_to_kernel. Results are accumulated into
// the provided buffers (sized like the template and the parameter vector).
template <typename T>
void apply_to_kernel_backward(std::span<const T> tmpl, const KernelDims& dims,
                              const SpatialTransform<T>& t, std::span<const T> grad_out,
                              std::span<T> grad_template, std::span<T> grad_params) {
  if (grad_out.size() != dims.count() || grad_template.size() != dims.count()) {
    throw ShapeError("kernel gradient size does not match kernel dims");
  }
  if (grad_params.size() != param_count(t)) throw ShapeError("parameter gradient size mismatch");

  if (const auto* s = std::get_if<ScalarTransform<T>>(&t)) {
    detail::check_scalar_dims(*s, dims);
    for (std::size_t c = 0; c < dims.c; ++c)
      for (std::size_t p = 0; p < dims.plane(); ++p) {
        const std::size_t idx = c * dims.plane() + p;
        grad_template[idx] += s->weights[p] * grad_out[idx];
        grad_params[p] += tmpl[idx] * grad_out[idx];
      }
    return;
  }

  const auto m = detail::affine_matrix(t);
  const auto inv = detail::invert(m);
  if (inv.singular) return;
  const T cy = static_cast<T>(dims.h - 1) / T{2};
  const T cx = static_cast<T>(dims.w - 1) / T{2};
  // dL/dA[k][l] and dL/dt[k] over (x, y) components.
  T grad_a[2][2] = {};
  T grad_t[2] = {};
  for (std::size_t i = 0; i < dims.h; ++i)
    for (std::size_t j = 0; j < dims.w; ++j) {
      const auto [sx, sy] = detail::source_offset(inv, i, j, cy, cx);
      const BilinearTaps<T> taps = bilinear_taps(dims.h, dims.w, sy + cy, sx + cx);
      if (!taps.active) continue;
      const std::ptrdiff_t ti[4] = {taps.i, taps.i, taps.i + 1, taps.i + 1};
      const std::ptrdiff_t tj[4] = {taps.j, taps.j + 1, taps.j, taps.j + 1};
      T gy = T{0};
      T gx = T{0};
      for (std::size_t c = 0; c < dims.c; ++c) {
        const T g = grad_out[c * dims.plane() + i * dims.w + j];
        const GridView<T> grid{tmpl.subspan(c * dims.plane(), dims.plane()), dims.h, dims.w};
        for (int k = 0; k < 4; ++k) {
          const T v = grid.at(ti[k], tj[k]);
          gy += g * taps.dweight_dy[k] * v;
          gx += g * taps.dweight_dx[k] * v;
          if (ti[k] >= 0 && tj[k] >= 0 && ti[k] < static_cast<std::ptrdiff_t>(dims.h) &&
              tj[k] < static_cast<std::ptrdiff_t>(dims.w)) {
            grad_template[c * dims.plane() + static_cast<std::size_t>(ti[k]) * dims.w +
                          static_cast<std::size_t>(tj[k])] += taps.weight[k] * g;
          }
        }
      }
      // src = inv * (q - t); d src / dA[k][l] = -inv[:, k] * src[l]; d src / dt[k] = -inv[:, k]
      const T src[2] = {sx, sy};
      for (int k = 0; k < 2; ++k) {
        const T back = -(gx * inv.inv[0][k] + gy * inv.inv[1][k]);
        grad_t[k] += back;
        for (int l = 0; l < 2; ++l) grad_a[k][l] += back * src[l];
      }
    }

  if (std::holds_alternative<AffineTransform<T>>(t)) {
    grad_params[0] += grad_a[0][0];
    grad_params[1] += grad_a[0][1];
    grad_params[2] += grad_t[0];
    grad_params[3] += grad_a[1][0];
    grad_params[4] += grad_a[1][1];
    grad_params[5] += grad_t[1];
  } else {
    const T theta = std::get<RotationTransform<T>>(t).theta[0];
    const T c = std::cos(theta);
    const T s = std::sin(theta);
    // dA/dtheta = [[-sin, -cos], [cos, -sin]]
    grad_params[0] += -s * grad_a[0][0] - c * grad_a[0][1] + c * grad_a[1][0] - s * grad_a[1][1];
  }
}

// Per-position least-squares scalar weights mapping tmpl onto target:
// w = sum_c target*tmpl / sum_c tmpl^2, or 1 where the template is ~zero.
template <typename T>
ScalarTransform<T> fit_scalar(std::span<const T> tmpl, std::span<const T> target,
                              const KernelDims& dims) {
  if (tmpl.size() != dims.count() || target.size() != dims.count()) {
    throw ShapeError("fit_scalar: template and target must both match kernel dims");
  }
  ScalarTransform<T> s{dims.h, dims.w, std::vector<T>(dims.plane(), T{1})};
  for (std::size_t p = 0; p < dims.plane(); ++p) {
    T num = T{0};
    T den = T{0};
    for (std::size_t c = 0; c < dims.c; ++c) {
      const T b = tmpl[c * dims.plane() + p];
      num += target[c * dims.plane() + p] * b;
      den += b * b;
    }
    if (den >= T(1e-12)) s.weights[p] = num / den;
  }
  return s;
}

}  // namespace tconv
