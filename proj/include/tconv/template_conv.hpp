#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tconv/conv.hpp"
#include "tconv/tensor.hpp"
#include "tconv/transforms.hpp"

namespace tconv {

struct TemplateConvConfig {
  std::size_t in_channels = 1;   // C
  std::size_t out_channels = 1;  // N
  std::size_t templates = 1;     // M
  ConvGeometry geom{};           // groups is G
  TransformFamily family = TransformFamily::Scalar;
  // Allocate G*M templates (one per group) instead of M shared across groups.
  bool independent_group_templates = false;

  std::size_t group_channels() const { return in_channels / geom.groups; }
  std::size_t template_count() const {
    return independent_group_templates ? geom.groups * templates : templates;
  }
  KernelDims template_dims() const { return {group_channels(), geom.kernel_h, geom.kernel_w}; }
  // Geometry of the reconstructed dense filters.
  ConvGeometry dense_geom() const {
    ConvGeometry g = geom;
    g.groups = 1;
    return g;
  }
};

namespace detail {

// Reconstructed-filter cache. Copies start empty.
template <typename T>
class FilterCache {
 public:
  FilterCache() = default;
  FilterCache(const FilterCache&) {}
  FilterCache& operator=(const FilterCache&) {
    invalidate();
    return *this;
  }

  template <typename Build>
  const Tensor4<T>& get(Build&& build) const {
    std::lock_guard lock(mu_);
    if (!filters_) filters_ = build();
    return *filters_;
  }
  void invalidate() {
    std::lock_guard lock(mu_);
    filters_.reset();
  }

 private:
  mutable std::mutex mu_;
  mutable std::optional<Tensor4<T>> filters_;
};

}  // namespace detail

// Convolution whose N filters are M templates plus per-output, per-group
// spatial transforms of them. The M identity outputs carry their template
// unchanged; every other output n uses template mapping()[n] with G learned
// transforms, one per input-channel group.
template <typename T>
class TemplateConvLayer {
 public:
  TemplateConvLayer() = default;

  // identity_outputs: the M output positions that carry untransformed
  // templates (template k goes to the k-th smallest). transforms: G entries
  // for each remaining output, in ascending output order.
  TemplateConvLayer(TemplateConvConfig cfg, Tensor4<T> templates,
                    std::vector<std::size_t> identity_outputs,
                    std::vector<SpatialTransform<T>> transforms)
      : cfg_(cfg),
        templates_(std::move(templates)),
        identity_outputs_(std::move(identity_outputs)),
        transforms_(std::move(transforms)) {
    validate();
    build_mapping();
    check_transforms();
  }

  // Identity outputs at positions 0..M-1 and identity transforms everywhere.
  static TemplateConvLayer with_identity_transforms(TemplateConvConfig cfg, Tensor4<T> templates) {
    std::vector<std::size_t> ids(cfg.templates);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    const std::size_t count = (cfg.out_channels - std::min(cfg.templates, cfg.out_channels)) *
                              std::max<std::size_t>(cfg.geom.groups, 1);
    std::vector<SpatialTransform<T>> ts(
        count, identity_transform<T>(cfg.family, cfg.geom.kernel_h, cfg.geom.kernel_w));
    return TemplateConvLayer(cfg, std::move(templates), std::move(ids), std::move(ts));
  }

  const TemplateConvConfig& config() const { return cfg_; }
  std::size_t in_channels() const { return cfg_.in_channels; }
  std::size_t out_channels() const { return cfg_.out_channels; }
  std::size_t num_templates() const { return cfg_.templates; }
  std::size_t groups() const { return cfg_.geom.groups; }
  const ConvGeometry& geometry() const { return cfg_.geom; }
  TransformFamily family() const { return cfg_.family; }
  KernelDims template_dims() const { return cfg_.template_dims(); }

  const Tensor4<T>& templates() const { return templates_; }
  const std::vector<std::size_t>& mapping() const { return mapping_; }
  const std::vector<std::size_t>& identity_outputs() const { return identity_outputs_; }
  bool is_identity(std::size_t n) const { return slot_[n] < 0; }
  std::size_t transformed_count() const { return cfg_.out_channels - cfg_.templates; }

  // Index into templates() used by group g for logical template m.
  std::size_t template_index(std::size_t g, std::size_t m) const {
    return cfg_.independent_group_templates ? g * cfg_.templates + m : m;
  }
  std::span<const T> template_slice(std::size_t g, std::size_t m) const {
    return templates_.item(template_index(g, m));
  }

  const SpatialTransform<T>& transform(std::size_t n, std::size_t g) const {
    return transforms_.at(transform_slot(n) * groups() + g);
  }
  // Flat transform list: G entries per transformed output, ascending output order.
  const std::vector<SpatialTransform<T>>& transforms() const { return transforms_; }
  std::size_t transform_slot(std::size_t n) const {
    if (slot_.at(n) < 0) throw std::out_of_range("output " + std::to_string(n) + " is an identity output");
    return static_cast<std::size_t>(slot_[n]);
  }

  // Mutable parameter access. Each call drops the reconstructed-filter cache;
  // call invalidate() after writing through a view obtained earlier.
  Tensor4<T>& templates_mut() {
    cache_.invalidate();
    return templates_;
  }
  std::vector<SpatialTransform<T>>& transforms_mut() {
    cache_.invalidate();
    return transforms_;
  }
  void invalidate() { cache_.invalidate(); }

  std::size_t parameter_count() const {
    std::size_t total = templates_.size();
    for (const auto& t : transforms_) total += param_count(t);
    return total;
  }

  // Dense (N, C, k_h, k_w) filters, rebuilt after any parameter change.
  const Tensor4<T>& reconstructed() const {
    return cache_.get([this] { return build_filters(); });
  }

  Tensor4<T> build_filters() const {
    const KernelDims d = template_dims();
    const std::size_t cg = d.c;
    Tensor4<T> w(cfg_.out_channels, cfg_.in_channels, d.h, d.w);
    for (std::size_t n = 0; n < cfg_.out_channels; ++n)
      for (std::size_t g = 0; g < groups(); ++g) {
        auto dst = w.item(n).subspan(g * cg * d.plane(), d.count());
        auto tmpl = template_slice(g, mapping_[n]);
        if (is_identity(n)) {
          std::copy(tmpl.begin(), tmpl.end(), dst.begin());
        } else {
          const auto filt = apply_to_kernel(tmpl, d, transform(n, g));
          std::copy(filt.begin(), filt.end(), dst.begin());
        }
      }
    return w;
  }

 private:
  void validate() const {
    cfg_.geom.validate();
    const std::size_t n = cfg_.out_channels;
    const std::size_t m = cfg_.templates;
    if (m < 1 || m > n) {
      throw std::invalid_argument("template count M=" + std::to_string(m) +
                                  " must satisfy 1 <= M <= N=" + std::to_string(n));
    }
    if (cfg_.in_channels == 0 || cfg_.in_channels % cfg_.geom.groups != 0) {
      throw ShapeError("channel axis: groups " + std::to_string(cfg_.geom.groups) +
                       " must divide input channels " + std::to_string(cfg_.in_channels));
    }
    const Shape4 expect{cfg_.template_count(), cfg_.group_channels(), cfg_.geom.kernel_h,
                        cfg_.geom.kernel_w};
    if (templates_.shape() != expect) {
      throw ShapeError("templates shape " + to_string(templates_.shape()) + " expected " +
                       to_string(expect));
    }
    if (identity_outputs_.size() != m) {
      throw std::invalid_argument("need exactly M identity outputs");
    }
    for (std::size_t i = 0; i < identity_outputs_.size(); ++i) {
      if (identity_outputs_[i] >= n) throw std::out_of_range("identity output index out of range");
      if (i > 0 && identity_outputs_[i] <= identity_outputs_[i - 1]) {
        throw std::invalid_argument("identity outputs must be strictly ascending");
      }
    }
  }

  // Identity output k gets template k; the j-th transformed output (in
  // ascending order) gets template j mod M. With identity outputs at
  // 0..M-1 this is exactly n mod M for every n.
  void build_mapping() {
    mapping_.assign(cfg_.out_channels, 0);
    slot_.assign(cfg_.out_channels, -1);
    for (std::size_t k = 0; k < identity_outputs_.size(); ++k) mapping_[identity_outputs_[k]] = k;
    std::size_t j = 0;
    for (std::size_t n = 0; n < cfg_.out_channels; ++n) {
      if (std::binary_search(identity_outputs_.begin(), identity_outputs_.end(), n)) continue;
      mapping_[n] = j % cfg_.templates;
      slot_[n] = static_cast<std::ptrdiff_t>(j);
      ++j;
    }
  }

  void check_transforms() const {
    if (transforms_.size() != transformed_count() * groups()) {
      throw std::invalid_argument("expected " + std::to_string(transformed_count() * groups()) +
                                  " transforms, got " + std::to_string(transforms_.size()));
    }
    for (const auto& t : transforms_) {
      if (family_of(t) != cfg_.family) throw std::invalid_argument("transform family mismatch");
      if (const auto* s = std::get_if<ScalarTransform<T>>(&t)) {
        detail::check_scalar_dims(*s, template_dims());
      }
    }
  }

  TemplateConvConfig cfg_{};
  Tensor4<T> templates_;
  std::vector<std::size_t> identity_outputs_;
  std::vector<SpatialTransform<T>> transforms_;
  std::vector<std::size_t> mapping_;
  std::vector<std::ptrdiff_t> slot_;
  detail::FilterCache<T> cache_;
};

template <typename T>
Tensor4<T> reconstruct_filters(const TemplateConvLayer<T>& layer) {
  return layer.build_filters();
}

namespace detail {
template <typename T>
void check_layer_input(const TemplateConvLayer<T>& layer, const Tensor4<T>& x) {
  if (x.shape().c != layer.in_channels()) {
    throw ShapeError("channel axis: input has " + std::to_string(x.shape().c) +
                     " channels, layer expects " + std::to_string(layer.in_channels()));
  }
}
}  // namespace detail

// Builds the dense filters, then convolves directly.
template <typename T>
Tensor4<T> forward_reference(const TemplateConvLayer<T>& layer, const Tensor4<T>& x) {
  detail::check_layer_input(layer, x);
  return conv2d_reference(x, reconstruct_filters(layer), layer.config().dense_geom());
}

struct StageProfile {
  MacCounter template_stage;
  MacCounter transform_stage;
  double gather_seconds = 0;
  double template_seconds = 0;
  double transform_seconds = 0;
};

namespace detail {
using Clock = std::chrono::steady_clock;
inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}
}  // namespace detail

// Two-stage evaluation. Stage one contracts the gathered input with every
// template at every kernel offset (a grouped pointwise convolution giving
// G*M*K^2 template feature maps); stage two forms each output as a weighted
// sum of its template's offset maps. Scalar transforms only; other families
// run the cached reconstructed filters.
template <typename T>
Tensor4<T> forward_two_stage(const TemplateConvLayer<T>& layer, const Tensor4<T>& x,
                             StageProfile* profile = nullptr) {
  detail::check_layer_input(layer, x);
  const TemplateConvConfig& cfg = layer.config();
  const ConvGeometry dense = cfg.dense_geom();
  const std::size_t ho = dense.out_h(x.shape().h);
  const std::size_t wo = dense.out_w(x.shape().w);
  const std::size_t positions = ho * wo;
  const std::size_t offsets = dense.offsets();
  const std::size_t groups = layer.groups();
  const std::size_t m_count = layer.num_templates();

  if (layer.family() != TransformFamily::Scalar) {
    const auto t0 = detail::Clock::now();
    Tensor4<T> y = conv2d(x, layer.reconstructed(), dense);
    if (profile) {
      profile->template_stage.macs +=
          x.shape().n * positions * offsets * cfg.in_channels * m_count;
      profile->transform_stage.macs += x.shape().n * positions * offsets * groups *
                                       layer.transformed_count() *
                                       transform_macs_per_position(layer.family());
      profile->template_seconds += detail::seconds_since(t0);
    }
    return y;
  }

  const std::size_t cg = cfg.group_channels();
  const std::size_t channels = cfg.in_channels;
  const std::size_t batch = x.shape().n;

  auto t0 = detail::Clock::now();
  const Tensor4<T> gathered = gather_offsets(x, dense);
  if (profile) profile->gather_seconds += detail::seconds_since(t0);

  // Template features, channel index ((g * M + m) * K^2 + offset).
  t0 = detail::Clock::now();
  Tensor4<T> z(batch, groups * m_count * offsets, ho, wo);
  const Tensor4<T>& tmpl = layer.templates();
  parallel_for(batch, [&](std::size_t n) {
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t off = 0; off < offsets; ++off) {
        const std::size_t kh = off / dense.kernel_w;
        const std::size_t kw = off % dense.kernel_w;
        for (std::size_t m = 0; m < m_count; ++m) {
          T* __restrict zrow = z.plane(n, (g * m_count + m) * offsets + off).data();
          const std::size_t ti = layer.template_index(g, m);
          for (std::size_t c = 0; c < cg; ++c) {
            const T wv = tmpl(ti, c, kh, kw);
            const T* __restrict grow =
                gathered.plane(n, gathered_channel(kh, kw, g * cg + c, dense.kernel_w, channels))
                    .data();
            for (std::size_t p = 0; p < positions; ++p) zrow[p] += wv * grow[p];
          }
        }
      }
  });
  if (profile) {
    profile->template_stage.macs += batch * groups * offsets * m_count * cg * positions;
    profile->template_seconds += detail::seconds_since(t0);
  }

  t0 = detail::Clock::now();
  Tensor4<T> y(batch, layer.out_channels(), ho, wo);
  parallel_for(batch, [&](std::size_t n) {
    for (std::size_t o = 0; o < layer.out_channels(); ++o) {
      T* __restrict yrow = y.plane(n, o).data();
      const std::size_t m = layer.mapping()[o];
      const bool identity = layer.is_identity(o);
      for (std::size_t g = 0; g < groups; ++g) {
        const T* weights =
            identity ? nullptr : std::get<ScalarTransform<T>>(layer.transform(o, g)).weights.data();
        for (std::size_t off = 0; off < offsets; ++off) {
          const T* __restrict zrow = z.plane(n, (g * m_count + m) * offsets + off).data();
          if (identity) {
            for (std::size_t p = 0; p < positions; ++p) yrow[p] += zrow[p];
          } else {
            const T wv = weights[off];
            for (std::size_t p = 0; p < positions; ++p) yrow[p] += wv * zrow[p];
          }
        }
      }
    }
  });
  if (profile) {
    profile->transform_stage.macs += batch * layer.transformed_count() * groups * offsets * positions;
    profile->transform_seconds += detail::seconds_since(t0);
  }
  return y;
}

template <typename T>
struct TemplateParamGrads {
  Tensor4<T> templates;
  std::vector<std::vector<T>> transforms;  // parallel to layer.transforms()
};

template <typename T>
struct TemplateConvGrads {
  Tensor4<T> input;
  Tensor4<T> templates;
  std::vector<std::vector<T>> transforms;
  Tensor4<T> filters;  // gradient w.r.t. the reconstructed dense filters
};

// Chains a gradient on the reconstructed filters back to templates and
// transform parameters.
template <typename T>
TemplateParamGrads<T> filter_grad_to_params(const TemplateConvLayer<T>& layer,
                                            const Tensor4<T>& grad_filters) {
  const KernelDims d = layer.template_dims();
  TemplateParamGrads<T> out{Tensor4<T>(layer.templates().shape()), {}};
  out.transforms.reserve(layer.transforms().size());
  for (const auto& t : layer.transforms()) out.transforms.emplace_back(param_count(t), T{0});
  for (std::size_t n = 0; n < layer.out_channels(); ++n)
    for (std::size_t g = 0; g < layer.groups(); ++g) {
      auto gslice = grad_filters.item(n).subspan(g * d.count(), d.count());
      const std::size_t ti = layer.template_index(g, layer.mapping()[n]);
      auto gt = out.templates.item(ti);
      if (layer.is_identity(n)) {
        for (std::size_t i = 0; i < d.count(); ++i) gt[i] += gslice[i];
      } else {
        const std::size_t slot = layer.transform_slot(n) * layer.groups() + g;
        apply_to_kernel_backward(layer.templates().item(ti), d, layer.transforms()[slot], gslice,
                                 gt, std::span<T>(out.transforms[slot]));
      }
    }
  return out;
}

// Gradients of L = sum(forward(x) * grad_out) w.r.t. input, templates, and
// transform parameters. Uses the reconstructed-filter formulation.
template <typename T>
TemplateConvGrads<T> backward(const TemplateConvLayer<T>& layer, const Tensor4<T>& x,
                              const Tensor4<T>& grad_out) {
  detail::check_layer_input(layer, x);
  const ConvGeometry dense = layer.config().dense_geom();
  const Tensor4<T> gathered = gather_offsets(x, dense);
  ConvGrads<T> cg = conv2d_backward(gathered, x.shape(), layer.reconstructed(), grad_out, dense);
  TemplateParamGrads<T> pg = filter_grad_to_params(layer, cg.weight);
  return {std::move(cg.input), std::move(pg.templates), std::move(pg.transforms),
          std::move(cg.weight)};
}

// Converts dense (N, C, k_h, k_w) filters. Kept filters become templates in
// ascending index order and stay at their output positions as identity
// outputs. Transformed outputs start from per-group least-squares scalar fits
// (scalar family) or identity transforms (rotation, affine). With shared
// templates, template m is the first group's channel slice of kept filter m.
template <typename T>
TemplateConvLayer<T> from_dense(const Tensor4<T>& weight, std::vector<std::size_t> kept,
                                TransformFamily family, std::size_t groups,
                                const ConvGeometry& geom,
                                bool independent_group_templates = false) {
  const Shape4 ws = weight.shape();
  if (kept.empty()) throw std::invalid_argument("from_dense: need at least one kept filter");
  std::sort(kept.begin(), kept.end());
  if (std::adjacent_find(kept.begin(), kept.end()) != kept.end()) {
    throw std::invalid_argument("from_dense: duplicate kept index");
  }
  if (kept.back() >= ws.n) {
    throw std::out_of_range("from_dense: kept index " + std::to_string(kept.back()) +
                            " out of range for " + std::to_string(ws.n) + " filters");
  }
  if (groups == 0 || ws.c % groups != 0) {
    throw ShapeError("from_dense: groups " + std::to_string(groups) +
                     " must divide input channels " + std::to_string(ws.c));
  }
  if (ws.h != geom.kernel_h || ws.w != geom.kernel_w) {
    throw ShapeError("from_dense: kernel axis does not match geometry");
  }

  TemplateConvConfig cfg;
  cfg.in_channels = ws.c;
  cfg.out_channels = ws.n;
  cfg.templates = kept.size();
  cfg.geom = geom;
  cfg.geom.groups = groups;
  cfg.family = family;
  cfg.independent_group_templates = independent_group_templates;

  const KernelDims d = cfg.template_dims();
  Tensor4<T> templates(cfg.template_count(), d.c, d.h, d.w);
  for (std::size_t m = 0; m < kept.size(); ++m)
    for (std::size_t g = 0; g < (independent_group_templates ? groups : 1); ++g) {
      auto src = weight.item(kept[m]).subspan(g * d.count(), d.count());
      const std::size_t ti = independent_group_templates ? g * kept.size() + m : m;
      std::copy(src.begin(), src.end(), templates.item(ti).begin());
    }

  TemplateConvLayer<T> layer(cfg, std::move(templates), kept,
                               std::vector<SpatialTransform<T>>(
                                   (ws.n - kept.size()) * groups,
                                   identity_transform<T>(family, d.h, d.w)));
  if (family == TransformFamily::Scalar) {
    auto& ts = layer.transforms_mut();
    for (std::size_t n = 0; n < ws.n; ++n) {
      if (layer.is_identity(n)) continue;
      for (std::size_t g = 0; g < groups; ++g) {
        auto target = weight.item(n).subspan(g * d.count(), d.count());
        ts[layer.transform_slot(n) * groups + g] =
            fit_scalar(layer.template_slice(g, layer.mapping()[n]), target, d);
      }
    }
  }
  return layer;
}

struct StageMacs {
  std::uint64_t template_stage = 0;
  std::uint64_t transform_stage = 0;
  std::uint64_t total() const { return template_stage + transform_stage; }
};

// MACs executed by forward_two_stage for one input of spatial size h x w,
// measured by running it on a zero input with the instrumented counters.
template <typename T>
StageMacs count_macs(const TemplateConvLayer<T>& layer, std::size_t h, std::size_t w) {
  StageProfile profile;
  forward_two_stage(layer, Tensor4<T>(1, layer.in_channels(), h, w), &profile);
  return {profile.template_stage.macs, profile.transform_stage.macs};
}

}  // namespace tconv
