#pragma once

#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tconv/nn/network.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

// Multiply-accumulates and stored parameters of one convolution. Biases are
// excluded; the stages split decomposed layers (template, transform).
struct LayerCost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::uint64_t template_stage = 0;
  std::uint64_t transform_stage = 0;

  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

inline LayerCost dense_layer_cost(std::uint64_t c, std::uint64_t n, std::uint64_t k,
                                  std::uint64_t h_out, std::uint64_t w_out) {
  const std::uint64_t macs = h_out * w_out * k * k * c * n;
  return {macs, k * k * c * n, macs, 0};
}

// Template stage H W K^2 (C/G) M G; transform stage H W K^2 G (N - M) taps
// scaled by the family's per-position cost (4 for bilinear resampling).
inline LayerCost template_layer_cost(std::uint64_t c, std::uint64_t n, std::uint64_t m,
                                     std::uint64_t g, std::uint64_t k, std::uint64_t h_out,
                                     std::uint64_t w_out, TransformFamily family,
                                     bool independent_group_templates = false) {
  if (g == 0 || c % g != 0) throw ShapeError("groups must divide input channels");
  if (m == 0 || m > n) throw std::invalid_argument("template count must satisfy 1 <= M <= N");
  LayerCost cost;
  cost.template_stage = h_out * w_out * k * k * (c / g) * m * g;
  cost.transform_stage = h_out * w_out * k * k * g * (n - m) * transform_macs_per_position(family);
  cost.macs = cost.template_stage + cost.transform_stage;
  const std::uint64_t template_params = k * k * (c / g) * m * (independent_group_templates ? g : 1);
  cost.params = template_params + family_param_count(family, k, k) * g * (n - m);
  return cost;
}

inline LayerCost template_layer_cost(const TemplateConvConfig& cfg, std::uint64_t h_out,
                                     std::uint64_t w_out) {
  if (cfg.geom.kernel_h != cfg.geom.kernel_w) throw ShapeError("cost model assumes square kernels");
  return template_layer_cost(cfg.in_channels, cfg.out_channels, cfg.templates, cfg.geom.groups,
                             cfg.geom.kernel_h, h_out, w_out, cfg.family,
                             cfg.independent_group_templates);
}

// Template-stage plus transform-stage MACs over dense MACs.
inline double flops_reduction(double c, double n, double m, double g) {
  return m / n + g / c - g * m / (c * n);
}

// Stored parameters over dense parameters (shared templates, scalar family).
inline double params_reduction(double c, double n, double m, double g) {
  return m / (g * n) + g / c - g * m / (c * n);
}

struct LayerReport {
  std::size_t layer_id = 0;
  std::string kind;
  std::size_t in_channels = 0, out_channels = 0, templates = 0, groups = 1, kernel = 0;
  std::size_t out_h = 0, out_w = 0;
  LayerCost baseline;
  LayerCost compressed;
  std::uint64_t counted_macs = 0;  // instrumented count for template layers
};

struct CostReport {
  std::vector<LayerReport> layers;
  LayerCost baseline_total;
  LayerCost compressed_total;
  std::uint64_t other_macs = 0;    // biases, BN, linear; excluded from ratios
  std::uint64_t other_params = 0;

  double flops_ratio() const {
    return static_cast<double>(compressed_total.macs) / static_cast<double>(baseline_total.macs);
  }
  double params_ratio() const {
    return static_cast<double>(compressed_total.params) / static_cast<double>(baseline_total.params);
  }
};

// Per-convolution baseline (dense) and compressed costs for an input of
// (c, h, w). Template layers are cross-checked against the instrumented
// two-stage counter.
inline CostReport network_report(const nn::Network& net, const Shape4& input) {
  CostReport r;
  Shape4 s{1, input.c, input.h, input.w};
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const nn::Layer& layer = net.layers[i];
    const Shape4 o = nn::output_shape(layer, s);
    if (nn::is_conv(layer)) {
      LayerReport lr;
      lr.layer_id = i;
      lr.kind = nn::layer_name(layer);
      const Tensor4<double>& w = nn::conv_filters(layer);
      lr.in_channels = s.c;
      lr.out_channels = w.shape().n;
      lr.kernel = w.shape().h;
      lr.out_h = o.h;
      lr.out_w = o.w;
      lr.baseline = dense_layer_cost(s.c, lr.out_channels, lr.kernel, o.h, o.w);
      if (const auto* t = std::get_if<nn::TemplateConv>(&layer)) {
        lr.templates = t->layer.num_templates();
        lr.groups = t->layer.groups();
        lr.compressed = template_layer_cost(t->layer.config(), o.h, o.w);
        const StageMacs counted = count_macs(t->layer, s.h, s.w);
        lr.counted_macs = counted.total();
        if (counted.template_stage != lr.compressed.template_stage ||
            counted.transform_stage != lr.compressed.transform_stage) {
          throw std::logic_error("closed-form cost disagrees with the MAC counter at layer " +
                                 std::to_string(i));
        }
      } else {
        lr.templates = lr.out_channels;
        lr.compressed = lr.baseline;
        lr.counted_macs = lr.baseline.macs;
      }
      for (LayerCost* tot : {&r.baseline_total, &r.compressed_total}) {
        const LayerCost& add = tot == &r.baseline_total ? lr.baseline : lr.compressed;
        tot->macs += add.macs;
        tot->params += add.params;
        tot->template_stage += add.template_stage;
        tot->transform_stage += add.transform_stage;
      }
      r.other_macs += o.plane() * o.c;  // bias
      r.other_params += o.c;
      r.layers.push_back(std::move(lr));
    } else if (const auto* bn = std::get_if<nn::BatchNorm>(&layer)) {
      r.other_macs += o.c * o.plane();
      r.other_params += 2 * bn->gamma.size();
    } else if (const auto* lin = std::get_if<nn::Linear>(&layer)) {
      r.other_macs += lin->weight.size() + lin->bias.size();
      r.other_params += lin->weight.size() + lin->bias.size();
    }
    s = o;
  }
  return r;
}

inline void write_report_csv(std::ostream& os, const CostReport& r) {
  os << "layer,kind,C,N,M,G,K,H_out,W_out,baseline_macs,macs,template_stage,transform_stage,"
        "counted_macs,baseline_params,params,flops_ratio,params_ratio\n";
  auto ratio = [](std::uint64_t a, std::uint64_t b) {
    return b == 0 ? 1.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  os << std::setprecision(10);
  for (const auto& l : r.layers) {
    os << l.layer_id << ',' << l.kind << ',' << l.in_channels << ',' << l.out_channels << ','
       << l.templates << ',' << l.groups << ',' << l.kernel << ',' << l.out_h << ',' << l.out_w
       << ',' << l.baseline.macs << ',' << l.compressed.macs << ',' << l.compressed.template_stage
       << ',' << l.compressed.transform_stage << ',' << l.counted_macs << ',' << l.baseline.params
       << ',' << l.compressed.params << ',' << ratio(l.compressed.macs, l.baseline.macs) << ','
       << ratio(l.compressed.params, l.baseline.params) << '\n';
  }
  os << "total,,,,,,,,," << r.baseline_total.macs << ',' << r.compressed_total.macs << ','
     << r.compressed_total.template_stage << ',' << r.compressed_total.transform_stage << ','
     << r.compressed_total.macs << ',' << r.baseline_total.params << ','
     << r.compressed_total.params << ',' << r.flops_ratio() << ',' << r.params_ratio() << '\n';
}

inline void write_report_table(std::ostream& os, const CostReport& r) {
  auto pct = [](double ratio) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100 * (1 - ratio);
    return s.str();
  };
  os << std::left << std::setw(7) << "layer" << std::setw(15) << "kind" << std::right
     << std::setw(5) << "C" << std::setw(5) << "N" << std::setw(5) << "M" << std::setw(4) << "G"
     << std::setw(14) << "dense MACs" << std::setw(14) << "MACs" << std::setw(12) << "params"
     << std::setw(11) << "FLOPs -%" << std::setw(11) << "Params -%" << '\n';
  for (const auto& l : r.layers) {
    os << std::left << std::setw(7) << l.layer_id << std::setw(15) << l.kind << std::right
       << std::setw(5) << l.in_channels << std::setw(5) << l.out_channels << std::setw(5)
       << l.templates << std::setw(4) << l.groups << std::setw(14) << l.baseline.macs
       << std::setw(14) << l.compressed.macs << std::setw(12) << l.compressed.params
       << std::setw(11)
       << pct(static_cast<double>(l.compressed.macs) / static_cast<double>(l.baseline.macs))
       << std::setw(11)
       << pct(static_cast<double>(l.compressed.params) / static_cast<double>(l.baseline.params))
       << '\n';
  }
  os << std::left << std::setw(22) << "total" << std::right << std::setw(19) << ""
     << std::setw(14) << r.baseline_total.macs << std::setw(14) << r.compressed_total.macs
     << std::setw(12) << r.compressed_total.params << std::setw(11) << pct(r.flops_ratio())
     << std::setw(11) << pct(r.params_ratio()) << '\n';
  os << "Ratios cover convolutions only; bias, batchnorm and linear layers add " << r.other_macs
     << " MACs and " << r.other_params << " parameters.\n";
  os << "Parameter ratios follow the shared-template storage count; with groups > 1 they differ "
        "from the MAC ratios.\n";
}

}  // namespace tconv
