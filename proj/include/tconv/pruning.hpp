#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tconv/nn/network.hpp"
#include "tconv/serialize.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

enum class SaliencyMeasure { Magnitude, TaylorFO };

inline std::string_view measure_name(SaliencyMeasure m) {
  return m == SaliencyMeasure::Magnitude ? "mag" : "taylor";
}

inline SaliencyMeasure parse_measure(std::string_view s) {
  if (s == "mag" || s == "magnitude") return SaliencyMeasure::Magnitude;
  if (s == "taylor" || s == "taylorfo") return SaliencyMeasure::TaylorFO;
  throw std::invalid_argument("unknown saliency measure '" + std::string(s) + "' (mag|taylor)");
}

// Magnitude: L1 norm per filter. TaylorFO: |sum of weight * grad| per filter.
inline std::vector<double> filter_saliency(SaliencyMeasure measure, const Tensor4<double>& weight,
                                           const Tensor4<double>* grad = nullptr) {
  const std::size_t n = weight.shape().n;
  std::vector<double> scores(n, 0.0);
  if (measure == SaliencyMeasure::TaylorFO) {
    if (grad == nullptr || grad->size() == 0) {
      throw std::invalid_argument("first-order saliency needs accumulated weight gradients");
    }
    if (grad->shape() != weight.shape()) {
      throw ShapeError("gradient shape " + to_string(grad->shape()) + " does not match weight " +
                       to_string(weight.shape()));
    }
  }
  for (std::size_t f = 0; f < n; ++f) {
    auto w = weight.item(f);
    double s = 0;
    if (measure == SaliencyMeasure::Magnitude) {
      for (double v : w) s += std::abs(v);
    } else {
      auto g = grad->item(f);
      for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * g[i];
      s = std::abs(s);
    }
    scores[f] = s;
  }
  return scores;
}

struct PruneSchedule {
  double target_rate = 0;
  std::size_t ramp_epochs = 40;
  std::size_t min_templates = 8;
};

inline double rate_at_epoch(const PruneSchedule& s, std::size_t epoch) {
  if (s.ramp_epochs == 0) return s.target_rate;
  const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(s.ramp_epochs));
  return s.target_rate * frac;
}

// max(min_templates, ceil((1 - rate) N)) clamped to [1, N]. The ceiling
// ignores float noise below 1e-9 so that e.g. 0.3 * 10 gives 3.
inline std::size_t templates_for_rate(std::size_t n_filters, double rate, std::size_t min_templates) {
  if (!(rate >= 0 && rate < 1)) throw std::invalid_argument("pruning rate must lie in [0, 1)");
  const double kept = (1 - rate) * static_cast<double>(n_filters);
  const auto m = static_cast<std::size_t>(std::ceil(kept - 1e-9));
  return std::clamp<std::size_t>(std::max(m, min_templates), 1, std::max<std::size_t>(n_filters, 1));
}

// Indices of the m highest scores among candidates, ties to the lower
// index, returned ascending.
inline std::vector<std::size_t> select_top(const std::vector<double>& scores,
                                           std::vector<std::size_t> candidates, std::size_t m) {
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  candidates.resize(std::min(m, candidates.size()));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

struct PlanEntry {
  std::size_t layer_id = 0;
  std::size_t templates = 0;
  double rate = 0;  // 1 - M / N
  std::vector<std::size_t> kept;

  friend bool operator==(const PlanEntry&, const PlanEntry&) = default;
};

struct PruningPlan {
  std::vector<PlanEntry> entries;

  const PlanEntry* find(std::size_t layer_id) const {
    for (const auto& e : entries)
      if (e.layer_id == layer_id) return &e;
    return nullptr;
  }
  friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

// Conv layers eligible for pruning: every conv except the first.
inline std::vector<std::size_t> prunable_layers(const nn::Network& net) {
  std::vector<std::size_t> out;
  bool first = true;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!nn::is_conv(net.layers[i])) continue;
    if (!first) out.push_back(i);
    first = false;
  }
  return out;
}

// Filters of a prunable layer still standing as templates.
inline std::vector<std::size_t> current_kept(const nn::Layer& l) {
  if (const auto* t = std::get_if<nn::TemplateConv>(&l)) return t->layer.identity_outputs();
  std::vector<std::size_t> all(std::get<nn::DenseConv>(l).weight.shape().n);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

// One plan entry per prunable layer at the scheduled rate for `epoch`.
// Selection is nested: new templates come from the current ones, scored on
// the (reconstructed) dense filters. filter_grads is indexed by layer id.
inline PruningPlan build_plan(const nn::Network& net, SaliencyMeasure measure, std::size_t epoch,
                              const PruneSchedule& schedule,
                              const std::vector<Tensor4<double>>* filter_grads = nullptr) {
  PruningPlan plan;
  const double rate = rate_at_epoch(schedule, epoch);
  for (std::size_t id : prunable_layers(net)) {
    const nn::Layer& layer = net.layers[id];
    const Tensor4<double>& w = nn::conv_filters(layer);
    const std::size_t n = w.shape().n;
    std::vector<std::size_t> kept = current_kept(layer);
    const std::size_t m = std::min(templates_for_rate(n, rate, schedule.min_templates), kept.size());
    if (m < kept.size()) {
      const Tensor4<double>* g = nullptr;
      if (filter_grads && id < filter_grads->size()) g = &(*filter_grads)[id];
      kept = select_top(filter_saliency(measure, w, g), std::move(kept), m);
    }
    plan.entries.push_back({id, m, 1 - static_cast<double>(m) / static_cast<double>(n), kept});
  }
  return plan;
}

namespace detail {

inline void check_entry(const nn::Network& net, const PlanEntry& e) {
  if (e.layer_id >= net.layers.size() || !nn::is_conv(net.layers[e.layer_id])) {
    throw std::invalid_argument("plan layer " + std::to_string(e.layer_id) +
                                " is not a convolution of this network");
  }
  const std::size_t n = nn::conv_filters(net.layers[e.layer_id]).shape().n;
  if (e.kept.size() != e.templates || e.kept.empty() ||
      !std::is_sorted(e.kept.begin(), e.kept.end()) || e.kept.back() >= n ||
      std::adjacent_find(e.kept.begin(), e.kept.end()) != e.kept.end()) {
    throw std::invalid_argument("plan entry for layer " + std::to_string(e.layer_id) +
                                " has an invalid kept set");
  }
}

// Keeps resampling transforms of outputs whose template filter survives;
// everything else starts from from_dense's initialisation.
inline void carry_transforms(const TemplateConvLayer<double>& from, TemplateConvLayer<double>& to) {
  if (from.family() == TransformFamily::Scalar || from.groups() != to.groups()) return;
  const std::size_t g = to.groups();
  auto& ts = to.transforms_mut();
  for (std::size_t n = 0; n < to.out_channels(); ++n) {
    if (to.is_identity(n) || from.is_identity(n)) continue;
    const std::size_t old_src = from.identity_outputs()[from.mapping()[n]];
    const std::size_t new_src = to.identity_outputs()[to.mapping()[n]];
    if (old_src != new_src) continue;
    for (std::size_t k = 0; k < g; ++k) ts[to.transform_slot(n) * g + k] = from.transform(n, k);
  }
}

}  // namespace detail

// Converts dense layers with M < N into template layers (family, groups),
// and re-derives existing template layers from their reconstructed filters
// with the planned template subset (refitting scalar transforms). Returns
// the ids of layers whose parameter layout changed.
inline std::vector<std::size_t> apply_plan(nn::Network& net, const PruningPlan& plan,
                                           TransformFamily family, std::size_t groups,
                                           bool independent_group_templates = false) {
  for (const auto& e : plan.entries) detail::check_entry(net, e);
  std::vector<std::size_t> changed;
  for (const auto& e : plan.entries) {
    nn::Layer& layer = net.layers[e.layer_id];
    if (auto* d = std::get_if<nn::DenseConv>(&layer)) {
      if (e.templates == d->weight.shape().n) continue;
      TemplateConvLayer<double> t =
          from_dense(d->weight, e.kept, family, groups, d->geom, independent_group_templates);
      layer = nn::TemplateConv{std::move(t), d->bias};
      changed.push_back(e.layer_id);
    } else {
      auto& tc = std::get<nn::TemplateConv>(layer);
      const TemplateConvConfig& cfg = tc.layer.config();
      ConvGeometry geom = cfg.geom;
      geom.groups = 1;
      TemplateConvLayer<double> t =
          from_dense(tc.layer.reconstructed(), e.kept, cfg.family, cfg.geom.groups, geom,
                     cfg.independent_group_templates);
      detail::carry_transforms(tc.layer, t);
      if (t.identity_outputs() != tc.layer.identity_outputs()) changed.push_back(e.layer_id);
      tc.layer = std::move(t);
    }
  }
  return changed;
}

// Text form: one line per entry, "layer_id M rate idx0 idx1 ...".
inline void write_plan(std::ostream& os, const PruningPlan& plan) {
  for (const auto& e : plan.entries) {
    os << e.layer_id << ' ' << e.templates << ' ' << e.rate;
    for (std::size_t k : e.kept) os << ' ' << k;
    os << '\n';
  }
}

inline PruningPlan read_plan(std::istream& is) {
  PruningPlan plan;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    PlanEntry e;
    if (!(ls >> e.layer_id >> e.templates >> e.rate)) {
      throw FormatError("plan line " + std::to_string(lineno) + ": expected 'layer_id M rate idx...'");
    }
    std::size_t k;
    while (ls >> k) e.kept.push_back(k);
    if (!ls.eof() || e.kept.size() != e.templates) {
      throw FormatError("plan line " + std::to_string(lineno) + ": expected " +
                        std::to_string(e.templates) + " kept indices");
    }
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

inline void save_plan(const std::filesystem::path& p, const PruningPlan& plan) {
  auto os = io::open_out(p);
  os.precision(17);
  write_plan(os, plan);
  if (!os) throw IoError("failed writing " + p.string());
}

inline PruningPlan load_plan(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  return read_plan(is);
}

}  // namespace tconv
