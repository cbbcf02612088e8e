#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "tconv/cost_model.hpp"
#include "tconv/nn/data.hpp"
#include "tconv/nn/network.hpp"
#include "tconv/pruning.hpp"

namespace tconv::nn {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> decay_epochs;  // lr *= decay_factor at each boundary passed
  double decay_factor = 0.1;
};

inline double learning_rate(const SgdConfig& c, std::size_t epoch) {
  double lr = c.lr;
  for (std::size_t b : c.decay_epochs)
    if (epoch >= b) lr *= c.decay_factor;
  return lr;
}

// Momentum buffers aligned with parameter_spans of every layer.
struct SgdState {
  std::vector<std::vector<std::vector<double>>> velocity;

  void reset_layer(std::size_t i) {
    if (i < velocity.size()) velocity[i].clear();
  }
};

// v <- mu v + g + lambda w ; w <- w - lr(epoch) v. BatchNorm running
// statistics are not parameters and stay untouched.
inline void sgd_step(Network& net, const NetGrads& grads, SgdState& state, const SgdConfig& cfg,
                     std::size_t epoch) {
  const double lr = learning_rate(cfg, epoch);
  state.velocity.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& g = grads.params[i];
    if (g.empty()) continue;
    auto params = parameter_spans(net.layers[i]);
    if (params.size() != g.size()) throw ShapeError("gradient list does not match layer parameters");
    auto& vel = state.velocity[i];
    if (vel.size() != params.size()) {
      vel.assign(params.size(), {});
      for (std::size_t p = 0; p < params.size(); ++p) vel[p].assign(params[p].size(), 0.0);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (g[p].size() != params[p].size() || vel[p].size() != params[p].size()) {
        throw ShapeError("gradient size does not match parameter size");
      }
      const double wd = decays(net.layers[i], p) ? cfg.weight_decay : 0.0;
      for (std::size_t k = 0; k < params[p].size(); ++k) {
        vel[p][k] = cfg.momentum * vel[p][k] + g[p][k] + wd * params[p][k];
        params[p][k] -= lr * vel[p][k];
      }
    }
  }
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 64;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  AugmentFlags augment;
  PruneSchedule schedule;
  SaliencyMeasure measure = SaliencyMeasure::Magnitude;
  TransformFamily family = TransformFamily::Scalar;
  std::size_t groups = 1;
  bool independent_group_templates = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  std::vector<std::size_t> templates;              // M per prunable layer
  std::vector<std::vector<std::size_t>> kept;      // template filters per prunable layer
};

// Fraction of correct eval-mode predictions.
inline double evaluate(Network& net, const Dataset& data, std::size_t batch = 256) {
  if (data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(start + batch, data.size());
    std::span<const std::size_t> part(idx.data() + start, end - start);
    const Tensor4<double> logits = forward(net, gather_images(data, part), false);
    for (std::size_t i = 0; i < part.size(); ++i)
      if (argmax_row(logits, i) == data.labels[part[i]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

inline void record_structure(const Network& net, const Shape4& input, EpochMetrics& m) {
  m.total_params = parameter_count(net);
  m.total_macs = network_report(net, input).compressed_total.macs;
  for (std::size_t id : prunable_layers(net)) {
    const auto kept = current_kept(net.layers[id]);
    m.templates.push_back(kept.size());
    m.kept.push_back(kept);
  }
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Per epoch: apply the scheduled pruning plan (when a target rate is set),
// then one shuffled pass of minibatch SGD. First-order saliency uses filter
// gradients accumulated over the previous epoch.
inline std::vector<EpochMetrics> train(Network& net, const Dataset& data, const TrainConfig& cfg,
                                       const Dataset* validation = nullptr,
                                       const EpochCallback& on_epoch = {}) {
  check_dataset(data);
  if (cfg.batch == 0) throw std::invalid_argument("batch size must be positive");
  if (data.size() < 2) throw std::invalid_argument("training needs at least two samples");
  const Shape4 input{1, data.images.shape().c, data.images.shape().h, data.images.shape().w};
  validate(net, input);
  Rng rng(cfg.seed);
  SgdState state;
  std::vector<Tensor4<double>> filter_grads;
  std::vector<EpochMetrics> history;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.schedule.target_rate > 0) {
      const PruningPlan plan = build_plan(net, cfg.measure, epoch, cfg.schedule,
                                         filter_grads.empty() ? nullptr : &filter_grads);
      for (std::size_t id : apply_plan(net, plan, cfg.family, cfg.groups,
                                       cfg.independent_group_templates))
        state.reset_layer(id);
    }
    const bool taylor = cfg.measure == SaliencyMeasure::TaylorFO && cfg.schedule.target_rate > 0;
    filter_grads.assign(taylor ? net.layers.size() : 0, Tensor4<double>{});

    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(start + cfg.batch, order.size());
      if (end - start < 2) break;  // batch statistics need two samples
      std::span<const std::size_t> part(order.data() + start, end - start);
      Tensor4<double> x = augment(gather_images(data, part), cfg.augment, rng);
      const std::vector<std::size_t> labels = gather_labels(data, part);
      const LossResult r = forward_loss(net, x, labels, true);
      loss_sum += r.loss * static_cast<double>(part.size());
      seen += part.size();
      for (std::size_t i = 0; i < part.size(); ++i)
        if (argmax_row(r.logits, i) == labels[i]) ++correct;
      NetGrads g = backward(net, labels);
      if (taylor) {
        for (std::size_t i = 0; i < g.filters.size(); ++i) {
          if (g.filters[i].size() == 0) continue;
          if (filter_grads[i].size() == 0) {
            filter_grads[i] = g.filters[i];
          } else {
            for (std::size_t k = 0; k < g.filters[i].size(); ++k) filter_grads[i][k] += g.filters[i][k];
          }
        }
      }
      sgd_step(net, g, state, cfg.sgd, epoch);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    if (validation) m.val_acc = evaluate(net, *validation);
    detail::record_structure(net, input, m);
    if (on_epoch) on_epoch(m);
    history.push_back(std::move(m));
  }
  return history;
}

inline void write_metrics_header(std::ostream& os) {
  os << "epoch,train_loss,train_acc,val_acc,total_params,total_macs,templates\n";
}

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << ',' << m.train_loss << ',' << m.train_acc << ',' << m.val_acc << ','
     << m.total_params << ',' << m.total_macs << ',';
  for (std::size_t i = 0; i < m.templates.size(); ++i) os << (i ? ";" : "") << m.templates[i];
  os << '\n';
}

}  // namespace tconv::nn
