#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tconv/pruning.hpp"
#include "tconv/random.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

struct BenchConfig {
  std::size_t in_channels = 64;
  std::size_t out_channels = 64;
  std::size_t kernel = 3;
  std::size_t image = 32;
  std::size_t batch = 1;
  std::vector<double> rates = {0.25, 0.5, 0.7, 0.9};
  std::size_t min_templates = 8;
  std::size_t reps = 7;
  std::size_t warmup = 2;
  std::uint64_t seed = 1;
};

// Times in microseconds. Stage times sum to at most median_us.
struct BenchRow {
  double rate = 0;
  std::string impl;
  std::size_t templates = 0;
  double median_us = 0, p10 = 0, p90 = 0;
  double stage_gather = 0, stage_template = 0, stage_transform = 0;
};

// Linear interpolation between order statistics; q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

namespace detail {

struct Samples {
  std::vector<double> total, gather, tmpl, transform;
};

inline BenchRow summarize(double rate, std::string impl, std::size_t templates, const Samples& s) {
  // Stage columns come from the rep at the lower median rank, whose total
  // never exceeds the reported median.
  std::vector<std::size_t> order(s.total.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.total[a] < s.total[b]; });
  const std::size_t mid = order[(order.size() - 1) / 2];
  return {rate,
          std::move(impl),
          templates,
          quantile(s.total, 0.5),
          quantile(s.total, 0.1),
          quantile(s.total, 0.9),
          s.gather[mid],
          s.tmpl[mid],
          s.transform[mid]};
}

inline double micros(std::chrono::steady_clock::duration d) {
  return std::chrono::duration<double, std::micro>(d).count();
}

}  // namespace detail

// Dense forward (gather + GEMM) against the two-stage template forward on one
// fixed random layer and input. Kept filters for each rate are the top
// filters by L1 norm.
template <typename T = float>
std::vector<BenchRow> run_benchmark(const BenchConfig& cfg) {
  if (cfg.reps < 5) throw std::invalid_argument("benchmark needs at least 5 timed repetitions");
  using Clock = std::chrono::steady_clock;
  Rng rng(cfg.seed);
  const auto geom = ConvGeometry::square(cfg.kernel, 1, cfg.kernel / 2);
  const auto weight = random_tensor<T>({cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel}, rng);
  const auto x = random_tensor<T>({cfg.batch, cfg.in_channels, cfg.image, cfg.image}, rng);

  std::vector<std::size_t> all(cfg.out_channels);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<double> scores(cfg.out_channels);
  for (std::size_t n = 0; n < cfg.out_channels; ++n)
    for (T v : weight.item(n)) scores[n] += std::abs(static_cast<double>(v));

  std::vector<BenchRow> rows;
  for (double rate : cfg.rates) {
    const std::size_t m = templates_for_rate(cfg.out_channels, rate, cfg.min_templates);
    const auto layer = from_dense(weight, select_top(scores, all, m), TransformFamily::Scalar, 1, geom);

    detail::Samples dense;
    for (std::size_t r = 0; r < cfg.warmup + cfg.reps; ++r) {
      const auto t0 = Clock::now();
      const auto gathered = gather_offsets(x, geom);
      const auto t1 = Clock::now();
      [[maybe_unused]] const auto y = conv2d_gathered(gathered, weight, geom);
      const auto t2 = Clock::now();
      if (r < cfg.warmup) continue;
      dense.total.push_back(detail::micros(t2 - t0));
      dense.gather.push_back(detail::micros(t1 - t0));
      dense.tmpl.push_back(detail::micros(t2 - t1));
      dense.transform.push_back(0.0);
    }
    rows.push_back(detail::summarize(rate, "dense", cfg.out_channels, dense));

    detail::Samples two;
    for (std::size_t r = 0; r < cfg.warmup + cfg.reps; ++r) {
      StageProfile prof;
      const auto t0 = Clock::now();
      [[maybe_unused]] const auto y = forward_two_stage(layer, x, &prof);
      const auto t1 = Clock::now();
      if (r < cfg.warmup) continue;
      two.total.push_back(detail::micros(t1 - t0));
      two.gather.push_back(prof.gather_seconds * 1e6);
      two.tmpl.push_back(prof.template_seconds * 1e6);
      two.transform.push_back(prof.transform_seconds * 1e6);
    }
    rows.push_back(detail::summarize(rate, "two_stage", m, two));
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "rate,impl,median_us,p10,p90,stage_gather,stage_template,stage_transform\n";
  for (const auto& r : rows)
    os << r.rate << ',' << r.impl << ',' << r.median_us << ',' << r.p10 << ',' << r.p90 << ','
       << r.stage_gather << ',' << r.stage_template << ',' << r.stage_transform << '\n';
}

// Number of adjacent pairs where the value goes up.
inline std::size_t count_increases(const std::vector<double>& v) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += v[i] > v[i - 1];
  return n;
}

inline std::vector<double> medians_of(const std::vector<BenchRow>& rows, const std::string& impl) {
  std::vector<double> out;
  for (const auto& r : rows)
    if (r.impl == impl) out.push_back(r.median_us);
  return out;
}

}  // namespace tconv
