#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>

#include "tconv/random.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

// Random parameters for a given config. Identity outputs are a random
// M-subset of the outputs unless leading_identity is set.
inline TemplateConvLayer<double> random_layer(const TemplateConvConfig& cfg, Rng& rng,
                                              bool leading_identity = false) {
  if (cfg.templates == 0 || cfg.templates > cfg.out_channels) {
    throw std::invalid_argument("random_layer: need 1 <= M <= N");
  }
  const KernelDims d = cfg.template_dims();
  auto templates = random_tensor<double>({cfg.template_count(), d.c, d.h, d.w}, rng);
  std::vector<std::size_t> all(cfg.out_channels);
  std::iota(all.begin(), all.end(), 0);
  if (!leading_identity) std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> ids(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.templates));
  std::sort(ids.begin(), ids.end());

  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<SpatialTransform<double>> ts;
  const std::size_t count = (cfg.out_channels - cfg.templates) * cfg.geom.groups;
  ts.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto t = identity_transform<double>(cfg.family, d.h, d.w);
    auto p = parameters(t);
    switch (cfg.family) {
      case TransformFamily::Scalar:
        for (auto& v : p) v = u(rng);
        break;
      case TransformFamily::Rotation:
        p[0] = 3 * u(rng);
        break;
      case TransformFamily::Affine:
        p[0] = 1 + 0.3 * u(rng), p[1] = 0.3 * u(rng), p[2] = 0.4 * u(rng);
        p[3] = 0.3 * u(rng), p[4] = 1 + 0.3 * u(rng), p[5] = 0.4 * u(rng);
        break;
    }
    ts.push_back(std::move(t));
  }
  return TemplateConvLayer<double>(cfg, std::move(templates), std::move(ids), std::move(ts));
}

struct EquivCase {
  TemplateConvConfig cfg;
  Shape4 input;
};

// One scalar-family configuration of the randomized equivalence sweep:
// K in {1,3,5}, G in {1,2,4}, stride in {1,2}, padding in {0,1,2},
// C <= 32, 2 <= N <= 64, 1 <= M < N. Fully determined by the seed.
inline EquivCase random_equiv_case(std::uint64_t seed) {
  Rng rng(seed);
  constexpr std::size_t kernels[] = {1, 3, 5};
  constexpr std::size_t group_choices[] = {1, 2, 4};
  const std::size_t k = kernels[uniform_index(rng, 0, 2)];
  const std::size_t g = group_choices[uniform_index(rng, 0, 2)];
  const std::size_t stride = uniform_index(rng, 1, 2);
  const std::size_t pad = uniform_index(rng, 0, 2);
  const std::size_t c = g * uniform_index(rng, 1, 32 / g);
  const std::size_t n = uniform_index(rng, 2, 64);
  const std::size_t m = uniform_index(rng, 1, n - 1);
  // Extent >= stride keeps at least one window on real data.
  const std::size_t lo = std::max(k > 2 * pad ? k - 2 * pad : 1, stride);
  EquivCase ec;
  ec.cfg.in_channels = c;
  ec.cfg.out_channels = n;
  ec.cfg.templates = m;
  ec.cfg.geom = ConvGeometry{k, k, stride, pad, g};
  ec.cfg.family = TransformFamily::Scalar;
  ec.cfg.independent_group_templates = uniform_index(rng, 0, 3) == 0;
  ec.input = Shape4{uniform_index(rng, 1, 2), c, uniform_index(rng, lo, 10), uniform_index(rng, lo, 10)};
  return ec;
}

struct EquivResult {
  std::uint64_t seed = 0;
  EquivCase config;
  double deviation = 0;  // max|ref - fast| / (1 + max|ref|)
};

inline std::string describe(const EquivCase& ec) {
  const auto& c = ec.cfg;
  return "C=" + std::to_string(c.in_channels) + " N=" + std::to_string(c.out_channels) +
         " M=" + std::to_string(c.templates) + " K=" + std::to_string(c.geom.kernel_h) +
         " G=" + std::to_string(c.geom.groups) + " s=" + std::to_string(c.geom.stride) +
         " p=" + std::to_string(c.geom.padding) +
         (c.independent_group_templates ? " independent" : " shared") + " input=" +
         to_string(ec.input);
}

// Runs one sweep configuration through both forward paths. inject_fault
// perturbs one transform weight after the reference filters are built, as a
// negative control.
inline EquivResult run_equiv_case(std::uint64_t seed, bool inject_fault = false) {
  EquivResult r;
  r.seed = seed;
  r.config = random_equiv_case(seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  auto layer = random_layer(r.config.cfg, rng);
  const auto x = random_tensor<double>(r.config.input, rng);
  const auto ref = forward_reference(layer, x);
  if (inject_fault) parameters(layer.transforms_mut().front())[0] += 0.5;
  const auto fast = forward_two_stage(layer, x);
  r.deviation = relative_deviation(fast, ref);
  return r;
}

}  // namespace tconv
