#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "tconv/conv.hpp"
#include "tconv/random.hpp"
#include "tconv/template_conv.hpp"

namespace tconv::nn {

struct DenseConv {
  Tensor4<double> weight;  // (out, in, k_h, k_w)
  std::vector<double> bias;
  ConvGeometry geom;
};

struct TemplateConv {
  TemplateConvLayer<double> layer;
  std::vector<double> bias;
};

struct BatchNorm {
  std::vector<double> gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct ReLU {};

struct MaxPool {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct Flatten {};

struct Linear {
  Tensor4<double> weight;  // (out, in, 1, 1)
  std::vector<double> bias;
};

struct SoftmaxCrossEntropy {};

using Layer =
    std::variant<DenseConv, TemplateConv, BatchNorm, ReLU, MaxPool, Flatten, Linear, SoftmaxCrossEntropy>;

inline std::string layer_name(const Layer& l) {
  static constexpr const char* names[] = {"conv",    "template_conv", "batchnorm", "relu",
                                          "maxpool", "flatten",       "linear",    "softmax_ce"};
  return names[l.index()];
}

inline bool is_conv(const Layer& l) {
  return std::holds_alternative<DenseConv>(l) || std::holds_alternative<TemplateConv>(l);
}

// Forward state kept for the backward pass.
struct LayerCache {
  Shape4 input_shape;
  Tensor4<double> saved;  // conv: gathered input; relu/linear: input; bn: normalized input
  std::vector<double> inv_std;
  std::vector<std::size_t> argmax;
  bool train = false;
};

struct Network {
  std::vector<Layer> layers;
  std::vector<LayerCache> cache;
  std::vector<double> probs;  // softmax output of the last loss evaluation
  std::size_t classes = 0;

  std::size_t size() const { return layers.size(); }
};

// Parameters of one layer, in a fixed order shared with gradients.
// TemplateConv: templates, each transform, bias.
inline std::vector<std::span<double>> parameter_spans(Layer& l) {
  std::vector<std::span<double>> out;
  std::visit(
      [&](auto& v) {
        using L = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<L, DenseConv>) {
          out = {v.weight.data(), v.bias};
        } else if constexpr (std::is_same_v<L, TemplateConv>) {
          out.push_back(v.layer.templates_mut().data());
          for (auto& t : v.layer.transforms_mut()) out.push_back(parameters(t));
          out.push_back(v.bias);
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          out = {v.gamma, v.beta};
        } else if constexpr (std::is_same_v<L, Linear>) {
          out = {v.weight.data(), v.bias};
        }
      },
      l);
  return out;
}

// Weight decay applies to filters, templates and linear weights only.
inline bool decays(const Layer& l, std::size_t param) {
  return param == 0 && (is_conv(l) || std::holds_alternative<Linear>(l));
}

inline std::size_t parameter_count(const Layer& l) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        using L = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<L, DenseConv> || std::is_same_v<L, Linear>) {
          return v.weight.size() + v.bias.size();
        } else if constexpr (std::is_same_v<L, TemplateConv>) {
          return v.layer.parameter_count() + v.bias.size();
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          return v.gamma.size() + v.beta.size();
        } else {
          return 0;
        }
      },
      l);
}

inline std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers) n += parameter_count(l);
  return n;
}

// Dense filters a conv layer applies: its weight or the reconstruction.
inline const Tensor4<double>& conv_filters(const Layer& l) {
  if (const auto* d = std::get_if<DenseConv>(&l)) return d->weight;
  return std::get<TemplateConv>(l).layer.reconstructed();
}

inline ConvGeometry conv_geometry(const Layer& l) {
  if (const auto* d = std::get_if<DenseConv>(&l)) return d->geom;
  return std::get<TemplateConv>(l).layer.config().dense_geom();
}

inline Shape4 output_shape(const Layer& l, const Shape4& in) {
  return std::visit(
      [&](const auto& v) -> Shape4 {
        using L = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<L, DenseConv> || std::is_same_v<L, TemplateConv>) {
          const Tensor4<double>& w = conv_filters(l);
          const ConvGeometry g = conv_geometry(l);
          if (w.shape().c != in.c) {
            throw ShapeError("channel axis: conv expects " + std::to_string(w.shape().c) +
                             " input channels, got " + std::to_string(in.c));
          }
          return {in.n, w.shape().n, g.out_h(in.h), g.out_w(in.w)};
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          if (v.gamma.size() != in.c) throw ShapeError("channel axis: batchnorm width mismatch");
          return in;
        } else if constexpr (std::is_same_v<L, MaxPool>) {
          if (in.h < v.kernel || in.w < v.kernel) throw ShapeError("maxpool window exceeds input");
          return {in.n, in.c, (in.h - v.kernel) / v.stride + 1, (in.w - v.kernel) / v.stride + 1};
        } else if constexpr (std::is_same_v<L, Flatten>) {
          return {in.n, in.c * in.h * in.w, 1, 1};
        } else if constexpr (std::is_same_v<L, Linear>) {
          if (in.h != 1 || in.w != 1 || in.c != v.weight.shape().c) {
            throw ShapeError("linear expects (n, " + std::to_string(v.weight.shape().c) +
                             ", 1, 1), got " + to_string(in));
          }
          return {in.n, v.weight.shape().n, 1, 1};
        } else {
          return in;
        }
      },
      l);
}

// Checks layer compatibility and the single trailing loss head.
inline void validate(const Network& net, const Shape4& input) {
  if (net.layers.empty() || !std::holds_alternative<SoftmaxCrossEntropy>(net.layers.back())) {
    throw std::invalid_argument("network must end with a softmax cross-entropy head");
  }
  Shape4 s = input;
  for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) {
    if (std::holds_alternative<SoftmaxCrossEntropy>(net.layers[i])) {
      throw std::invalid_argument("loss head must be the last layer");
    }
    s = output_shape(net.layers[i], s);
  }
  if (s.h != 1 || s.w != 1 || s.c != net.classes) {
    throw ShapeError("network output " + to_string(s) + " does not match " +
                     std::to_string(net.classes) + " classes");
  }
}

namespace detail {

inline void add_channel_bias(Tensor4<double>& y, const std::vector<double>& bias) {
  const Shape4 s = y.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (double& v : y.plane(n, c)) v += bias[c];
}

inline std::vector<double> channel_sums(const Tensor4<double>& t) {
  const Shape4 s = t.shape();
  std::vector<double> out(s.c, 0.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (double v : t.plane(n, c)) out[c] += v;
  return out;
}

inline Tensor4<double> conv_forward(const Tensor4<double>& w, const std::vector<double>& bias,
                                    const ConvGeometry& geom, const Tensor4<double>& x,
                                    LayerCache& cache) {
  tconv::detail::check_conv_operands(x, w, geom);
  cache.saved = gather_offsets(x, geom);
  Tensor4<double> y = conv2d_gathered(cache.saved, w, geom);
  add_channel_bias(y, bias);
  return y;
}

inline Tensor4<double> batchnorm_forward(BatchNorm& bn, const Tensor4<double>& x, bool train,
                                         LayerCache& cache) {
  const Shape4 s = x.shape();
  const double count = static_cast<double>(s.n * s.plane());
  std::vector<double> mean(s.c), var(s.c);
  if (train) {
    if (count < 2) throw ShapeError("batchnorm in train mode needs more than one value per channel");
    mean = channel_sums(x);
    for (double& m : mean) m /= count;
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (double v : x.plane(n, c)) var[c] += (v - mean[c]) * (v - mean[c]);
    for (std::size_t c = 0; c < s.c; ++c) {
      var[c] /= count;
      // Running variance tracks the unbiased estimate.
      bn.running_mean[c] = (1 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
      bn.running_var[c] =
          (1 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c] * count / (count - 1);
    }
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  cache.inv_std.resize(s.c);
  for (std::size_t c = 0; c < s.c; ++c) cache.inv_std[c] = 1 / std::sqrt(var[c] + bn.eps);
  cache.saved = Tensor4<double>(s);
  Tensor4<double> y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      auto xi = x.plane(n, c);
      auto xh = cache.saved.plane(n, c);
      auto yo = y.plane(n, c);
      for (std::size_t p = 0; p < xi.size(); ++p) {
        xh[p] = (xi[p] - mean[c]) * cache.inv_std[c];
        yo[p] = bn.gamma[c] * xh[p] + bn.beta[c];
      }
    }
  return y;
}

inline Tensor4<double> maxpool_forward(const MaxPool& mp, const Tensor4<double>& x,
                                       LayerCache& cache) {
  const Shape4 s = x.shape();
  const Shape4 o = output_shape(Layer{mp}, s);
  Tensor4<double> y(o);
  cache.argmax.assign(o.count(), 0);
  std::size_t idx = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = x.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < o.h; ++oy)
        for (std::size_t ox = 0; ox < o.w; ++ox, ++idx) {
          std::size_t best = base + oy * mp.stride * s.w + ox * mp.stride;
          for (std::size_t ky = 0; ky < mp.kernel; ++ky)
            for (std::size_t kx = 0; kx < mp.kernel; ++kx) {
              const std::size_t at = base + (oy * mp.stride + ky) * s.w + ox * mp.stride + kx;
              if (x[at] > x[best]) best = at;
            }
          cache.argmax[idx] = best;
          y[idx] = x[best];
        }
    }
  return y;
}

inline Tensor4<double> linear_forward(const Linear& lin, const Tensor4<double>& x) {
  const std::size_t out = lin.weight.shape().n, in = lin.weight.shape().c;
  Tensor4<double> y(x.shape().n, out, 1, 1);
  for (std::size_t n = 0; n < x.shape().n; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = lin.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += lin.weight[o * in + i] * x[n * in + i];
      y[n * out + o] = acc;
    }
  return y;
}

}  // namespace detail

// Runs every layer before the loss head; returns logits (n, classes, 1, 1).
// train_mode selects batch statistics in BatchNorm and updates running stats.
inline Tensor4<double> forward(Network& net, const Tensor4<double>& input, bool train_mode) {
  net.cache.resize(net.layers.size());
  Tensor4<double> x = input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerCache& cache = net.cache[i];
    cache.input_shape = x.shape();
    cache.train = train_mode;
    Layer& layer = net.layers[i];
    if (std::holds_alternative<SoftmaxCrossEntropy>(layer)) break;
    x = std::visit(
        [&](auto& v) -> Tensor4<double> {
          using L = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<L, DenseConv>) {
            return detail::conv_forward(v.weight, v.bias, v.geom, x, cache);
          } else if constexpr (std::is_same_v<L, TemplateConv>) {
            return detail::conv_forward(v.layer.reconstructed(), v.bias,
                                        v.layer.config().dense_geom(), x, cache);
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            output_shape(layer, x.shape());
            return detail::batchnorm_forward(v, x, train_mode, cache);
          } else if constexpr (std::is_same_v<L, ReLU>) {
            cache.saved = x;
            Tensor4<double> y = x;
            for (double& e : y.data()) e = std::max(e, 0.0);
            return y;
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            return detail::maxpool_forward(v, x, cache);
          } else if constexpr (std::is_same_v<L, Flatten>) {
            return x.reshaped(output_shape(layer, x.shape()));
          } else if constexpr (std::is_same_v<L, Linear>) {
            output_shape(layer, x.shape());
            cache.saved = x;
            return detail::linear_forward(v, x);
          } else {
            return x;
          }
        },
        layer);
  }
  return x;
}

struct LossResult {
  double loss = 0;
  Tensor4<double> logits;
};

// Mean softmax cross-entropy over the batch.
inline LossResult forward_loss(Network& net, const Tensor4<double>& batch,
                               std::span<const std::size_t> labels, bool train_mode) {
  if (labels.size() != batch.shape().n) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " != batch " +
                     std::to_string(batch.shape().n));
  }
  if (net.layers.empty() || !std::holds_alternative<SoftmaxCrossEntropy>(net.layers.back())) {
    throw std::invalid_argument("network must end with a softmax cross-entropy head");
  }
  LossResult r{0, forward(net, batch, train_mode)};
  const std::size_t n = r.logits.shape().n, k = r.logits.shape().c;
  if (r.logits.shape().h != 1 || r.logits.shape().w != 1) {
    throw ShapeError("loss head expects (n, classes, 1, 1) logits, got " + to_string(r.logits.shape()));
  }
  net.probs.assign(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw std::out_of_range("label " + std::to_string(labels[i]) + " >= classes");
    const double* z = &r.logits[i * k];
    const double zmax = *std::max_element(z, z + k);
    double sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) net.probs[i * k + j] = std::exp(z[j] - lse);
    r.loss += lse - z[labels[i]];
  }
  r.loss /= static_cast<double>(n);
  return r;
}

// Per-layer gradients aligned with parameter_spans, plus the gradient on the
// dense filters of every conv layer (used for first-order saliency).
struct NetGrads {
  std::vector<std::vector<std::vector<double>>> params;
  std::vector<Tensor4<double>> filters;
  Tensor4<double> input;
};

// Backward pass for the most recent forward_loss call.
inline NetGrads backward(Network& net, std::span<const std::size_t> labels) {
  const std::size_t layers = net.layers.size();
  NetGrads g;
  g.params.resize(layers);
  g.filters.resize(layers);
  const Shape4 ls = net.cache.back().input_shape;
  const std::size_t n = ls.n, k = ls.c;
  Tensor4<double> grad(ls);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      grad[i * k + j] = (net.probs[i * k + j] - (labels[i] == j ? 1.0 : 0.0)) / static_cast<double>(n);

  for (std::size_t li = layers - 1; li-- > 0;) {
    LayerCache& cache = net.cache[li];
    auto& out = g.params[li];
    grad = std::visit(
        [&](auto& v) -> Tensor4<double> {
          using L = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<L, DenseConv> || std::is_same_v<L, TemplateConv>) {
            const Tensor4<double>& w = conv_filters(net.layers[li]);
            auto cg = conv2d_backward(cache.saved, cache.input_shape, w, grad,
                                      conv_geometry(net.layers[li]), li > 0);
            const std::vector<double> db = detail::channel_sums(grad);
            if constexpr (std::is_same_v<L, DenseConv>) {
              out = {cg.weight.vector(), db};
            } else {
              auto pg = filter_grad_to_params(v.layer, cg.weight);
              out.push_back(pg.templates.vector());
              for (auto& t : pg.transforms) out.push_back(std::move(t));
              out.push_back(db);
            }
            g.filters[li] = std::move(cg.weight);
            return std::move(cg.input);
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            const Shape4 s = grad.shape();
            const double count = static_cast<double>(s.n * s.plane());
            std::vector<double> dgamma(s.c, 0.0), dbeta(s.c, 0.0);
            for (std::size_t b = 0; b < s.n; ++b)
              for (std::size_t c = 0; c < s.c; ++c) {
                auto dy = grad.plane(b, c);
                auto xh = cache.saved.plane(b, c);
                for (std::size_t p = 0; p < dy.size(); ++p) {
                  dgamma[c] += dy[p] * xh[p];
                  dbeta[c] += dy[p];
                }
              }
            Tensor4<double> dx(s);
            for (std::size_t b = 0; b < s.n; ++b)
              for (std::size_t c = 0; c < s.c; ++c) {
                auto dy = grad.plane(b, c);
                auto xh = cache.saved.plane(b, c);
                auto o = dx.plane(b, c);
                const double scale = v.gamma[c] * cache.inv_std[c];
                for (std::size_t p = 0; p < dy.size(); ++p) {
                  o[p] = cache.train
                             ? scale * (dy[p] - dbeta[c] / count - xh[p] * dgamma[c] / count)
                             : scale * dy[p];
                }
              }
            out = {std::move(dgamma), std::move(dbeta)};
            return dx;
          } else if constexpr (std::is_same_v<L, ReLU>) {
            Tensor4<double> dx = grad;
            for (std::size_t p = 0; p < dx.size(); ++p)
              if (cache.saved[p] <= 0) dx[p] = 0;
            return dx;
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            Tensor4<double> dx(cache.input_shape);
            for (std::size_t p = 0; p < grad.size(); ++p) dx[cache.argmax[p]] += grad[p];
            return dx;
          } else if constexpr (std::is_same_v<L, Flatten>) {
            return grad.reshaped(cache.input_shape);
          } else if constexpr (std::is_same_v<L, Linear>) {
            const std::size_t o_dim = v.weight.shape().n, in = v.weight.shape().c;
            const std::size_t b_dim = grad.shape().n;
            std::vector<double> dw(o_dim * in, 0.0), db(o_dim, 0.0);
            Tensor4<double> dx(cache.input_shape);
            for (std::size_t b = 0; b < b_dim; ++b)
              for (std::size_t o = 0; o < o_dim; ++o) {
                const double go = grad[b * o_dim + o];
                db[o] += go;
                for (std::size_t i = 0; i < in; ++i) {
                  dw[o * in + i] += go * cache.saved[b * in + i];
                  dx[b * in + i] += go * v.weight[o * in + i];
                }
              }
            out = {std::move(dw), std::move(db)};
            return dx;
          } else {
            return grad;
          }
        },
        net.layers[li]);
  }
  g.input = std::move(grad);
  return g;
}

inline std::size_t argmax_row(const Tensor4<double>& logits, std::size_t i) {
  const std::size_t k = logits.shape().c;
  const double* z = &logits[i * k];
  return static_cast<std::size_t>(std::max_element(z, z + k) - z);
}

// Architecture of a small CNN: conv blocks (conv, BN, ReLU, 2x2 max-pool)
// followed by a linear classifier.
struct ConvBlockSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

struct CnnSpec {
  std::size_t in_channels = 3;
  std::size_t image = 32;
  std::size_t classes = 10;
  std::vector<ConvBlockSpec> blocks;
};

// Kaiming-uniform fan-in initialisation for convs (ReLU gain), unit-gain
// fan-in bound for the classifier, zero biases, unit BN scale.
inline Network make_cnn(const CnnSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Network net;
  net.classes = spec.classes;
  Shape4 s{1, spec.in_channels, spec.image, spec.image};
  for (const auto& b : spec.blocks) {
    const double fan_in = static_cast<double>(s.c * b.kernel * b.kernel);
    const double bound = std::sqrt(6.0 / fan_in);
    DenseConv conv{random_tensor<double>({b.out_channels, s.c, b.kernel, b.kernel}, rng, -bound, bound),
                   std::vector<double>(b.out_channels, 0.0),
                   ConvGeometry::square(b.kernel, b.stride, b.padding)};
    net.layers.emplace_back(std::move(conv));
    s = output_shape(net.layers.back(), s);
    net.layers.emplace_back(BatchNorm{std::vector<double>(s.c, 1.0), std::vector<double>(s.c, 0.0),
                                      std::vector<double>(s.c, 0.0), std::vector<double>(s.c, 1.0)});
    net.layers.emplace_back(ReLU{});
    net.layers.emplace_back(MaxPool{});
    s = output_shape(net.layers.back(), s);
  }
  net.layers.emplace_back(Flatten{});
  const std::size_t features = s.c * s.h * s.w;
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  net.layers.emplace_back(Linear{random_tensor<double>({spec.classes, features, 1, 1}, rng, -bound, bound),
                                 std::vector<double>(spec.classes, 0.0)});
  net.layers.emplace_back(SoftmaxCrossEntropy{});
  validate(net, {1, spec.in_channels, spec.image, spec.image});
  return net;
}

}  // namespace tconv::nn
