#pragma once

#include <filesystem>
#include <istream>
#include <ostream>

#include "tconv/nn/network.hpp"
#include "tconv/serialize.hpp"
#include "tconv/template_conv_io.hpp"

namespace tconv::nn {

// "TCN1", u32 class count, u32 layer count, then per layer a u32 tag
// (variant index) and its payload. Conv geometry is (K, stride, padding);
// vectors are a u32 length then f64 values.
namespace detail {

inline void write_vec(std::ostream& os, const std::vector<double>& v) {
  io::write_u32(os, io::checked_u32(v.size(), "vector length"));
  for (double x : v) io::write_f64(os, x);
}

inline std::vector<double> read_vec(std::istream& is, std::size_t limit = 1u << 28) {
  const std::size_t n = io::read_u32(is);
  if (n > limit) throw FormatError("vector length " + std::to_string(n) + " is implausible");
  std::vector<double> v(n);
  for (double& x : v) x = io::read_f64(is);
  return v;
}

}  // namespace detail

inline void write_network(std::ostream& os, const Network& net) {
  io::write_magic(os, "TCN1");
  io::write_u32(os, io::checked_u32(net.classes, "classes"));
  io::write_u32(os, io::checked_u32(net.layers.size(), "layer count"));
  for (const Layer& l : net.layers) {
    io::write_u32(os, static_cast<std::uint32_t>(l.index()));
    std::visit(
        [&](const auto& v) {
          using L = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<L, DenseConv>) {
            if (v.geom.kernel_h != v.geom.kernel_w || v.geom.groups != 1) {
              throw FormatError("checkpoint stores square, ungrouped dense convolutions only");
            }
            io::write_u32(os, io::checked_u32(v.geom.stride, "stride"));
            io::write_u32(os, io::checked_u32(v.geom.padding, "padding"));
            write_tensor(os, v.weight);
            detail::write_vec(os, v.bias);
          } else if constexpr (std::is_same_v<L, TemplateConv>) {
            write_layer(os, v.layer);
            detail::write_vec(os, v.bias);
          } else if constexpr (std::is_same_v<L, BatchNorm>) {
            detail::write_vec(os, v.gamma);
            detail::write_vec(os, v.beta);
            detail::write_vec(os, v.running_mean);
            detail::write_vec(os, v.running_var);
            io::write_f64(os, v.eps);
            io::write_f64(os, v.momentum);
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            io::write_u32(os, io::checked_u32(v.kernel, "pool kernel"));
            io::write_u32(os, io::checked_u32(v.stride, "pool stride"));
          } else if constexpr (std::is_same_v<L, Linear>) {
            write_tensor(os, v.weight);
            detail::write_vec(os, v.bias);
          }
        },
        l);
  }
}

inline Network read_network(std::istream& is) {
  io::expect_magic(is, "TCN1");
  Network net;
  net.classes = io::read_u32(is);
  const std::size_t count = io::read_u32(is);
  if (count > 4096) throw FormatError("implausible layer count " + std::to_string(count));
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t tag = io::read_u32(is);
    switch (tag) {
      case 0: {
        DenseConv c;
        const std::size_t stride = io::read_u32(is);
        const std::size_t padding = io::read_u32(is);
        c.weight = read_tensor<double>(is);
        c.bias = detail::read_vec(is);
        const Shape4 ws = c.weight.shape();
        if (ws.h != ws.w || stride == 0 || c.bias.size() != ws.n) {
          throw FormatError("inconsistent convolution at layer " + std::to_string(i));
        }
        c.geom = ConvGeometry::square(ws.h, stride, padding);
        net.layers.emplace_back(std::move(c));
        break;
      }
      case 1: {
        TemplateConv t{read_layer<double>(is), {}};
        t.bias = detail::read_vec(is);
        if (t.bias.size() != t.layer.out_channels()) {
          throw FormatError("template convolution bias length mismatch at layer " + std::to_string(i));
        }
        net.layers.emplace_back(std::move(t));
        break;
      }
      case 2: {
        BatchNorm b;
        b.gamma = detail::read_vec(is);
        b.beta = detail::read_vec(is);
        b.running_mean = detail::read_vec(is);
        b.running_var = detail::read_vec(is);
        b.eps = io::read_f64(is);
        b.momentum = io::read_f64(is);
        const std::size_t c = b.gamma.size();
        if (b.beta.size() != c || b.running_mean.size() != c || b.running_var.size() != c) {
          throw FormatError("batchnorm vector lengths disagree at layer " + std::to_string(i));
        }
        net.layers.emplace_back(std::move(b));
        break;
      }
      case 3: net.layers.emplace_back(ReLU{}); break;
      case 4: {
        MaxPool p;
        p.kernel = io::read_u32(is);
        p.stride = io::read_u32(is);
        if (p.kernel == 0 || p.stride == 0) throw FormatError("bad pooling window");
        net.layers.emplace_back(p);
        break;
      }
      case 5: net.layers.emplace_back(Flatten{}); break;
      case 6: {
        Linear l;
        l.weight = read_tensor<double>(is);
        l.bias = detail::read_vec(is);
        if (l.bias.size() != l.weight.shape().n) throw FormatError("linear bias length mismatch");
        net.layers.emplace_back(std::move(l));
        break;
      }
      case 7: net.layers.emplace_back(SoftmaxCrossEntropy{}); break;
      default: throw FormatError("unknown layer tag " + std::to_string(tag));
    }
  }
  return net;
}

inline void save_network(const std::filesystem::path& p, const Network& net) {
  auto os = io::open_out(p);
  write_network(os, net);
  if (!os) throw IoError("failed writing " + p.string());
}

inline Network load_network(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  return read_network(is);
}

}  // namespace tconv::nn
