#pragma once

#include <filesystem>
#include <istream>
#include <ostream>

#include "tconv/serialize.hpp"
#include "tconv/template_conv.hpp"

namespace tconv {

// "TCL1", then little-endian u32 N, C, K, M, G, stride, padding, family tag,
// sharing flag; the M identity output indices (u32, ascending); templates;
// transform parameters in ascending output order, G per transformed output.
// Reals are little-endian f64.
template <typename T>
void write_layer(std::ostream& os, const TemplateConvLayer<T>& layer) {
  const TemplateConvConfig& cfg = layer.config();
  if (cfg.geom.kernel_h != cfg.geom.kernel_w) {
    throw FormatError("layer format stores square kernels only");
  }
  io::write_magic(os, "TCL1");
  io::write_u32(os, io::checked_u32(cfg.out_channels, "N"));
  io::write_u32(os, io::checked_u32(cfg.in_channels, "C"));
  io::write_u32(os, io::checked_u32(cfg.geom.kernel_h, "K"));
  io::write_u32(os, io::checked_u32(cfg.templates, "M"));
  io::write_u32(os, io::checked_u32(cfg.geom.groups, "G"));
  io::write_u32(os, io::checked_u32(cfg.geom.stride, "stride"));
  io::write_u32(os, io::checked_u32(cfg.geom.padding, "padding"));
  io::write_u32(os, static_cast<std::uint32_t>(cfg.family));
  io::write_u32(os, cfg.independent_group_templates ? 1u : 0u);
  for (std::size_t idx : layer.identity_outputs()) io::write_u32(os, io::checked_u32(idx, "index"));
  for (T v : layer.templates().data()) io::write_f64(os, static_cast<double>(v));
  for (const auto& t : layer.transforms())
    for (T v : parameters(t)) io::write_f64(os, static_cast<double>(v));
}

template <typename T = double>
TemplateConvLayer<T> read_layer(std::istream& is) {
  io::expect_magic(is, "TCL1");
  TemplateConvConfig cfg;
  cfg.out_channels = io::read_u32(is);
  cfg.in_channels = io::read_u32(is);
  const std::size_t k = io::read_u32(is);
  cfg.templates = io::read_u32(is);
  const std::size_t groups = io::read_u32(is);
  const std::size_t stride = io::read_u32(is);
  const std::size_t padding = io::read_u32(is);
  const std::uint32_t family = io::read_u32(is);
  const std::uint32_t sharing = io::read_u32(is);
  if (family > 2) throw FormatError("unknown transform family tag " + std::to_string(family));
  if (sharing > 1) throw FormatError("bad template sharing flag");
  if (groups == 0 || k == 0 || stride == 0 || cfg.templates == 0 ||
      cfg.templates > cfg.out_channels || cfg.in_channels % groups != 0) {
    throw FormatError("inconsistent layer header");
  }
  cfg.geom = ConvGeometry{k, k, stride, padding, groups};
  cfg.family = static_cast<TransformFamily>(family);
  cfg.independent_group_templates = sharing == 1;

  std::vector<std::size_t> ids(cfg.templates);
  for (auto& i : ids) i = io::read_u32(is);

  const KernelDims d = cfg.template_dims();
  Tensor4<T> templates(cfg.template_count(), d.c, d.h, d.w);
  for (auto& v : templates.data()) v = static_cast<T>(io::read_f64(is));

  std::vector<SpatialTransform<T>> ts((cfg.out_channels - cfg.templates) * groups,
                                      identity_transform<T>(cfg.family, k, k));
  for (auto& t : ts)
    for (auto& v : parameters(t)) v = static_cast<T>(io::read_f64(is));
  try {
    return TemplateConvLayer<T>(cfg, std::move(templates), std::move(ids), std::move(ts));
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid layer: ") + e.what());
  }
}

template <typename T>
void save_layer(const std::filesystem::path& p, const TemplateConvLayer<T>& layer) {
  auto os = io::open_out(p);
  write_layer(os, layer);
  if (!os) throw IoError("failed writing " + p.string());
}

template <typename T = double>
TemplateConvLayer<T> load_layer(const std::filesystem::path& p) {
  auto is = io::open_in(p);
  return read_layer<T>(is);
}

}  // namespace tconv
