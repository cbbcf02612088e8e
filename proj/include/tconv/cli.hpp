#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tconv/bench.hpp"
#include "tconv/cost_model.hpp"
#include "tconv/equivalence.hpp"
#include "tconv/nn/checkpoint.hpp"
#include "tconv/nn/train.hpp"
#include "tconv/pruning.hpp"
#include "tconv/viz.hpp"

namespace tconv::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3 };

// Bad flags, config keys or values.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kEquivTolerance = 1e-9;

// Every accepted key with its default. The default's JSON type fixes the
// accepted type; each key is also a flag (--min-templates for min_templates).
inline json global_defaults() {
  return {{"seed", 1}, {"threads", 1}, {"out", "tconv_out"}, {"precision", "f64"}};
}

inline json data_defaults() {
  return {{"synthetic", false},      {"data", ""},   {"synthetic_classes", 4},
          {"synthetic_samples", 2048}, {"max_items", 0}, {"image", 32},
          {"batch", 64}};
}

inline json architecture_defaults() {
  return {{"widths", {8, 16, 16}}, {"first_stride", 2}, {"kernel", 3}, {"classes", 4}};
}

inline json conversion_defaults() {
  return {{"rate", 0.5},
          {"min_templates", 8},
          {"family", "scalar"},
          {"groups", 1},
          {"independent_group_templates", false},
          {"measure", "mag"}};
}

inline json merged(std::initializer_list<json> parts) {
  json out = json::object();
  for (const auto& p : parts)
    for (const auto& [k, v] : p.items()) out[k] = v;
  return out;
}

inline const std::map<std::string, std::string>& command_help() {
  static const std::map<std::string, std::string> help = {
      {"equiv-check", "Compare two-stage and reference template convolution on random configurations"},
      {"train", "Train a small CNN with scheduled template conversion"},
      {"prune", "One-shot conversion of a checkpoint to template layers"},
      {"bench", "Time dense and two-stage forward passes across pruning rates"},
      {"cost-report", "Per-layer MAC and parameter report"},
      {"viz-filters", "Render original, reconstructed and pruned filters as PGM images"}};
  return help;
}

inline json command_defaults(const std::string& cmd) {
  const json g = global_defaults();
  if (cmd == "equiv-check") return merged({g, {{"configs", 200}, {"inject_fault", false}}});
  if (cmd == "train") {
    return merged({g, data_defaults(), architecture_defaults(), conversion_defaults(),
                   {{"rate", 0.0},
                    {"ramp_epochs", 40},
                    {"epochs", 10},
                    {"lr", 0.05},
                    {"momentum", 0.9},
                    {"weight_decay", 5e-4},
                    {"lr_decay_epochs", json::array()},
                    {"lr_decay_factor", 0.1},
                    {"augment_flip", false},
                    {"augment_crop", false},
                    {"augment_rotate", false},
                    {"validation", true}}});
  }
  if (cmd == "prune") {
    return merged({g, data_defaults(), conversion_defaults(), {{"checkpoint", ""}, {"probe_batch", 4}}});
  }
  if (cmd == "bench") {
    return merged({g,
                   {{"precision", "f32"},
                    {"rates", {0.25, 0.5, 0.7, 0.9}},
                    {"in_channels", 64},
                    {"out_channels", 64},
                    {"kernel", 3},
                    {"image", 32},
                    {"batch", 1},
                    {"min_templates", 8},
                    {"reps", 7},
                    {"warmup", 2}}});
  }
  if (cmd == "cost-report" || cmd == "viz-filters") {
    json c = merged({g, architecture_defaults(), conversion_defaults(),
                     {{"checkpoint", ""}, {"image", 32}, {"rate", cmd == "viz-filters" ? 0.5 : 0.0}}});
    c.erase("measure");
    if (cmd == "viz-filters") c["channel"] = 0;
    return c;
  }
  throw UsageError("unknown command " + cmd);
}

namespace detail {

inline bool integer_array(const std::string& key) { return key == "widths" || key == "lr_decay_epochs"; }

inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

// A file or flag value must have the type of the key's default.
inline void check_type(const std::string& key, const json& def, const json& v) {
  bool ok = false;
  if (def.is_boolean()) ok = v.is_boolean();
  else if (def.is_number_integer()) ok = is_count(v);
  else if (def.is_number()) ok = v.is_number();
  else if (def.is_string()) ok = v.is_string();
  else if (def.is_array()) {
    ok = v.is_array();
    for (const auto& e : v) ok = ok && (integer_array(key) ? is_count(e) : e.is_number());
  }
  if (!ok) throw UsageError("config key '" + key + "' has the wrong type: " + v.dump());
}

inline json parse_count(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw UsageError("--" + key + " expects a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline json parse_number(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError("--" + key + " expects a number, got '" + s + "'");
  return v;
}

// Flag text to JSON, typed by the key's default.
inline json flag_value(const std::string& key, const json& def, const std::string& s) {
  if (def.is_number_integer()) return parse_count(key, s);
  if (def.is_number()) return parse_number(key, s);
  if (def.is_string()) return s;
  json arr = json::array();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    arr.push_back(integer_array(key) ? parse_count(key, item) : parse_number(key, item));
  return arr;
}

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

inline json load_config_file(const fs::path& p, const std::string& cmd, const json& defaults) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read config " + p.string());
  json file;
  try {
    file = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + p.string() + " is not valid JSON: " + e.what());
  }
  if (!file.is_object()) throw UsageError("config " + p.string() + " must hold a JSON object");
  for (const auto& [k, v] : file.items()) {
    if (k == "command") {
      if (v != cmd) throw UsageError("config was written for command " + v.dump() + ", not " + cmd);
      continue;
    }
    if (!defaults.contains(k)) throw UsageError("unknown config key '" + k + "' for " + cmd);
    check_type(k, defaults[k], v);
  }
  file.erase("command");
  return file;
}

}  // namespace detail

// Typed reads from a resolved config.
struct Config {
  std::string command;
  json values;

  std::size_t count(const char* k) const { return values.at(k).get<std::size_t>(); }
  double number(const char* k) const { return values.at(k).get<double>(); }
  std::string text(const char* k) const { return values.at(k).get<std::string>(); }
  bool flag(const char* k) const { return values.at(k).get<bool>(); }
  fs::path out() const { return text("out"); }

  TransformFamily family() const {
    try {
      return parse_family(text("family"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  SaliencyMeasure measure() const {
    try {
      return parse_measure(text("measure"));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  double rate() const {
    const double r = number("rate");
    if (!(r >= 0 && r < 1)) throw UsageError("rate must lie in [0, 1)");
    return r;
  }
  std::size_t positive(const char* k) const {
    const std::size_t v = count(k);
    if (v == 0) throw UsageError(std::string(k) + " must be positive");
    return v;
  }
};

inline void write_resolved(const Config& c) {
  fs::create_directories(c.out());
  json doc = {{"command", c.command}};
  for (const auto& [k, v] : c.values.items()) doc[k] = v;
  auto os = io::open_out(c.out() / "resolved_config.json");
  os << doc.dump(2) << '\n';
}

// ---- shared pieces -------------------------------------------------------

inline nn::CnnSpec architecture(const Config& c, std::size_t in_channels, std::size_t image) {
  nn::CnnSpec spec;
  spec.in_channels = in_channels;
  spec.image = image;
  spec.classes = c.count("classes");
  const std::size_t k = c.positive("kernel");
  if (k % 2 == 0) throw UsageError("kernel must be odd");
  const auto widths = c.values.at("widths").get<std::vector<std::size_t>>();
  if (widths.empty()) throw UsageError("widths must list at least one conv width");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) throw UsageError("conv widths must be positive");
    spec.blocks.push_back({widths[i], k, i == 0 ? c.positive("first_stride") : 1, k / 2});
  }
  if (spec.classes < 2) throw UsageError("classes must be at least 2");
  return spec;
}

struct TrainingData {
  nn::Dataset train;
  std::optional<nn::Dataset> validation;
};

inline TrainingData load_data(const Config& c, bool want_validation) {
  const std::optional<std::size_t> limit =
      c.count("max_items") ? std::optional<std::size_t>(c.count("max_items")) : std::nullopt;
  TrainingData d;
  if (c.flag("synthetic")) {
    const std::size_t classes = c.count("synthetic_classes"), n = c.positive("synthetic_samples");
    if (classes < 2) throw UsageError("synthetic_classes must be at least 2");
    const std::uint64_t seed = c.count("seed");
    d.train = nn::make_synthetic_dataset(classes, limit ? std::min(n, *limit) : n, seed, c.positive("image"));
    if (want_validation) {
      d.validation = nn::make_synthetic_dataset(classes, std::max(n / 4, classes), seed ^ 0x5eed5eedULL,
                                                c.positive("image"));
    }
    return d;
  }
  if (c.text("data").empty()) throw UsageError("pass --synthetic or --data <cifar-10 binary dir>");
  d.train = nn::load_cifar10_dir(c.text("data"), true, limit);
  if (want_validation) d.validation = nn::load_cifar10_dir(c.text("data"), false, limit);
  return d;
}

// Dense-equivalent filters of every conv layer, keyed by layer id.
inline std::map<std::size_t, Tensor4<double>> conv_filter_map(const nn::Network& net) {
  std::map<std::size_t, Tensor4<double>> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (nn::is_conv(net.layers[i])) out.emplace(i, nn::conv_filters(net.layers[i]));
  return out;
}

inline Shape4 input_shape(const nn::Network& net, std::size_t image, std::size_t batch = 1) {
  for (const auto& l : net.layers)
    if (nn::is_conv(l)) return {batch, nn::conv_filters(l).shape().c, image, image};
  throw FormatError("network has no convolution layer");
}

// Network from --checkpoint, or a freshly initialised one from the
// architecture keys.
inline nn::Network source_network(const Config& c) {
  if (!c.text("checkpoint").empty()) return nn::load_network(c.text("checkpoint"));
  return nn::make_cnn(architecture(c, 3, c.positive("image")), c.count("seed"));
}

inline PruneSchedule one_shot(const Config& c) { return PruneSchedule{c.rate(), 0, c.count("min_templates")}; }

// Filter gradients summed over one pass of the data, on a copy so running
// statistics stay untouched.
inline std::vector<Tensor4<double>> taylor_gradients(const nn::Network& net, const nn::Dataset& data,
                                                     std::size_t batch) {
  nn::Network work = net;
  std::vector<Tensor4<double>> acc(net.layers.size());
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start + 1 < idx.size(); start += batch) {
    std::span<const std::size_t> part(idx.data() + start, std::min(batch, idx.size() - start));
    const auto labels = nn::gather_labels(data, part);
    nn::forward_loss(work, nn::gather_images(data, part), labels, true);
    auto g = nn::backward(work, labels);
    for (std::size_t i = 0; i < g.filters.size(); ++i) {
      if (g.filters[i].size() == 0) continue;
      if (acc[i].size() == 0) {
        acc[i] = std::move(g.filters[i]);
      } else {
        for (std::size_t k = 0; k < acc[i].size(); ++k) acc[i][k] += g.filters[i][k];
      }
    }
  }
  return acc;
}

// ---- commands ------------------------------------------------------------

inline int cmd_equiv_check(const Config& c, std::ostream& out) {
  const std::size_t configs = c.positive("configs");
  const std::uint64_t seed = c.count("seed");
  const bool fault = c.flag("inject_fault");
  auto csv = io::open_out(c.out() / "equiv.csv");
  csv << "seed,config,deviation\n" << std::setprecision(6);
  out << std::setprecision(3);
  double worst = 0;
  std::optional<EquivResult> first_failure;
  for (std::size_t i = 0; i < configs; ++i) {
    const EquivResult r = run_equiv_case(seed + i, fault);
    csv << r.seed << ",\"" << describe(r.config) << "\"," << r.deviation << '\n';
    out << "seed " << r.seed << "  " << describe(r.config) << "  deviation " << r.deviation << '\n';
    worst = std::max(worst, r.deviation);
    if (!(r.deviation <= kEquivTolerance) && !first_failure) first_failure = r;
  }
  out << "max deviation " << worst << " over " << configs << " configurations (tolerance "
      << kEquivTolerance << ")\n";
  if (first_failure) {
    out << "FAIL first failing configuration: seed " << first_failure->seed << " ("
        << describe(first_failure->config) << "); reproduce with: tconv equiv-check --configs 1 --seed "
        << first_failure->seed << (fault ? " --inject-fault" : "") << '\n';
    return kFailure;
  }
  out << "OK\n";
  return kOk;
}

inline int cmd_train(const Config& c, std::ostream& out) {
  nn::TrainConfig tc;
  tc.epochs = c.positive("epochs");
  tc.batch = c.count("batch");
  if (tc.batch < 2) throw UsageError("batch must be at least 2");
  tc.seed = c.count("seed");
  tc.sgd.lr = c.number("lr");
  tc.sgd.momentum = c.number("momentum");
  tc.sgd.weight_decay = c.number("weight_decay");
  tc.sgd.decay_epochs = c.values.at("lr_decay_epochs").get<std::vector<std::size_t>>();
  tc.sgd.decay_factor = c.number("lr_decay_factor");
  tc.augment = nn::AugmentFlags{c.flag("augment_flip"), c.flag("augment_crop"), c.flag("augment_rotate")};
  tc.schedule = PruneSchedule{c.rate(), c.count("ramp_epochs"), c.count("min_templates")};
  tc.measure = c.measure();
  tc.family = c.family();
  tc.groups = c.positive("groups");
  tc.independent_group_templates = c.flag("independent_group_templates");

  const TrainingData data = load_data(c, c.flag("validation"));
  const Shape4 s = data.train.images.shape();
  nn::CnnSpec spec = architecture(c, s.c, s.h);
  spec.classes = data.train.classes;
  nn::Network net = nn::make_cnn(spec, tc.seed);

  auto csv = io::open_out(c.out() / "metrics.csv");
  csv << std::setprecision(10);
  nn::write_metrics_header(csv);
  out << std::fixed << std::setprecision(4);
  nn::train(net, data.train, tc, data.validation ? &*data.validation : nullptr,
            [&](const nn::EpochMetrics& m) {
              nn::write_metrics_row(csv, m);
              csv.flush();
              out << "epoch " << m.epoch << "  loss " << m.train_loss << "  train_acc " << m.train_acc
                  << "  val_acc " << m.val_acc << "  macs " << m.total_macs << "  templates";
              for (auto t : m.templates) out << ' ' << t;
              out << '\n';
            });
  nn::save_network(c.out() / "checkpoint.tcn", net);
  out << "final train accuracy (eval mode) " << nn::evaluate(net, data.train) << '\n';
  out << "wrote " << (c.out() / "metrics.csv").string() << " and " << (c.out() / "checkpoint.tcn").string()
      << '\n';
  return kOk;
}

inline void print_totals(std::ostream& out, const char* label, const CostReport& r) {
  out << label << ": macs " << r.compressed_total.macs + r.other_macs << "  params "
      << r.compressed_total.params + r.other_params << '\n';
}

inline int cmd_prune(const Config& c, std::ostream& out) {
  if (c.text("checkpoint").empty()) throw UsageError("prune needs --checkpoint");
  nn::Network net = nn::load_network(c.text("checkpoint"));
  const std::size_t image = c.positive("image");
  const Shape4 probe_shape = input_shape(net, image, c.positive("probe_batch"));
  const Shape4 one{1, probe_shape.c, image, image};
  nn::validate(net, one);
  const CostReport before = network_report(net, one);

  std::vector<Tensor4<double>> grads;
  if (c.measure() == SaliencyMeasure::TaylorFO) {
    const TrainingData data = load_data(c, false);
    if (data.train.images.shape().c != one.c || data.train.images.shape().h != image) {
      throw UsageError("data shape does not match the checkpoint input");
    }
    grads = taylor_gradients(net, data.train, std::max<std::size_t>(c.count("batch"), 2));
  }
  Rng rng(c.count("seed"));
  const auto probe = random_tensor<double>(probe_shape, rng);
  const auto logits_before = nn::forward(net, probe, false);

  const PruningPlan plan = build_plan(net, c.measure(), 0, one_shot(c), grads.empty() ? nullptr : &grads);
  apply_plan(net, plan, c.family(), c.positive("groups"), c.flag("independent_group_templates"));
  const auto logits_after = nn::forward(net, probe, false);
  const CostReport after = network_report(net, one);

  save_plan(c.out() / "plan.txt", plan);
  nn::save_network(c.out() / "pruned.tcn", net);
  for (const auto& e : plan.entries) {
    out << "layer " << e.layer_id << "  templates " << e.templates << "  kept";
    for (auto k : e.kept) out << ' ' << k;
    out << '\n';
  }
  print_totals(out, "before", before);
  print_totals(out, "after ", after);
  out << "conv flops ratio " << after.flops_ratio() << "  conv params ratio " << after.params_ratio() << '\n';
  out << std::setprecision(3) << "probe max deviation " << max_abs_diff(logits_before, logits_after) << '\n';
  return kOk;
}

inline int cmd_bench(const Config& c, std::ostream& out) {
  BenchConfig b;
  b.in_channels = c.positive("in_channels");
  b.out_channels = c.positive("out_channels");
  b.kernel = c.positive("kernel");
  b.image = c.positive("image");
  b.batch = c.positive("batch");
  b.rates = c.values.at("rates").get<std::vector<double>>();
  for (double r : b.rates)
    if (!(r >= 0 && r < 1)) throw UsageError("bench rates must lie in [0, 1)");
  b.min_templates = c.count("min_templates");
  b.reps = c.count("reps");
  if (b.reps < 5) throw UsageError("reps must be at least 5");
  b.warmup = c.count("warmup");
  b.seed = c.count("seed");
  const auto rows = c.text("precision") == "f32" ? run_benchmark<float>(b) : run_benchmark<double>(b);
  auto csv = io::open_out(c.out() / "bench.csv");
  write_bench_csv(csv, rows);
  out << std::fixed << std::setprecision(1);
  out << "rate   impl        M    median_us      p10      p90   gather  template  transform\n";
  for (const auto& r : rows)
    out << std::setprecision(2) << std::setw(4) << r.rate << std::setprecision(1) << "  "
        << std::left << std::setw(10) << r.impl << std::right << std::setw(4)
        << r.templates << std::setw(12) << r.median_us << std::setw(9) << r.p10 << std::setw(9) << r.p90
        << std::setw(9) << r.stage_gather << std::setw(10) << r.stage_template << std::setw(11)
        << r.stage_transform << '\n';
  return kOk;
}

inline int cmd_cost_report(const Config& c, std::ostream& out) {
  nn::Network net = source_network(c);
  const Shape4 one = input_shape(net, c.positive("image"));
  nn::validate(net, one);
  if (c.rate() > 0) {
    apply_plan(net, build_plan(net, SaliencyMeasure::Magnitude, 0, one_shot(c)), c.family(),
               c.positive("groups"), c.flag("independent_group_templates"));
  }
  const CostReport r = network_report(net, one);
  auto csv = io::open_out(c.out() / "cost_report.csv");
  write_report_csv(csv, r);
  write_report_table(out, r);
  return kOk;
}

inline int cmd_viz_filters(const Config& c, std::ostream& out) {
  nn::Network net = source_network(c);
  const Shape4 one = input_shape(net, c.positive("image"));
  nn::validate(net, one);
  const auto originals = conv_filter_map(net);
  apply_plan(net, build_plan(net, SaliencyMeasure::Magnitude, 0, one_shot(c)), c.family(),
             c.positive("groups"), c.flag("independent_group_templates"));
  const std::size_t channel = c.count("channel");
  auto csv = io::open_out(c.out() / "filters.csv");
  bool header = true;
  for (std::size_t id : prunable_layers(net)) {
    const Tensor4<double>& w = originals.at(id);
    if (channel >= w.shape().c) throw UsageError("channel out of range for layer " + std::to_string(id));
    const auto* t = std::get_if<nn::TemplateConv>(&net.layers[id]);
    const FilterVariants v = t ? filter_variants(w, t->layer) : FilterVariants{w, w, w};
    const RenderedVariants img = render_variants(v, channel);
    const GrayImage* views[] = {&img.original, &img.reconstructed, &img.zeroed};
    for (std::size_t k = 0; k < 3; ++k) {
      const fs::path p = c.out() / ("layer" + std::to_string(id) + "_" + kVariantNames[k] + ".pgm");
      auto os = io::open_out(p);
      write_pgm(os, *views[k]);
    }
    write_filter_values_csv(csv, v, id, channel, header);
    header = false;
    out << "layer " << id << "  " << (t ? "template_conv" : "conv") << "  filters " << w.shape().n
        << "  templates " << current_kept(net.layers[id]).size() << "  image " << img.original.cols << "x"
        << img.original.rows << '\n';
  }
  return kOk;
}

// ---- entry point -----------------------------------------------------------

inline int dispatch(const Config& c, std::ostream& out) {
  if (c.command == "equiv-check") return cmd_equiv_check(c, out);
  if (c.command == "train") return cmd_train(c, out);
  if (c.command == "prune") return cmd_prune(c, out);
  if (c.command == "bench") return cmd_bench(c, out);
  if (c.command == "cost-report") return cmd_cost_report(c, out);
  return cmd_viz_filters(c, out);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Template-filter convolution toolkit", "tconv"};
  app.require_subcommand(1);

  struct Command {
    CLI::App* app = nullptr;
    json defaults;
    std::string config_path;
    std::map<std::string, std::string> text;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Command> commands;
  for (const auto& [name, help] : command_help()) {
    Command& cmd = commands[name];
    cmd.app = app.add_subcommand(name, help);
    cmd.defaults = command_defaults(name);
    cmd.app->add_option("--config", cmd.config_path, "JSON config file; flags override its values");
    for (const auto& [key, def] : cmd.defaults.items()) {
      const std::string desc = "default " + def.dump();
      if (def.is_boolean()) {
        cmd.options[key] = cmd.app->add_flag(detail::flag_name(key), cmd.flags[key], desc);
      } else {
        cmd.options[key] = cmd.app->add_option(detail::flag_name(key), cmd.text[key], desc);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    for (auto& [name, cmd] : commands) {
      if (!cmd.app->parsed()) continue;
      json values = cmd.defaults;
      if (!cmd.config_path.empty()) {
        const json file = detail::load_config_file(cmd.config_path, name, cmd.defaults);
        for (const auto& [k, v] : file.items()) values[k] = v;
      }
      for (const auto& [key, opt] : cmd.options) {
        if (opt->count() == 0) continue;
        values[key] = cmd.defaults[key].is_boolean() ? json(cmd.flags[key])
                                                     : detail::flag_value(key, cmd.defaults[key], cmd.text[key]);
      }
      Config c{name, values};
      const std::string precision = c.text("precision");
      if (precision != "f64" && precision != "f32") throw UsageError("precision must be f32 or f64");
      if (precision == "f32" && name != "bench") throw UsageError("precision f32 is only supported by bench");
      set_num_threads(static_cast<unsigned>(c.positive("threads")));
      write_resolved(c);
      return dispatch(c, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    err << "I/O error: malformed input: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace tconv::cli
