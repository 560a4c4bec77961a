// SPDX-License-Identifier: Apache-2.0
#include "gmnet/arch.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gmnet {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t parse_count(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || out == 0) {
    throw std::invalid_argument("setting " + std::string(key) + " needs a positive integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(std::string(v), &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("setting " + std::string(key) + " needs a number, got '" + std::string(v) + "'");
  }
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in))));
}

void require_rank4_channels(const Shape& in, std::size_t c, const std::string& block) {
  if (in.size() != 4) throw std::invalid_argument(block + ": expected (N,C,H,W) input, got " + shape_str(in));
  if (in[1] != c) {
    throw std::invalid_argument(block + ": expected " + std::to_string(c) + " input channels, got " + shape_str(in));
  }
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::GMNet ? "gmnet" : "baseline"; }

std::string to_string(Connection c) {
  switch (c) {
    case Connection::Dense: return "A";
    case Connection::Straight: return "B";
    case Connection::None: return "none";
  }
  return "?";
}

std::string to_string(Merge m) { return m == Merge::Sum ? "sum" : "concat"; }

std::string to_string(BottleneckGrouping b) { return b == BottleneckGrouping::Unit ? "unit" : "ungrouped"; }

std::string to_string(UnitKind k) {
  switch (k) {
    case UnitKind::Input: return "BU_i";
    case UnitKind::Full: return "BU_f";
    case UnitKind::Single: return "BU_s";
    case UnitKind::End: return "BU_e";
    case UnitKind::Middle: return "BU_m";
  }
  return "?";
}

GroupProfile group_profile(std::string_view name) {
  GroupProfile p;
  if (name == "8+4") return p;
  if (name == "8+2") {
    p.adaption = 2;
    return p;
  }
  if (name == "4+4") {
    p.bu_i = p.bu_m = p.bu_e = 4;
    return p;
  }
  if (name == "8+4&16+8") {
    p.conv_channels_per_group = 8;
    p.adaption_channels_per_group = 16;
    return p;
  }
  if (name == "none") {
    p.bu_i = p.bu_m = p.bu_e = p.adaption = p.tail = 1;
    return p;
  }
  if (name == "block1") {
    p.bu_e = p.tail = 1;
    return p;
  }
  if (name == "block3") {
    p.bu_i = p.bu_i_adaption = 1;
    return p;
  }
  throw std::invalid_argument("unknown group profile '" + std::string(name) +
                              "' (expected 8+4, 8+2, 4+4, 8+4&16+8, none, block1 or block3)");
}

void apply_spec_setting(ModelSpec& spec, std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  if (key == "variant") {
    if (v == "gmnet") spec.variant = Variant::GMNet;
    else if (v == "baseline") spec.variant = Variant::Baseline;
    else throw std::invalid_argument("variant must be gmnet or baseline, got '" + v + "'");
  } else if (key == "connection") {
    if (v == "A" || v == "a" || v == "dense") spec.connection = Connection::Dense;
    else if (v == "B" || v == "b" || v == "straight") spec.connection = Connection::Straight;
    else if (v == "none") spec.connection = Connection::None;
    else throw std::invalid_argument("connection must be A, B or none, got '" + v + "'");
  } else if (key == "merge") {
    if (v == "sum") spec.merge = Merge::Sum;
    else if (v == "concat") spec.merge = Merge::Concat;
    else throw std::invalid_argument("merge must be sum or concat, got '" + v + "'");
  } else if (key == "bottleneck") {
    if (v == "unit") spec.bottleneck = BottleneckGrouping::Unit;
    else if (v == "ungrouped") spec.bottleneck = BottleneckGrouping::Ungrouped;
    else throw std::invalid_argument("bottleneck must be unit or ungrouped, got '" + v + "'");
  } else if (key == "width") {
    spec.width = parse_real(key, v);
    if (!(spec.width > 0.0)) throw std::invalid_argument("width multiplier must be > 0");
  } else if (key == "dropout_keep") {
    spec.dropout_keep = parse_real(key, v);
    if (!(spec.dropout_keep > 0.0 && spec.dropout_keep <= 1.0)) {
      throw std::invalid_argument("dropout_keep must lie in (0,1]");
    }
  } else if (key == "num_classes") {
    spec.num_classes = parse_count(key, v);
  } else if (key == "in_channels") {
    spec.in_channels = parse_count(key, v);
  } else if (key == "dataset") {
    if (v == "mnist") {
      spec.in_channels = 1;
      spec.num_classes = 10;
    } else if (v == "cifar10") {
      spec.in_channels = 3;
      spec.num_classes = 10;
    } else if (v == "cifar100") {
      spec.in_channels = 3;
      spec.num_classes = 100;
    } else {
      throw std::invalid_argument("dataset must be mnist, cifar10 or cifar100, got '" + v + "'");
    }
    spec.dataset = v;
  } else if (key == "groups.profile") {
    spec.groups = group_profile(v);
  } else if (key == "groups.bu_i") {
    spec.groups.bu_i = parse_count(key, v);
  } else if (key == "groups.bu_m") {
    spec.groups.bu_m = parse_count(key, v);
  } else if (key == "groups.bu_e") {
    spec.groups.bu_e = parse_count(key, v);
  } else if (key == "groups.adaption") {
    spec.groups.adaption = parse_count(key, v);
  } else if (key == "groups.tail") {
    spec.groups.tail = parse_count(key, v);
  } else if (key == "groups.bu_i_adaption") {
    spec.groups.bu_i_adaption = parse_count(key, v);
  } else if (key == "groups.conv_channels_per_group") {
    spec.groups.conv_channels_per_group = parse_count(key, v);
  } else if (key == "groups.adaption_channels_per_group") {
    spec.groups.adaption_channels_per_group = parse_count(key, v);
  } else {
    throw std::invalid_argument("unknown model setting '" + std::string(key) + "'");
  }
}

ModelSpec parse_model_spec(std::string_view text) {
  ModelSpec spec;
  apply_model_config(spec, text);
  return spec;
}

void apply_model_config(ModelSpec& spec, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    try {
      apply_spec_setting(spec, trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string format_model_spec(const ModelSpec& spec) {
  std::ostringstream os;
  os << "dataset=" << spec.dataset << '\n'
     << "variant=" << to_string(spec.variant) << '\n'
     << "connection=" << to_string(spec.connection) << '\n'
     << "merge=" << to_string(spec.merge) << '\n'
     << "bottleneck=" << to_string(spec.bottleneck) << '\n'
     << "width=" << spec.width << '\n'
     << "dropout_keep=" << spec.dropout_keep << '\n'
     << "num_classes=" << spec.num_classes << '\n'
     << "in_channels=" << spec.in_channels << '\n'
     << "groups.bu_i=" << spec.groups.bu_i << '\n'
     << "groups.bu_m=" << spec.groups.bu_m << '\n'
     << "groups.bu_e=" << spec.groups.bu_e << '\n'
     << "groups.adaption=" << spec.groups.adaption << '\n'
     << "groups.tail=" << spec.groups.tail << '\n';
  if (spec.groups.bu_i_adaption) os << "groups.bu_i_adaption=" << spec.groups.bu_i_adaption << '\n';
  if (spec.groups.conv_channels_per_group) {
    os << "groups.conv_channels_per_group=" << spec.groups.conv_channels_per_group << '\n';
  }
  if (spec.groups.adaption_channels_per_group) {
    os << "groups.adaption_channels_per_group=" << spec.groups.adaption_channels_per_group << '\n';
  }
  return os.str();
}

// ---- ConvBnRelu -------------------------------------------------------------

template <typename T>
ConvBnRelu<T>::ConvBnRelu(Registry<T>& reg, std::string name, std::size_t c, std::size_t o, std::size_t k,
                          std::size_t groups)
    : Block<T>(std::move(name)), c_(c), o_(o), k_(k), geo_{groups, 1, k / 2}, bn_(o) {
  try {
    (void)count_conv_params(k, c, o, groups, false);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(this->name() + ": " + e.what());
  }
  weight_ = parameter(he_normal<T>({o, c / groups, k, k}, (c / groups) * k * k, reg.init_rng));
  reg.params.add(this->name() + ".weight", weight_);
  reg.params.add(this->name() + ".bn.gamma", bn_.gamma);
  reg.params.add(this->name() + ".bn.beta", bn_.beta);
  reg.batch_norms.emplace_back(this->name() + ".bn", &bn_);
  reg.convs.push_back(ConvRecord{this->name(), k, c, o, groups, false, weight_->value.numel()});
  reg.taps.push_back(this->name());
}

template <typename T>
Var<T> ConvBnRelu<T>::forward(const Var<T>& x, RunContext<T>& ctx) {
  auto y = relu(batch_norm(conv2d<T>(x, weight_, nullptr, geo_), bn_, ctx.mode));
  ctx.record(this->name(), y);
  return y;
}

template <typename T>
Shape ConvBnRelu<T>::trace(const Shape& in) const {
  require_rank4_channels(in, c_, this->name());
  try {
    return {in[0], o_, conv_output_extent(in[2], k_, geo_.stride, geo_.padding),
            conv_output_extent(in[3], k_, geo_.stride, geo_.padding)};
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(this->name() + ": " + e.what());
  }
}

// ---- ConvUnit ---------------------------------------------------------------

template <typename T>
ConvUnit<T>::ConvUnit(Registry<T>& reg, std::string name, const ConvUnitCfg& cfg) : Block<T>(std::move(name)), cfg_(cfg) {
  if (cfg.in_ch == 0 || cfg.mid_ch == 0 || cfg.out_ch == 0) {
    throw std::invalid_argument(this->name() + ": channel counts must be positive");
  }
  if (cfg.out_ch % cfg.groups_3x3 != 0 || cfg.mid_ch % cfg.groups_3x3 != 0) {
    throw std::invalid_argument(this->name() + ": 3x3 groups g=" + std::to_string(cfg.groups_3x3) +
                                " must divide mid=" + std::to_string(cfg.mid_ch) + " and out=" +
                                std::to_string(cfg.out_ch));
  }
  pointwise_ = std::make_unique<ConvBnRelu<T>>(reg, this->name() + ".conv1x1", cfg.in_ch, cfg.mid_ch, 1, cfg.groups_1x1);
  spatial_ = std::make_unique<ConvBnRelu<T>>(reg, this->name() + ".conv3x3", cfg.mid_ch, cfg.out_ch, 3, cfg.groups_3x3);
  reg.taps.push_back(this->name());
}

template <typename T>
Var<T> ConvUnit<T>::forward(const Var<T>& x, RunContext<T>& ctx) {
  auto y = spatial_->forward(pointwise_->forward(x, ctx), ctx);
  ctx.record(this->name(), y);
  return y;
}

template <typename T>
Shape ConvUnit<T>::trace(const Shape& in) const {
  return spatial_->trace(pointwise_->trace(in));
}

// ---- AdaptionUnit -----------------------------------------------------------

template <typename T>
AdaptionUnit<T>::AdaptionUnit(Registry<T>& reg, std::string name, const AdaptionUnitCfg& cfg)
    : Block<T>(std::move(name)), cfg_(cfg) {
  if (cfg.kernel != 1 && cfg.kernel != 3) {
    throw std::invalid_argument(this->name() + ": adaption kernel must be 1 or 3, got " + std::to_string(cfg.kernel));
  }
  conv_ = std::make_unique<ConvBnRelu<T>>(reg, this->name() + ".conv", cfg.in_ch, cfg.out_ch, cfg.kernel, cfg.groups);
  reg.taps.push_back(this->name());
}

template <typename T>
Var<T> AdaptionUnit<T>::forward(const Var<T>& x, RunContext<T>& ctx) {
  auto y = avg_pool2d(conv_->forward(x, ctx), 2, 2);
  ctx.record(this->name(), y);
  return y;
}

template <typename T>
Shape AdaptionUnit<T>::trace(const Shape& in) const {
  Shape s = conv_->trace(in);
  if (s[2] < 2 || s[3] < 2) {
    throw std::invalid_argument(this->name() + ": 2x2 pooling needs spatial size >= 2, got " + shape_str(s));
  }
  s[2] = (s[2] - 2) / 2 + 1;
  s[3] = (s[3] - 2) / 2 + 1;
  return s;
}

// ---- BasicUnit --------------------------------------------------------------

template <typename T>
BasicUnit<T>::BasicUnit(Registry<T>& reg, std::string name, Parts parts) : Block<T>(std::move(name)), parts_(std::move(parts)) {
  const std::string& n = this->name();
  if (parts_.stages.size() != 3) {
    throw std::invalid_argument(n + ": a basic unit has exactly three stages, got " + std::to_string(parts_.stages.size()));
  }
  auto chain_check = [&n](const Block<T>& from, const Block<T>& to) {
    if (from.out_channels() != to.in_channels()) {
      throw std::invalid_argument(n + ": " + from.name() + " emits " + std::to_string(from.out_channels()) +
                                  " channels but " + to.name() + " expects " + std::to_string(to.in_channels()));
    }
  };
  for (std::size_t i = 0; i + 1 < parts_.entry.size(); ++i) chain_check(*parts_.entry[i], *parts_.entry[i + 1]);
  if (!parts_.entry.empty()) chain_check(*parts_.entry.back(), *parts_.stages.front());
  for (std::size_t i = 0; i + 1 < 3; ++i) chain_check(*parts_.stages[i], *parts_.stages[i + 1]);

  if (parts_.connection != Connection::None) {
    // Summation joins need equal shapes: every stage must emit the same width.
    for (const auto& s : parts_.stages) {
      if (s->out_channels() != parts_.stages.front()->out_channels()) {
        throw std::invalid_argument(n + ": " + to_string(parts_.connection) + " connection joins " +
                                    parts_.stages.front()->name() + " (" +
                                    std::to_string(parts_.stages.front()->out_channels()) + " ch) with " + s->name() +
                                    " (" + std::to_string(s->out_channels()) + " ch)");
      }
    }
  }
  const Block<T>* last = parts_.stages.back().get();
  for (const auto& t : parts_.tail) {
    chain_check(*last, *t);
    last = t.get();
  }
  if (parts_.adaption) chain_check(*last, *parts_.adaption);
  if (parts_.dropout_keep && !(*parts_.dropout_keep > 0.0 && *parts_.dropout_keep <= 1.0)) {
    throw std::invalid_argument(n + ": dropout keep probability must lie in (0,1]");
  }
  reg.taps.push_back(n + ".stages");
  reg.taps.push_back(n);
}

template <typename T>
Var<T> BasicUnit<T>::forward(const Var<T>& x, RunContext<T>& ctx) {
  Var<T> h = x;
  for (auto& e : parts_.entry) h = e->forward(h, ctx);

  auto& st = parts_.stages;
  Var<T> joined;
  switch (parts_.connection) {
    case Connection::None:
      joined = st[2]->forward(st[1]->forward(st[0]->forward(h, ctx), ctx), ctx);
      break;
    case Connection::Straight: {
      Var<T> first = st[0]->forward(h, ctx);
      Var<T> last = st[2]->forward(st[1]->forward(first, ctx), ctx);
      joined = add(last, first);
      break;
    }
    case Connection::Dense: {
      Var<T> o1 = st[0]->forward(h, ctx);
      Var<T> o2 = st[1]->forward(o1, ctx);
      Var<T> o12 = add(o1, o2);
      joined = add(o12, st[2]->forward(o12, ctx));
      break;
    }
  }
  ctx.record(this->name() + ".stages", joined);

  h = joined;
  for (auto& t : parts_.tail) h = t->forward(h, ctx);
  if (parts_.adaption) h = parts_.adaption->forward(h, ctx);
  if (parts_.dropout_keep) {
    if (ctx.mode == Mode::Train && !ctx.rng && *parts_.dropout_keep < 1.0) {
      throw std::logic_error(this->name() + ": train-mode dropout needs a random generator");
    }
    if (ctx.mode == Mode::Train && *parts_.dropout_keep < 1.0) h = dropout(h, *parts_.dropout_keep, ctx.mode, *ctx.rng);
  }
  ctx.record(this->name(), h);
  return h;
}

template <typename T>
Shape BasicUnit<T>::trace(const Shape& in) const {
  Shape s = in;
  for (const auto& e : parts_.entry) s = e->trace(s);
  const Shape s1 = parts_.stages[0]->trace(s);
  const Shape s2 = parts_.stages[1]->trace(s1);
  const Shape s3 = parts_.stages[2]->trace(s2);
  if (parts_.connection != Connection::None && (s1 != s2 || s2 != s3)) {
    throw std::invalid_argument(this->name() + ": summation join over unequal shapes " + shape_str(s1) + ", " +
                                shape_str(s2) + ", " + shape_str(s3));
  }
  s = s3;
  for (const auto& t : parts_.tail) s = t->trace(s);
  if (parts_.adaption) s = parts_.adaption->trace(s);
  return s;
}

template <typename T>
std::size_t BasicUnit<T>::in_channels() const {
  return parts_.entry.empty() ? parts_.stages.front()->in_channels() : parts_.entry.front()->in_channels();
}

template <typename T>
std::size_t BasicUnit<T>::out_channels() const {
  if (parts_.adaption) return parts_.adaption->out_channels();
  if (!parts_.tail.empty()) return parts_.tail.back()->out_channels();
  return parts_.stages.back()->out_channels();
}

template <typename T>
std::size_t BasicUnit<T>::depth() const {
  std::size_t d = 0;
  for (const auto& e : parts_.entry) d += e->depth();
  for (const auto& s : parts_.stages) d += s->depth();
  for (const auto& t : parts_.tail) d += t->depth();
  if (parts_.adaption) d += parts_.adaption->depth();
  return d;
}

// ---- builders ---------------------------------------------------------------

template <typename T>
std::unique_ptr<ConvUnit<T>> build_conv_unit(Registry<T>& reg, const std::string& name, const ConvUnitCfg& cfg) {
  return std::make_unique<ConvUnit<T>>(reg, name, cfg);
}

template <typename T>
std::unique_ptr<AdaptionUnit<T>> build_adaption_unit(Registry<T>& reg, const std::string& name,
                                                     const AdaptionUnitCfg& cfg) {
  return std::make_unique<AdaptionUnit<T>>(reg, name, cfg);
}

template <typename T>
std::unique_ptr<BasicUnit<T>> build_basic_unit(Registry<T>& reg, const std::string& name, const BasicUnitCfg& cfg) {
  if (cfg.conv_units.size() != 3) {
    throw std::invalid_argument(name + ": a basic unit has three conv units, got " + std::to_string(cfg.conv_units.size()));
  }
  if (cfg.kind == UnitKind::Full) {
    for (const auto& cu : cfg.conv_units) {
      if (cu.groups_3x3 != 1) throw std::invalid_argument(name + ": BU_f conv units must be ungrouped");
    }
  }
  typename BasicUnit<T>::Parts parts;
  parts.kind = cfg.kind;
  parts.connection = cfg.connection;
  for (std::size_t i = 0; i < 3; ++i) {
    parts.stages.push_back(build_conv_unit<T>(reg, name + ".cu" + std::to_string(i + 1), cfg.conv_units[i]));
  }
  if (cfg.adaption) parts.adaption = build_adaption_unit<T>(reg, name + ".au", *cfg.adaption);
  parts.dropout_keep = cfg.dropout_keep;
  return std::make_unique<BasicUnit<T>>(reg, name, std::move(parts));
}

// ---- model ------------------------------------------------------------------

namespace {

struct ChannelPlan {
  const ModelSpec& spec;

  std::size_t width(std::size_t c) const {
    const auto v = static_cast<std::size_t>(std::llround(static_cast<double>(c) * spec.width));
    if (v == 0) {
      throw std::invalid_argument("width multiplier " + std::to_string(spec.width) + " reduces " + std::to_string(c) +
                                  " channels to zero");
    }
    return v;
  }

  std::size_t conv_groups(std::size_t fixed, std::size_t channels) const {
    const auto& g = spec.groups;
    if (g.conv_channels_per_group && fixed > 1) return std::max<std::size_t>(1, channels / g.conv_channels_per_group);
    return fixed;
  }

  std::size_t adaption_groups(std::size_t channels) const {
    const auto& g = spec.groups;
    if (g.adaption_channels_per_group) return std::max<std::size_t>(1, channels / g.adaption_channels_per_group);
    return g.adaption;
  }

  std::size_t tail_groups(std::size_t channels) const {
    const auto& g = spec.groups;
    if (g.adaption_channels_per_group) return std::max<std::size_t>(1, channels / g.adaption_channels_per_group);
    return g.tail;
  }

  // Largest group count <= want that divides both channel counts.
  static std::size_t fit_groups(std::size_t want, std::size_t in, std::size_t out) {
    for (std::size_t g = std::max<std::size_t>(want, 1); g > 1; --g) {
      if (in % g == 0 && out % g == 0) return g;
    }
    return 1;
  }

  ConvUnitCfg conv_unit(std::size_t in, std::size_t out, std::size_t groups) const {
    ConvUnitCfg cfg = ConvUnitCfg::bottleneck(in, out, conv_groups(groups, out));
    cfg.groups_1x1 =
        spec.bottleneck == BottleneckGrouping::Unit ? fit_groups(conv_groups(groups, cfg.mid_ch), in, cfg.mid_ch) : 1;
    return cfg;
  }

  BasicUnitCfg conv_units(UnitKind kind, std::size_t in, std::size_t out, std::size_t groups) const {
    BasicUnitCfg cfg;
    cfg.kind = kind;
    cfg.connection = spec.connection;
    cfg.conv_units = {conv_unit(in, out, groups), conv_unit(out, out, groups), conv_unit(out, out, groups)};
    return cfg;
  }
};

}  // namespace

template <typename T>
Model<T>::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), reg_(seed) {
  if (!(spec.width > 0.0)) throw std::invalid_argument("width multiplier must be > 0");
  const ChannelPlan plan{spec_};
  const std::size_t c_stem = plan.width(64), c_i = plan.width(128), c_mid = plan.width(256), c_e = plan.width(384);

  stem_ = std::make_unique<ConvBnRelu<T>>(reg_, "stem", spec.in_channels, c_stem, 3, 1);

  BasicUnitCfg bu_i = plan.conv_units(UnitKind::Input, c_stem, c_i, spec.groups.bu_i);
  const std::size_t bu_i_au = spec.groups.bu_i_adaption && !spec.groups.adaption_channels_per_group
                                  ? spec.groups.bu_i_adaption
                                  : plan.adaption_groups(c_i);
  bu_i.adaption = AdaptionUnitCfg{c_i, c_i, 3, bu_i_au};
  bu_i.dropout_keep = spec.dropout_keep;
  bu_i_ = build_basic_unit<T>(reg_, "bu_i", bu_i);

  std::size_t e_in = 0;
  if (spec.variant == Variant::GMNet) {
    bu_f_ = build_basic_unit<T>(reg_, "bu_f", plan.conv_units(UnitKind::Full, c_i, c_mid, 1));

    typename BasicUnit<T>::Parts s;
    s.kind = UnitKind::Single;
    s.connection = spec.connection;
    s.entry.push_back(std::make_unique<ConvBnRelu<T>>(reg_, "bu_s.conv1x1", c_i, c_mid, 1, 1));
    for (int i = 1; i <= 3; ++i) {
      s.stages.push_back(std::make_unique<ConvBnRelu<T>>(reg_, "bu_s.cw" + std::to_string(i), c_mid, c_mid, 3, c_mid));
    }
    bu_s_ = std::make_unique<BasicUnit<T>>(reg_, "bu_s", std::move(s));

    const std::size_t merged = spec.merge == Merge::Sum ? c_mid : 2 * c_mid;
    reg_.taps.push_back("merge");
    merge_au_ = build_adaption_unit<T>(reg_, "au", AdaptionUnitCfg{merged, merged, 3, plan.adaption_groups(merged)});
    e_in = merged;
  } else {
    BasicUnitCfg bu_m = plan.conv_units(UnitKind::Middle, c_i, c_mid, spec.groups.bu_m);
    bu_m.adaption = AdaptionUnitCfg{c_mid, c_mid, 3, plan.adaption_groups(c_mid)};
    bu_m_ = build_basic_unit<T>(reg_, "bu_m", bu_m);
    e_in = c_mid;
  }

  BasicUnitCfg bu_e_cfg = plan.conv_units(UnitKind::End, e_in, c_e, spec.groups.bu_e);
  typename BasicUnit<T>::Parts e;
  e.kind = UnitKind::End;
  e.connection = spec.connection;
  for (std::size_t i = 0; i < 3; ++i) {
    e.stages.push_back(build_conv_unit<T>(reg_, "bu_e.cu" + std::to_string(i + 1), bu_e_cfg.conv_units[i]));
  }
  e.tail.push_back(std::make_unique<ConvBnRelu<T>>(reg_, "bu_e.tail", c_e, c_e, 1, plan.tail_groups(c_e)));
  e.dropout_keep = spec.dropout_keep;
  bu_e_ = std::make_unique<BasicUnit<T>>(reg_, "bu_e", std::move(e));

  reg_.taps.push_back("pool");
  fc_weight_ = parameter(he_normal<T>({spec.num_classes, c_e}, c_e, reg_.init_rng));
  fc_bias_ = parameter(Tensor<T>::zeros({spec.num_classes}));
  reg_.params.add("fc.weight", fc_weight_);
  reg_.params.add("fc.bias", fc_bias_);
  reg_.taps.push_back("fc");
}

template <typename T>
Var<T> Model<T>::forward(const Tensor<T>& images, RunContext<T>& ctx) {
  return forward(constant(images), ctx);
}

template <typename T>
Var<T> Model<T>::forward(const Var<T>& images, RunContext<T>& ctx) {
  require_rank4_channels(images->value.shape(), spec_.in_channels, "model input");
  auto step = [&ctx](const std::string& name, Var<T> v) {
    ctx.shapes.emplace_back(name, v->value.shape());
    ctx.record(name, v);
    return v;
  };
  Var<T> h = step("stem", stem_->forward(images, ctx));
  h = step("bu_i", bu_i_->forward(h, ctx));
  if (spec_.variant == Variant::GMNet) {
    Var<T> f = step("bu_f", bu_f_->forward(h, ctx));
    Var<T> s = step("bu_s", bu_s_->forward(h, ctx));
    h = step("merge", spec_.merge == Merge::Sum ? add(f, s) : concat_channels(f, s));
    h = step("au", merge_au_->forward(h, ctx));
  } else {
    h = step("bu_m", bu_m_->forward(h, ctx));
  }
  h = step("bu_e", bu_e_->forward(h, ctx));
  h = step("pool", global_avg_pool(h));
  return step("fc", linear(h, fc_weight_, fc_bias_));
}

template <typename T>
ShapeTrace Model<T>::trace(const Shape& input) const {
  require_rank4_channels(input, spec_.in_channels, "model input");
  ShapeTrace out;
  Shape s = stem_->trace(input);
  out.emplace_back("stem", s);
  s = bu_i_->trace(s);
  out.emplace_back("bu_i", s);
  if (spec_.variant == Variant::GMNet) {
    const Shape f = bu_f_->trace(s);
    const Shape p = bu_s_->trace(s);
    out.emplace_back("bu_f", f);
    out.emplace_back("bu_s", p);
    Shape m;
    if (spec_.merge == Merge::Sum) {
      if (f != p) throw std::invalid_argument("merge: sum of unequal shapes " + shape_str(f) + " and " + shape_str(p));
      m = f;
    } else {
      if (f[0] != p[0] || f[2] != p[2] || f[3] != p[3]) {
        throw std::invalid_argument("merge: concat of " + shape_str(f) + " and " + shape_str(p));
      }
      m = {f[0], f[1] + p[1], f[2], f[3]};
    }
    out.emplace_back("merge", m);
    s = merge_au_->trace(m);
    out.emplace_back("au", s);
  } else {
    s = bu_m_->trace(s);
    out.emplace_back("bu_m", s);
  }
  s = bu_e_->trace(s);
  out.emplace_back("bu_e", s);
  s = {s[0], s[1]};
  out.emplace_back("pool", s);
  out.emplace_back("fc", Shape{s[0], spec_.num_classes});
  return out;
}

template <typename T>
std::size_t Model<T>::depth() const {
  std::size_t d = stem_->depth() + bu_i_->depth();
  if (spec_.variant == Variant::GMNet) {
    d += std::max(bu_f_->depth(), bu_s_->depth()) + merge_au_->depth();
  } else {
    d += bu_m_->depth();
  }
  return d + bu_e_->depth() + 1;
}

template <typename T>
bool Model<T>::decays(const std::string& param_name) const {
  constexpr std::string_view suffix = ".weight";
  return param_name.size() > suffix.size() &&
         param_name.compare(param_name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
std::unique_ptr<Model<T>> build_gmnet(ModelSpec spec, std::uint64_t seed) {
  spec.variant = Variant::GMNet;
  return std::make_unique<Model<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_baseline(ModelSpec spec, std::uint64_t seed) {
  spec.variant = Variant::Baseline;
  return std::make_unique<Model<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelSpec& spec, std::uint64_t seed) {
  return std::make_unique<Model<T>>(spec, seed);
}

template <typename T>
ParamReport count_params(const Model<T>& model) {
  ParamReport r;
  for (const auto& [name, node] : model.params()) {
    const std::string block = name.substr(0, name.find('.'));
    const std::size_t n = node->value.numel();
    r.total += n;
    if (r.blocks.empty() || r.blocks.back().block != block) r.blocks.push_back({block, 0});
    r.blocks.back().params += n;
  }
  return r;
}

ShapeTrace forward_trace(const ModelSpec& spec, const Shape& input_shape) {
  return Model<float>(spec, 0).trace(input_shape);
}

template <typename T>
std::map<std::string, Tensor<T>> extract_feature_maps(Model<T>& model, const Tensor<T>& input,
                                                      const std::vector<std::string>& taps) {
  const auto& known = model.tap_names();
  for (const auto& t : taps) {
    if (std::find(known.begin(), known.end(), t) == known.end()) {
      std::string list;
      for (const auto& k : known) list += (list.empty() ? "" : ", ") + k;
      throw std::invalid_argument("unknown tap '" + t + "'; available: " + list);
    }
  }
  NoGradGuard no_grad;
  RunContext<T> ctx;
  ctx.mode = Mode::Eval;
  ctx.wanted_taps.insert(taps.begin(), taps.end());
  model.forward(input, ctx);
  return std::move(ctx.taps);
}

std::vector<std::string> default_taps(const ModelSpec& spec) {
  if (spec.variant == Variant::GMNet) return {"bu_s", "bu_f", "au", "bu_e.tail"};
  return {"bu_m.au", "bu_e.tail"};
}

#define GMNET_INSTANTIATE_ARCH(T)                                                                              \
  template class ConvBnRelu<T>;                                                                                \
  template class ConvUnit<T>;                                                                                  \
  template class AdaptionUnit<T>;                                                                              \
  template class BasicUnit<T>;                                                                                 \
  template class Model<T>;                                                                                     \
  template std::unique_ptr<ConvUnit<T>> build_conv_unit<T>(Registry<T>&, const std::string&, const ConvUnitCfg&); \
  template std::unique_ptr<AdaptionUnit<T>> build_adaption_unit<T>(Registry<T>&, const std::string&,             \
                                                                   const AdaptionUnitCfg&);                     \
  template std::unique_ptr<BasicUnit<T>> build_basic_unit<T>(Registry<T>&, const std::string&, const BasicUnitCfg&); \
  template std::unique_ptr<Model<T>> build_gmnet<T>(ModelSpec, std::uint64_t);                                 \
  template std::unique_ptr<Model<T>> build_baseline<T>(ModelSpec, std::uint64_t);                              \
  template std::unique_ptr<Model<T>> build_model<T>(const ModelSpec&, std::uint64_t);                          \
  template ParamReport count_params<T>(const Model<T>&);                                                       \
  template std::map<std::string, Tensor<T>> extract_feature_maps<T>(Model<T>&, const Tensor<T>&,               \
                                                                    const std::vector<std::string>&);

GMNET_INSTANTIATE_ARCH(float)
GMNET_INSTANTIATE_ARCH(double)

}  // namespace gmnet
