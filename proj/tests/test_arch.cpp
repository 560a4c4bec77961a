// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "gmnet/arch.hpp"
#include "oracles.hpp"

namespace gmnet {
namespace {

/// y = a * x with fixed channel count; used to observe how a basic unit wires its stages.
class Scale final : public Block<double> {
 public:
  Scale(std::string name, std::size_t ch, double a) : Block<double>(std::move(name)), ch_(ch), a_(a) {}
  Var<double> forward(const Var<double>& x, RunContext<double>&) override {
    return mul(x, constant(Tensor<double>(x->value.shape(), a_)));
  }
  Shape trace(const Shape& in) const override { return in; }
  std::size_t in_channels() const override { return ch_; }
  std::size_t out_channels() const override { return ch_; }
  std::size_t depth() const override { return 1; }

 private:
  std::size_t ch_;
  double a_;
};

std::unique_ptr<BasicUnit<double>> scaled_unit(Registry<double>& reg, Connection c, double a1, double a2,
                                               double a3) {
  BasicUnit<double>::Parts p;
  p.connection = c;
  p.stages.push_back(std::make_unique<Scale>("s1", 2, a1));
  p.stages.push_back(std::make_unique<Scale>("s2", 2, a2));
  p.stages.push_back(std::make_unique<Scale>("s3", 2, a3));
  return std::make_unique<BasicUnit<double>>(reg, "bu", std::move(p));
}

std::size_t trainable(const Registry<float>& reg) { return reg.params.total_elements(); }

ModelSpec spec_for(Variant v, const std::string& dataset = "cifar10") {
  ModelSpec s;
  apply_spec_setting(s, "dataset", dataset);
  s.variant = v;
  return s;
}

// ---- units ------------------------------------------------------------------

TEST(ConvUnit, ParameterCountFromFormula) {
  Registry<float> reg(1);
  auto cu = build_conv_unit<float>(reg, "cu", ConvUnitCfg{64, 64, 128, 8, 1});
  const std::size_t conv = count_conv_params(1, 64, 64, 1, false) + count_conv_params(3, 64, 128, 8, false);
  EXPECT_EQ(conv, 4096u + 9216u);
  EXPECT_EQ(trainable(reg), 13312u + 2 * (64 + 128));
  EXPECT_EQ(cu->trace({2, 64, 16, 16}), (Shape{2, 128, 16, 16}));
  EXPECT_EQ(cu->depth(), 2u);
}

TEST(ConvUnit, UngroupedEqualsPlainBottleneck) {
  Registry<float> a(1), b(1);
  build_conv_unit<float>(a, "cu", ConvUnitCfg{16, 8, 16, 1, 1});
  ConvBnRelu<float> p(b, "p", 16, 8, 1, 1);
  ConvBnRelu<float> s(b, "s", 8, 16, 3, 1);
  EXPECT_EQ(trainable(a), trainable(b));
}

TEST(ConvUnit, RejectsIndivisibleGroups) {
  Registry<float> reg(1);
  EXPECT_THROW(build_conv_unit<float>(reg, "cu", ConvUnitCfg{16, 6, 16, 4, 1}), std::invalid_argument);
}

TEST(AdaptionUnit, HalvesSpatialSize) {
  Registry<float> reg(2);
  auto au = build_adaption_unit<float>(reg, "au", AdaptionUnitCfg{256, 256, 3, 4});
  EXPECT_EQ(au->trace({3, 256, 16, 16}), (Shape{3, 256, 8, 8}));
  EXPECT_EQ(reg.convs.back().stored, 147456u);
  EXPECT_EQ(trainable(reg), 147456u + 2 * 256);
  Registry<float> r1(3);
  auto au1 = build_adaption_unit<float>(r1, "au", AdaptionUnitCfg{8, 8, 1, 1});
  EXPECT_EQ(au1->trace({1, 8, 6, 6}), (Shape{1, 8, 3, 3}));
  Registry<float> r5(4);
  EXPECT_THROW(build_adaption_unit<float>(r5, "au", AdaptionUnitCfg{8, 8, 5, 1}), std::invalid_argument);
}

TEST(BasicUnit, ConnectionWiring) {
  Registry<double> reg(5);
  auto x = constant(Tensor<double>({1, 2, 1, 1}, std::vector<double>{1.0, -2.0}));
  RunContext<double> ctx;
  const double a1 = 2, a2 = 3, a3 = 5;

  auto none = scaled_unit(reg, Connection::None, a1, a2, a3);
  EXPECT_DOUBLE_EQ(none->forward(x, ctx)->value[0], a3 * a2 * a1);

  auto straight = scaled_unit(reg, Connection::Straight, a1, a2, a3);
  EXPECT_DOUBLE_EQ(straight->forward(x, ctx)->value[0], a3 * a2 * a1 + a1);

  auto dense = scaled_unit(reg, Connection::Dense, a1, a2, a3);
  const double o1 = a1, o2 = a2 * a1, o3 = a3 * (o1 + o2);
  EXPECT_DOUBLE_EQ(dense->forward(x, ctx)->value[0], o1 + o2 + o3);
  EXPECT_DOUBLE_EQ(dense->forward(x, ctx)->value[1], -2.0 * (o1 + o2 + o3));
}

TEST(BasicUnit, RejectsMismatchedJoins) {
  Registry<float> reg(6);
  BasicUnitCfg cfg;
  cfg.connection = Connection::Dense;
  cfg.conv_units = {ConvUnitCfg{8, 8, 16, 1, 1}, ConvUnitCfg{16, 8, 16, 1, 1}};
  EXPECT_THROW(build_basic_unit<float>(reg, "bu", cfg), std::invalid_argument);
  cfg.conv_units.push_back(ConvUnitCfg{8, 8, 16, 1, 1});
  EXPECT_THROW(build_basic_unit<float>(reg, "bu", cfg), std::invalid_argument);
  cfg.kind = UnitKind::Full;
  cfg.conv_units = {ConvUnitCfg{8, 8, 16, 2, 1}, ConvUnitCfg{16, 8, 16, 1, 1}, ConvUnitCfg{16, 8, 16, 1, 1}};
  EXPECT_THROW(build_basic_unit<float>(reg, "bu", cfg), std::invalid_argument);
}

// ---- model accounting -------------------------------------------------------

TEST(Model, ParameterTotalsWithinTargetBands) {
  const auto gm = count_params(*build_gmnet<float>(spec_for(Variant::GMNet)));
  const auto base = count_params(*build_baseline<float>(spec_for(Variant::Baseline)));
  EXPECT_GE(gm.total, 1350000u);
  EXPECT_LE(gm.total, 1650000u);
  EXPECT_GE(base.total, 630000u);
  EXPECT_LE(base.total, 770000u);
  // Regression pins for the default layout.
  EXPECT_EQ(gm.total, 1547338u);
  EXPECT_EQ(base.total, 659786u);
  std::size_t sum = 0;
  for (const auto& b : gm.blocks) sum += b.params;
  EXPECT_EQ(sum, gm.total);
}

TEST(Model, DepthConvention) {
  EXPECT_EQ(build_gmnet<float>(spec_for(Variant::GMNet))->depth(), 23u);
  EXPECT_EQ(build_baseline<float>(spec_for(Variant::Baseline))->depth(), 23u);
}

TEST(Model, WidthQuarterHasAboutOneSixteenthOfConvWeights) {
  auto conv_weights = [](double width) {
    ModelSpec s = spec_for(Variant::GMNet);
    s.width = width;
    const auto model = build_gmnet<float>(s);
    std::size_t n = 0;
    for (const auto& c : model->conv_layers()) n += c.stored;
    return static_cast<double>(n);
  };
  const double ratio = conv_weights(1.0) / conv_weights(0.25);
  EXPECT_GT(ratio, 14.0);
  EXPECT_LT(ratio, 17.0);
}

std::vector<ModelSpec> spec_grid() {
  std::vector<ModelSpec> grid;
  for (Variant v : {Variant::GMNet, Variant::Baseline})
    for (Connection c : {Connection::Dense, Connection::Straight, Connection::None})
      for (Merge m : {Merge::Sum, Merge::Concat})
        for (double w : {0.25, 0.5, 1.0}) {
          ModelSpec s;
          s.variant = v;
          s.connection = c;
          s.merge = m;
          s.width = w;
          grid.push_back(s);
        }
  return grid;
}

TEST(Model, StoredWeightsMatchFormulaForEveryLayer) {
  std::vector<ModelSpec> specs = spec_grid();
  for (const char* profile : {"8+4", "8+2", "4+4", "8+4&16+8", "none", "block1", "block3"}) {
    ModelSpec s;
    s.groups = group_profile(profile);
    specs.push_back(s);
    s.bottleneck = BottleneckGrouping::Ungrouped;
    specs.push_back(s);
  }
  for (const ModelSpec& s : specs) {
    auto model = build_model<float>(s);
    std::size_t weights = 0;
    for (const ConvRecord& c : model->conv_layers()) {
      EXPECT_EQ(c.stored, count_conv_params(c.k, c.c, c.o, c.g, c.bias)) << c.name;
      weights += c.stored;
    }
    std::size_t bn = 0;
    for (const auto& [name, state] : model->batch_norms()) bn += 2 * state->channels();
    const std::size_t fc = model->params().at("fc.weight")->value.numel() + model->params().at("fc.bias")->value.numel();
    EXPECT_EQ(count_params(*model).total, weights + bn + fc) << format_model_spec(s);
  }
}

TEST(Model, GroupProfilesChangeGroupCounts) {
  auto groups_of = [](const ModelSpec& s, const std::string& layer) {
    const auto model = build_model<float>(s);
    for (const auto& c : model->conv_layers()) {
      if (c.name == layer) return c.g;
    }
    return std::size_t{0};
  };
  ModelSpec s;
  EXPECT_EQ(groups_of(s, "bu_i.cu1.conv3x3"), 8u);
  EXPECT_EQ(groups_of(s, "bu_i.au.conv"), 4u);
  EXPECT_EQ(groups_of(s, "bu_s.cw1"), 256u);
  EXPECT_EQ(groups_of(s, "bu_f.cu1.conv3x3"), 1u);
  s.groups = group_profile("8+2");
  EXPECT_EQ(groups_of(s, "au.conv"), 2u);
  s.groups = group_profile("8+4&16+8");
  EXPECT_EQ(groups_of(s, "bu_i.cu1.conv3x3"), 128u / 8);
  EXPECT_EQ(groups_of(s, "bu_e.cu1.conv3x3"), 384u / 8);
  s.groups = group_profile("block1");
  EXPECT_EQ(groups_of(s, "bu_i.cu1.conv3x3"), 8u);
  EXPECT_EQ(groups_of(s, "bu_e.cu1.conv3x3"), 1u);
  s.groups = group_profile("block3");
  EXPECT_EQ(groups_of(s, "bu_i.cu1.conv3x3"), 1u);
  EXPECT_EQ(groups_of(s, "bu_e.cu1.conv3x3"), 8u);
  s.groups = group_profile("none");
  const auto plain = build_model<float>(s);
  for (const auto& c : plain->conv_layers()) {
    if (c.name.rfind("bu_s.cw", 0) != 0) {
      EXPECT_EQ(c.g, 1u) << c.name;
    }
  }
  EXPECT_THROW(group_profile("9+9"), std::invalid_argument);
}

TEST(Model, ConcatMergeDoublesAdaptionInput) {
  ModelSpec s;
  s.merge = Merge::Concat;
  const auto model = build_model<float>(s);
  for (const auto& c : model->conv_layers()) {
    if (c.name == "au.conv") {
      EXPECT_EQ(c.c, 512u);
    }
  }
}

// ---- shapes -----------------------------------------------------------------

std::vector<std::size_t> spatial(const ShapeTrace& t, const std::vector<std::string>& blocks) {
  std::vector<std::size_t> out;
  for (const auto& b : blocks) {
    auto it = std::find_if(t.begin(), t.end(), [&](const auto& e) { return e.first == b; });
    if (it == t.end()) return {};
    out.push_back(it->second.size() == 4 ? it->second[2] : 1);
  }
  return out;
}

TEST(Trace, CifarProgression) {
  const auto gm = forward_trace(spec_for(Variant::GMNet), {1, 3, 32, 32});
  EXPECT_EQ(spatial(gm, {"bu_i", "bu_f", "bu_s", "au", "bu_e", "pool"}), (std::vector<std::size_t>{16, 16, 16, 8, 8, 1}));
  EXPECT_EQ(gm.back().second, (Shape{1, 10}));
  const auto base = forward_trace(spec_for(Variant::Baseline), {1, 3, 32, 32});
  EXPECT_EQ(spatial(base, {"bu_i", "bu_m", "bu_e", "pool"}), (std::vector<std::size_t>{16, 8, 8, 1}));
  EXPECT_TRUE(spatial(base, {"bu_f"}).empty());
}

TEST(Trace, MnistProgression) {
  const auto gm = forward_trace(spec_for(Variant::GMNet, "mnist"), {2, 1, 28, 28});
  EXPECT_EQ(spatial(gm, {"stem", "bu_i", "bu_f", "au", "bu_e", "pool"}), (std::vector<std::size_t>{28, 14, 14, 7, 7, 1}));
  const auto base = forward_trace(spec_for(Variant::Baseline, "mnist"), {2, 1, 28, 28});
  EXPECT_EQ(spatial(base, {"bu_i", "bu_m", "bu_e", "pool"}), (std::vector<std::size_t>{14, 7, 7, 1}));
  EXPECT_THROW(forward_trace(spec_for(Variant::GMNet, "mnist"), {2, 3, 28, 28}), std::invalid_argument);
}

TEST(Trace, MatchesRealForwardOnSpecGrid) {
  for (const ModelSpec& s : spec_grid()) {
    auto model = build_model<float>(s, 1);
    const Shape input{2, 3, 32, 32};
    Rng rng(2);
    NoGradGuard ng;
    RunContext<float> ctx;
    auto y = model->forward(Tensor<float>::randn(input, rng), ctx);
    EXPECT_EQ(ctx.shapes, forward_trace(s, input)) << format_model_spec(s);
    EXPECT_EQ(y->value.shape(), (Shape{2, 10}));
  }
}

// ---- taps -------------------------------------------------------------------

TEST(FeatureMaps, ShapesPurityAndErrors) {
  auto model = build_gmnet<float>(spec_for(Variant::GMNet), 3);
  Rng rng(4);
  const auto x = Tensor<float>::randn({1, 3, 32, 32}, rng);
  const auto maps = extract_feature_maps(*model, x, {"stem", "bu_s", "bu_f"});
  EXPECT_EQ(maps.at("stem").shape(), (Shape{1, 64, 32, 32}));
  EXPECT_EQ(maps.at("bu_s").shape(), (Shape{1, 256, 16, 16}));

  NoGradGuard ng;
  RunContext<float> plain, tapped;
  tapped.wanted_taps = {"stem", "bu_s", "au"};
  EXPECT_EQ(model->forward(x, plain)->value, model->forward(x, tapped)->value);

  try {
    extract_feature_maps(*model, x, {"bu_q"});
    FAIL() << "expected an unknown-tap error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("bu_s"), std::string::npos);
  }
  for (const auto& t : default_taps(model->spec())) EXPECT_NO_THROW(extract_feature_maps(*model, x, {t}));
  ModelSpec b = spec_for(Variant::Baseline);
  auto base = build_model<float>(b);
  for (const auto& t : default_taps(b)) EXPECT_NO_THROW(extract_feature_maps(*base, x, {t}));
}

// ---- spec text --------------------------------------------------------------

TEST(ModelSpecText, RoundTripAndErrors) {
  ModelSpec s;
  apply_spec_setting(s, "dataset", "cifar100");
  apply_spec_setting(s, "variant", "baseline");
  apply_spec_setting(s, "connection", "B");
  apply_spec_setting(s, "merge", "concat");
  apply_spec_setting(s, "width", "0.5");
  apply_spec_setting(s, "groups.profile", "8+4&16+8");
  const ModelSpec r = parse_model_spec(format_model_spec(s));
  EXPECT_EQ(format_model_spec(r), format_model_spec(s));
  EXPECT_EQ(r.num_classes, 100u);
  EXPECT_EQ(r.groups.conv_channels_per_group, 8u);

  EXPECT_THROW(parse_model_spec("width=0\n"), std::invalid_argument);
  EXPECT_THROW(parse_model_spec("colour=red\n"), std::invalid_argument);
  try {
    parse_model_spec("# comment\nvariant=gmnet\nmerge=product\n");
    FAIL() << "expected a parse error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Model, RejectsWrongInputChannels) {
  auto model = build_gmnet<float>(spec_for(Variant::GMNet, "mnist"));
  RunContext<float> ctx;
  EXPECT_THROW(model->forward(Tensor<float>::zeros({1, 3, 28, 28}), ctx), std::invalid_argument);
  ModelSpec tiny;
  tiny.width = 0.001;
  EXPECT_THROW(build_model<float>(tiny), std::invalid_argument);
}

TEST(Model, TrainModeDropoutNeedsGenerator) {
  auto model = build_gmnet<float>(spec_for(Variant::GMNet, "mnist"));
  RunContext<float> ctx;
  ctx.mode = Mode::Train;
  EXPECT_THROW(model->forward(Tensor<float>::zeros({2, 1, 28, 28}), ctx), std::logic_error);
}

}  // namespace
}  // namespace gmnet
