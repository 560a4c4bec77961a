// SPDX-License-Identifier: Apache-2.0
//
// GM-Net and baseline construction: conv units, adaption units, basic units
// with dense (A) or straight (B) summation joins, and the two-path merge.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gmnet/autodiff.hpp"
#include "gmnet/ops.hpp"
#include "gmnet/tensor.hpp"

namespace gmnet {

enum class Variant { GMNet, Baseline };
enum class Connection { Dense, Straight, None };  // BU_A, BU_B, plain chain
enum class Merge { Sum, Concat };

/// How the 1x1 bottleneck inside a conv unit is grouped.
///   Unit:      shares the unit's group count with the 3x3 conv (default;
///              about 1.5M / 0.7M parameters for GM-Net / baseline).
///   Ungrouped: always g=1, the pure operation-level merge.
enum class BottleneckGrouping { Unit, Ungrouped };

std::string to_string(Variant v);
std::string to_string(Connection c);
std::string to_string(Merge m);
std::string to_string(BottleneckGrouping b);

struct GroupProfile {
  std::size_t bu_i = 8;      // 3x3 groups in BU_i conv units
  std::size_t bu_m = 8;      // baseline middle unit
  std::size_t bu_e = 8;
  std::size_t adaption = 4;  // every adaption unit
  std::size_t bu_i_adaption = 0;  // BU_i's adaption unit when nonzero, else `adaption`
  std::size_t tail = 4;      // BU_e trailing 1x1
  // Fixed channels-per-group scheme: when nonzero, groups = channels / value.
  std::size_t conv_channels_per_group = 0;
  std::size_t adaption_channels_per_group = 0;
};

/// Named group settings: "8+4" (default, grouping in both BU_i and BU_e), "8+2",
/// "4+4", "8+4&16+8", "none", "block1" (BU_i only), "block3" (BU_e only).
GroupProfile group_profile(std::string_view name);

struct ModelSpec {
  Variant variant = Variant::GMNet;
  Connection connection = Connection::Dense;
  Merge merge = Merge::Sum;
  BottleneckGrouping bottleneck = BottleneckGrouping::Unit;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  double width = 1.0;
  double dropout_keep = 0.8;
  GroupProfile groups;
  std::string dataset = "cifar10";
};

/// Applies one `key=value` setting. Keys: variant, connection, merge, width,
/// num_classes, in_channels, dataset, bottleneck, dropout_keep, groups.profile,
/// groups.bu_i, groups.bu_m, groups.bu_e, groups.adaption, groups.bu_i_adaption,
/// groups.tail, groups.conv_channels_per_group, groups.adaption_channels_per_group.
void apply_spec_setting(ModelSpec& spec, std::string_view key, std::string_view value);

/// Parses a flat key-value config; '#' starts a comment.
ModelSpec parse_model_spec(std::string_view text);
/// Applies every setting in `text` on top of `spec`.
void apply_model_config(ModelSpec& spec, std::string_view text);
std::string format_model_spec(const ModelSpec& spec);

// ---- blocks -----------------------------------------------------------------

struct ConvRecord {
  std::string name;
  std::size_t k, c, o, g;
  bool bias;
  std::size_t stored;  // element count of the weight (+ bias) actually allocated
};

/// Collects everything a model owns while blocks are being constructed.
template <typename T>
struct Registry {
  ParamSet<T> params;
  std::vector<std::pair<std::string, BatchNormState<T>*>> batch_norms;
  std::vector<ConvRecord> convs;
  std::vector<std::string> taps;
  Rng init_rng;

  explicit Registry(std::uint64_t seed) : init_rng(seed) {}
};

template <typename T>
struct RunContext {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
  std::set<std::string> wanted_taps;
  std::map<std::string, Tensor<T>> taps;
  std::vector<std::pair<std::string, Shape>> shapes;  // top-level blocks, in order

  void record(const std::string& name, const Var<T>& v) {
    if (wanted_taps.count(name)) taps.insert_or_assign(name, v->value);
  }
};

template <typename T>
class Block {
 public:
  explicit Block(std::string name) : name_(std::move(name)) {}
  virtual ~Block() = default;
  Block(const Block&) = delete;
  Block& operator=(const Block&) = delete;

  const std::string& name() const { return name_; }
  virtual Var<T> forward(const Var<T>& x, RunContext<T>& ctx) = 0;
  /// Symbolic shape propagation; throws on inconsistent input.
  virtual Shape trace(const Shape& in) const = 0;
  virtual std::size_t in_channels() const = 0;
  virtual std::size_t out_channels() const = 0;
  /// Conv + fc layers on the longest path through the block.
  virtual std::size_t depth() const = 0;

 private:
  std::string name_;
};

/// conv(k, pad k/2, stride 1) -> BN -> ReLU
template <typename T>
class ConvBnRelu final : public Block<T> {
 public:
  ConvBnRelu(Registry<T>& reg, std::string name, std::size_t c, std::size_t o, std::size_t k, std::size_t groups);
  Var<T> forward(const Var<T>& x, RunContext<T>& ctx) override;
  Shape trace(const Shape& in) const override;
  std::size_t in_channels() const override { return c_; }
  std::size_t out_channels() const override { return o_; }
  std::size_t depth() const override { return 1; }
  std::size_t groups() const { return geo_.groups; }

 private:
  std::size_t c_, o_, k_;
  ConvGeometry geo_;
  Var<T> weight_;
  BatchNormState<T> bn_;
};

struct ConvUnitCfg {
  std::size_t in_ch = 0, mid_ch = 0, out_ch = 0;
  std::size_t groups_3x3 = 1;
  std::size_t groups_1x1 = 1;

  /// mid = out/2, the 0.5 bottleneck factor.
  static ConvUnitCfg bottleneck(std::size_t in, std::size_t out, std::size_t g3, std::size_t g1 = 1) {
    return ConvUnitCfg{in, out / 2, out, g3, g1};
  }
};

/// 1x1 bottleneck then grouped 3x3, each conv-BN-ReLU.
template <typename T>
class ConvUnit final : public Block<T> {
 public:
  ConvUnit(Registry<T>& reg, std::string name, const ConvUnitCfg& cfg);
  Var<T> forward(const Var<T>& x, RunContext<T>& ctx) override;
  Shape trace(const Shape& in) const override;
  std::size_t in_channels() const override { return cfg_.in_ch; }
  std::size_t out_channels() const override { return cfg_.out_ch; }
  std::size_t depth() const override { return 2; }

 private:
  ConvUnitCfg cfg_;
  std::unique_ptr<ConvBnRelu<T>> pointwise_;
  std::unique_ptr<ConvBnRelu<T>> spatial_;
};

struct AdaptionUnitCfg {
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t kernel = 3;
  std::size_t groups = 1;
};

/// conv(k, grouped) -> BN -> ReLU -> 2x2 average pool, stride 2.
template <typename T>
class AdaptionUnit final : public Block<T> {
 public:
  AdaptionUnit(Registry<T>& reg, std::string name, const AdaptionUnitCfg& cfg);
  Var<T> forward(const Var<T>& x, RunContext<T>& ctx) override;
  Shape trace(const Shape& in) const override;
  std::size_t in_channels() const override { return cfg_.in_ch; }
  std::size_t out_channels() const override { return cfg_.out_ch; }
  std::size_t depth() const override { return 1; }

 private:
  AdaptionUnitCfg cfg_;
  std::unique_ptr<ConvBnRelu<T>> conv_;
};

enum class UnitKind { Input, Full, Single, End, Middle };
std::string to_string(UnitKind k);

/// Three sequential stages joined per `connection`, optionally preceded by
/// entry layers and followed by tail layers, an adaption unit and dropout.
///
/// Dense:    stage k consumes the sum of all earlier stage outputs; the unit
///           emits the sum of all three.
/// Straight: the unit emits stage3 + stage1.
template <typename T>
class BasicUnit final : public Block<T> {
 public:
  struct Parts {
    UnitKind kind = UnitKind::Input;
    Connection connection = Connection::None;
    std::vector<std::unique_ptr<Block<T>>> entry;
    std::vector<std::unique_ptr<Block<T>>> stages;
    std::vector<std::unique_ptr<Block<T>>> tail;
    std::unique_ptr<AdaptionUnit<T>> adaption;
    std::optional<double> dropout_keep;
  };

  BasicUnit(Registry<T>& reg, std::string name, Parts parts);
  Var<T> forward(const Var<T>& x, RunContext<T>& ctx) override;
  Shape trace(const Shape& in) const override;
  std::size_t in_channels() const override;
  std::size_t out_channels() const override;
  std::size_t depth() const override;
  UnitKind kind() const { return parts_.kind; }
  Connection connection() const { return parts_.connection; }

 private:
  Parts parts_;
};

struct BasicUnitCfg {
  UnitKind kind = UnitKind::Input;
  Connection connection = Connection::None;
  std::vector<ConvUnitCfg> conv_units;  // exactly three
  std::optional<AdaptionUnitCfg> adaption;
  std::optional<double> dropout_keep;
};

template <typename T>
std::unique_ptr<ConvUnit<T>> build_conv_unit(Registry<T>& reg, const std::string& name, const ConvUnitCfg& cfg);

template <typename T>
std::unique_ptr<AdaptionUnit<T>> build_adaption_unit(Registry<T>& reg, const std::string& name,
                                                     const AdaptionUnitCfg& cfg);

/// A basic unit made of three conv units (BU_i / BU_f / BU_m style).
template <typename T>
std::unique_ptr<BasicUnit<T>> build_basic_unit(Registry<T>& reg, const std::string& name, const BasicUnitCfg& cfg);

// ---- model ------------------------------------------------------------------

struct BlockParams {
  std::string block;
  std::size_t params;
};

struct ParamReport {
  std::size_t total = 0;
  std::vector<BlockParams> blocks;
};

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

template <typename T>
class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const ParamSet<T>& params() const { return reg_.params; }
  const std::vector<std::pair<std::string, BatchNormState<T>*>>& batch_norms() const { return reg_.batch_norms; }
  const std::vector<ConvRecord>& conv_layers() const { return reg_.convs; }
  const std::vector<std::string>& tap_names() const { return reg_.taps; }

  /// (N,C,H,W) images -> (N,num_classes) logits.
  Var<T> forward(const Tensor<T>& images, RunContext<T>& ctx);
  Var<T> forward(const Var<T>& images, RunContext<T>& ctx);

  /// Symbolic (block, output shape) list for the top-level blocks.
  ShapeTrace trace(const Shape& input) const;

  /// Conv + fc layers on the longest input-to-output path.
  std::size_t depth() const;

  /// Names of the weights that receive weight decay (conv and fc weights).
  bool decays(const std::string& param_name) const;

 private:
  ModelSpec spec_;
  Registry<T> reg_;
  std::unique_ptr<ConvBnRelu<T>> stem_;
  std::unique_ptr<BasicUnit<T>> bu_i_, bu_f_, bu_s_, bu_m_, bu_e_;
  std::unique_ptr<AdaptionUnit<T>> merge_au_;
  Var<T> fc_weight_, fc_bias_;
};

template <typename T>
std::unique_ptr<Model<T>> build_gmnet(ModelSpec spec, std::uint64_t seed = 0);

template <typename T>
std::unique_ptr<Model<T>> build_baseline(ModelSpec spec, std::uint64_t seed = 0);

/// Dispatches on spec.variant.
template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelSpec& spec, std::uint64_t seed = 0);

/// Trainable element counts (weights, fc bias, BN affine); running stats excluded.
template <typename T>
ParamReport count_params(const Model<T>& model);

/// Shape propagation for `spec` on `input_shape` without running activations.
ShapeTrace forward_trace(const ModelSpec& spec, const Shape& input_shape);

/// Post-activation outputs at the named taps; throws listing the valid names
/// when a tap is unknown.
template <typename T>
std::map<std::string, Tensor<T>> extract_feature_maps(Model<T>& model, const Tensor<T>& input,
                                                      const std::vector<std::string>& taps);

/// Default tap locations for the model's variant: both path outputs, the merge
/// adaption unit and the end tail.
std::vector<std::string> default_taps(const ModelSpec& spec);

}  // namespace gmnet
