// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "gmnet/arch.hpp"
#include "gmnet/data.hpp"
#include "gmnet/train.hpp"

namespace gmnet::cli {
namespace {

namespace fs = std::filesystem;

/// Usage problems discovered after parsing (bad flag combinations).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint path that does not exist.
class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model flags shared by every command. Empty strings mean "not given".
struct ModelFlags {
  std::string preset, config, dataset, variant, connection, merge, groups, bottleneck;
  std::optional<double> width, dropout_keep;
};

struct TrainFlags {
  std::string data_dir;
  std::optional<std::size_t> epochs, batch, train_limit, test_limit;
  std::optional<double> lr, momentum, weight_decay;
  std::uint64_t seed = 0;
  bool no_std = false;
  bool no_augment = false;
  std::string out_dir = "run";
};

struct Preset {
  std::string dataset;
  double width;
  std::size_t epochs;
  std::size_t batch;
};

Preset find_preset(const std::string& name) {
  if (name == "desk-mnist") return {"mnist", 0.25, 5, 64};
  if (name == "desk-cifar") return {"cifar10", 0.25, 5, 64};
  throw UsageError("unknown preset '" + name + "' (expected desk-mnist or desk-cifar)");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Training keys a --config file may carry next to model settings.
const std::set<std::string> kTrainKeys = {"epochs",       "batch",      "lr",          "momentum",   "weight_decay",
                                          "seed",         "data_dir",   "train_limit", "test_limit", "normalize_std",
                                          "augment"};

std::size_t to_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw UsageError("config key " + key + " needs a non-negative integer, got '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw UsageError("config key " + key + " needs a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config key " + key + " needs true or false, got '" + v + "'");
}

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

/// Splits a config file into model settings (returned as text) and training
/// keys (applied to `train`, unless the flag was given explicitly).
std::string split_config(const std::string& text, TrainFlags* train, const CLI::App* cmd) {
  std::istringstream in(text);
  std::ostringstream model;
  std::string line;
  auto given = [&](const char* flag) { return cmd && cmd->get_option_no_throw(flag) && cmd->count(flag) > 0; };
  while (std::getline(in, line)) {
    std::string body = line.substr(0, line.find('#'));
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : strip(body.substr(0, eq));
    if (!kTrainKeys.count(key)) {
      model << line << '\n';
      continue;
    }
    model << '\n';  // keep line numbers aligned for model-setting errors
    if (!train) continue;
    const std::string v = strip(body.substr(eq + 1));
    if (key == "epochs" && !given("--epochs")) train->epochs = to_count(key, v);
    if (key == "batch" && !given("--batch")) train->batch = to_count(key, v);
    if (key == "train_limit" && !given("--train-limit")) train->train_limit = to_count(key, v);
    if (key == "test_limit" && !given("--test-limit")) train->test_limit = to_count(key, v);
    if (key == "lr" && !given("--lr")) train->lr = to_real(key, v);
    if (key == "momentum" && !given("--momentum")) train->momentum = to_real(key, v);
    if (key == "weight_decay" && !given("--weight-decay")) train->weight_decay = to_real(key, v);
    if (key == "seed" && !given("--seed")) train->seed = to_count(key, v);
    if (key == "data_dir" && !given("--data-dir")) train->data_dir = v;
    if (key == "normalize_std" && !given("--no-std")) train->no_std = !to_bool(key, v);
    if (key == "augment" && !given("--no-augment")) train->no_augment = !to_bool(key, v);
  }
  return model.str();
}

/// Layering: defaults, then a model.cfg next to the checkpoint (when asked),
/// then the preset, then --config, then explicit flags.
ModelSpec resolve_spec(const ModelFlags& f, TrainFlags* train, const CLI::App* cmd,
                       const std::optional<fs::path>& base_cfg = std::nullopt) {
  ModelSpec spec;
  auto set = [&](const char* key, const std::string& v) {
    try {
      apply_spec_setting(spec, key, v);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  };
  if (base_cfg && fs::exists(*base_cfg)) apply_model_config(spec, read_text(*base_cfg));
  if (!f.preset.empty()) {
    const Preset p = find_preset(f.preset);
    set("dataset", p.dataset);
    spec.width = p.width;
    if (train) {
      if (!train->epochs) train->epochs = p.epochs;
      if (!train->batch) train->batch = p.batch;
    }
  }
  if (!f.config.empty()) apply_model_config(spec, split_config(read_text(f.config), train, cmd));
  if (!f.dataset.empty()) set("dataset", f.dataset);
  if (!f.variant.empty()) set("variant", f.variant);
  if (!f.connection.empty()) set("connection", f.connection);
  if (!f.merge.empty()) set("merge", f.merge);
  if (!f.groups.empty()) set("groups.profile", f.groups);
  if (!f.bottleneck.empty()) set("bottleneck", f.bottleneck);
  if (f.width) spec.width = *f.width;
  if (f.dropout_keep) spec.dropout_keep = *f.dropout_keep;
  if (!(spec.width > 0.0)) throw UsageError("--width must be > 0");
  if (!(spec.dropout_keep > 0.0 && spec.dropout_keep <= 1.0)) throw UsageError("--dropout-keep must lie in (0,1]");
  return spec;
}

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--preset", f.preset, "desk-mnist or desk-cifar (width 0.25, 5 epochs, batch 64)");
  cmd->add_option("--config", f.config, "key=value file with model (and training) settings");
  cmd->add_option("--dataset", f.dataset, "mnist, cifar10 or cifar100");
  cmd->add_option("--variant", f.variant, "gmnet or baseline");
  cmd->add_option("--connection", f.connection, "A (dense), B (straight) or none");
  cmd->add_option("--merge", f.merge, "sum or concat");
  cmd->add_option("--groups", f.groups, "group profile: 8+4, 8+2, 4+4, 8+4&16+8, none, block1, block3");
  cmd->add_option("--bottleneck", f.bottleneck, "1x1 grouping inside conv units: unit or ungrouped");
  cmd->add_option("--width", f.width, "channel width multiplier");
  cmd->add_option("--dropout-keep", f.dropout_keep, "dropout keep probability");
}

void add_data_flags(CLI::App* cmd, TrainFlags& t) {
  cmd->add_option("--data-dir", t.data_dir, "dataset directory");
  cmd->add_option("--train-limit", t.train_limit, "use only the first N training images");
  cmd->add_option("--test-limit", t.test_limit, "use only the first N test images");
  cmd->add_flag("--no-std", t.no_std, "subtract channel means only");
}

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
  add_data_flags(cmd, t);
  cmd->add_option("--epochs", t.epochs, "epochs (default 200 for MNIST, 300 otherwise)");
  cmd->add_option("--batch", t.batch, "batch size (default 64)");
  cmd->add_option("--lr", t.lr, "base learning rate (default 0.01 for MNIST, 0.1 otherwise)");
  cmd->add_option("--momentum", t.momentum, "Nesterov momentum (default 0.9)");
  cmd->add_option("--weight-decay", t.weight_decay, "L2 on conv and fc weights (default 1e-4)");
  cmd->add_option("--seed", t.seed, "seed for initialization, shuffling, augmentation and dropout");
  cmd->add_flag("--no-augment", t.no_augment, "disable pad-crop-flip on CIFAR");
  cmd->add_option("--out", t.out_dir, "output directory for metrics.csv, model.gmnt and model.cfg");
}

struct LoadedData {
  DatasetPair data;
  NormStats norm;
};

LoadedData load_data(const ModelSpec& spec, const TrainFlags& t, const std::optional<NormStats>& stored) {
  if (t.data_dir.empty()) throw UsageError("--data-dir is required for dataset " + spec.dataset);
  if (!fs::is_directory(t.data_dir)) throw DataError("data directory not found: " + t.data_dir);
  LoadedData out{load_dataset(spec.dataset, t.data_dir), {}};
  if (t.train_limit) out.data.train = take(out.data.train, *t.train_limit);
  if (t.test_limit) out.data.test = take(out.data.test, *t.test_limit);
  if (stored) {
    out.norm = *stored;
    apply_normalization(out.data.train, out.norm);
    apply_normalization(out.data.test, out.norm);
  } else {
    out.norm = preprocess(out.data, !t.no_std);
  }
  return out;
}

TrainOptions train_options(const ModelSpec& spec, const TrainFlags& t) {
  const bool mnist = spec.dataset == "mnist";
  TrainOptions o;
  o.epochs = t.epochs.value_or(mnist ? 200 : 300);
  o.batch_size = t.batch.value_or(64);
  o.base_lr = t.lr.value_or(mnist ? 0.01 : 0.1);
  o.momentum = t.momentum.value_or(0.9);
  o.weight_decay = t.weight_decay.value_or(1e-4);
  o.seed = t.seed;
  o.augment = uses_augmentation(spec.dataset) && !t.no_augment;
  if (o.batch_size == 0) throw UsageError("--batch must be >= 1");
  if (!(o.base_lr >= 0.0)) throw UsageError("--lr must be >= 0");
  if (!(o.momentum >= 0.0 && o.momentum < 1.0)) throw UsageError("--momentum must lie in [0,1)");
  return o;
}

std::string fmt(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string epoch_line(const EpochRecord& r, std::size_t total) {
  std::ostringstream os;
  os << "epoch " << r.epoch << '/' << total << " lr=" << r.lr;
  if (!std::isnan(r.train_loss)) os << " train_loss=" << fmt(r.train_loss, 4) << " train_err=" << fmt(r.train_err, 2);
  os << " test_err=" << fmt(r.test_err, 2) << " (" << fmt(r.seconds, 1) << "s)";
  return os.str();
}

struct TrainResult {
  RunMetrics metrics;
  std::size_t params = 0;
};

TrainResult run_training(const ModelSpec& spec, const TrainFlags& t, const fs::path& out_dir, std::ostream& out) {
  const TrainOptions options = train_options(spec, t);
  LoadedData loaded = load_data(spec, t, std::nullopt);
  auto model = build_model<float>(spec, t.seed);
  OptState<float> opt = make_opt_state(*model, static_cast<float>(options.base_lr),
                                       static_cast<float>(options.momentum), static_cast<float>(options.weight_decay));
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "model.cfg");
    cfg << format_model_spec(spec);
  }
  out << "model " << to_string(spec.variant) << " connection=" << to_string(spec.connection)
      << " merge=" << to_string(spec.merge) << " width=" << spec.width
      << " params=" << count_params(*model).total << " train=" << loaded.data.train.size()
      << " test=" << loaded.data.test.size() << '\n';
  RunMetrics metrics = train(*model, opt, loaded.data, options, [&](const EpochRecord& r) {
    out << epoch_line(r, options.epochs) << std::endl;
  });
  write_metrics_csv(out_dir / "metrics.csv", metrics);
  save_checkpoint(out_dir / "model.gmnt", *model, &opt, &loaded.norm);
  out << "wrote " << (out_dir / "metrics.csv").string() << " and " << (out_dir / "model.gmnt").string() << '\n';
  return {std::move(metrics), count_params(*model).total};
}

// ---- commands ---------------------------------------------------------------

int cmd_train(const ModelFlags& mf, TrainFlags tf, const CLI::App* cmd, std::ostream& out) {
  const ModelSpec spec = resolve_spec(mf, &tf, cmd);
  run_training(spec, tf, tf.out_dir, out);
  return 0;
}

int cmd_eval(const ModelFlags& mf, TrainFlags tf, const std::string& checkpoint, const CLI::App* cmd,
             std::ostream& out) {
  const fs::path ckpt(checkpoint);
  if (!fs::exists(ckpt)) throw MissingCheckpoint("checkpoint not found: " + checkpoint);
  const ModelSpec spec = resolve_spec(mf, &tf, cmd, ckpt.parent_path() / "model.cfg");
  auto model = build_model<float>(spec, 0);
  const std::optional<NormStats> norm = load_checkpoint(ckpt, *model, nullptr);
  LoadedData loaded = load_data(spec, tf, norm);
  out << "test_error=" << fmt(evaluate(*model, loaded.data.test), 2) << '\n';
  return 0;
}

int cmd_params(const ModelFlags& mf, std::optional<double> near, double tol, std::ostream& out) {
  const ModelSpec spec = resolve_spec(mf, nullptr, nullptr);
  auto model = build_model<float>(spec, 0);
  const ParamReport report = count_params(*model);
  out << std::left << std::setw(10) << "block" << std::right << std::setw(12) << "params" << '\n';
  for (const BlockParams& b : report.blocks) {
    out << std::left << std::setw(10) << b.block << std::right << std::setw(12) << b.params << '\n';
  }
  out << std::left << std::setw(10) << "total" << std::right << std::setw(12) << report.total << '\n';
  if (near) {
    const double rel = std::abs(static_cast<double>(report.total) - *near) / *near;
    if (rel > tol) {
      throw std::runtime_error("total " + std::to_string(report.total) + " is " + fmt(100.0 * rel, 2) +
                               "% away from " + fmt(*near, 0) + ", tolerance " + fmt(100.0 * tol, 2) + "%");
    }
    out << "assert-near: ok (" << fmt(100.0 * rel, 2) << "% from " << fmt(*near, 0) << ")\n";
  }
  return 0;
}

Shape dataset_input(const ModelSpec& spec, std::size_t batch) {
  const std::size_t side = spec.dataset == "mnist" ? 28 : 32;
  return {batch, spec.in_channels, side, side};
}

int cmd_trace(const ModelFlags& mf, std::size_t batch, bool check, std::ostream& out) {
  const ModelSpec spec = resolve_spec(mf, nullptr, nullptr);
  const Shape input = dataset_input(spec, batch);
  const ShapeTrace trace = forward_trace(spec, input);
  out << std::left << std::setw(8) << "block" << "output" << '\n';
  out << std::left << std::setw(8) << "input" << shape_str(input) << '\n';
  for (const auto& [block, shape] : trace) out << std::left << std::setw(8) << block << shape_str(shape) << '\n';
  out << "depth=" << build_model<float>(spec, 0)->depth() << '\n';
  if (check) {
    auto model = build_model<float>(spec, 0);
    NoGradGuard no_grad;
    RunContext<float> ctx;
    ctx.mode = Mode::Eval;
    Rng rng(0);
    model->forward(Tensor<float>::randn(input, rng), ctx);
    if (ctx.shapes != trace) {
      std::string detail;
      for (std::size_t i = 0; i < std::min(ctx.shapes.size(), trace.size()); ++i) {
        if (ctx.shapes[i] != trace[i]) {
          detail = ctx.shapes[i].first + " ran " + shape_str(ctx.shapes[i].second) + ", traced " +
                   shape_str(trace[i].second);
          break;
        }
      }
      if (detail.empty()) detail = "block count differs";
      throw std::runtime_error("trace check failed: " + detail);
    }
    out << "check: ok (" << trace.size() << " blocks)\n";
  }
  return 0;
}

std::string stats_number(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

int cmd_visualize(const ModelFlags& mf, TrainFlags tf, const std::string& checkpoint, std::size_t index,
                  std::vector<std::string> taps, const std::string& out_dir, const CLI::App* cmd, std::ostream& out) {
  const fs::path ckpt(checkpoint);
  if (!fs::exists(ckpt)) throw MissingCheckpoint("checkpoint not found: " + checkpoint);
  const ModelSpec spec = resolve_spec(mf, &tf, cmd, ckpt.parent_path() / "model.cfg");
  auto model = build_model<float>(spec, 0);
  const std::optional<NormStats> norm = load_checkpoint(ckpt, *model, nullptr);
  if (taps.empty()) taps = default_taps(spec);
  LoadedData loaded = load_data(spec, tf, norm);
  const DatasetSplit& test = loaded.data.test;
  if (index >= test.size()) {
    throw UsageError("--index " + std::to_string(index) + " out of range for " + std::to_string(test.size()) +
                     " test images");
  }
  const std::size_t per = test.images.numel() / test.size();
  Tensor<float> image({1, test.images.dim(1), test.images.dim(2), test.images.dim(3)},
                      std::vector<float>(test.images.ptr() + index * per, test.images.ptr() + (index + 1) * per));
  const std::map<std::string, Tensor<float>> maps = extract_feature_maps(*model, image, taps);

  fs::create_directories(out_dir);
  std::ofstream stats(fs::path(out_dir) / "stats.txt");
  stats << "image_index=" << index << "\nlabel=" << test.labels[index] << '\n';
  for (const std::string& tap : taps) {
    const Tensor<float>& t = maps.at(tap);
    if (t.rank() != 4) throw UsageError("tap '" + tap + "' is not a feature map (shape " + shape_str(t.shape()) + ")");
    const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
    for (std::size_t ch = 0; ch < c; ++ch) {
      write_pgm(fs::path(out_dir) / (tap + "_" + std::to_string(ch) + ".pgm"), w, h,
                normalize_map(t.ptr() + ch * h * w, h * w));
    }
    double sum = 0.0, peak = 0.0;
    for (float v : t.data()) {
      sum += v;
      peak = std::max(peak, static_cast<double>(std::abs(v)));
    }
    stats << tap << ".channels=" << c << '\n'
          << tap << ".height=" << h << '\n'
          << tap << ".width=" << w << '\n'
          << tap << ".mean=" << stats_number(sum / static_cast<double>(t.numel())) << '\n'
          << tap << ".max_abs=" << stats_number(peak) << '\n'
          << tap << ".sparsity=" << stats_number(sparsity(t)) << '\n';
    out << tap << ": " << c << " maps of " << h << 'x' << w << ", sparsity=" << fmt(sparsity(t), 4) << '\n';
  }
  out << "wrote " << out_dir << '\n';
  return 0;
}

const std::vector<std::string> kAblationGrid = {"none", "block1", "block3", "8+4", "8+2", "8+4&16+8", "4+4"};

int cmd_ablate(ModelFlags mf, TrainFlags tf, std::vector<std::string> settings, const CLI::App* cmd,
               std::ostream& out) {
  if (settings.empty()) settings = kAblationGrid;
  for (const std::string& s : settings) {
    try {
      (void)group_profile(s);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const fs::path root(tf.out_dir);
  fs::create_directories(root);
  std::ostringstream combined;
  combined << "setting,params,epoch,lr,train_loss,train_err,test_err,seconds\n";
  for (const std::string& setting : settings) {
    mf.groups = setting;
    TrainFlags run_flags = tf;
    const ModelSpec spec = resolve_spec(mf, &run_flags, cmd);
    out << "== groups " << setting << '\n';
    std::string dir_name = setting;
    std::replace(dir_name.begin(), dir_name.end(), '&', '_');
    const TrainResult result = run_training(spec, run_flags, root / dir_name, out);
    std::istringstream rows(metrics_csv(result.metrics));
    std::string row;
    std::getline(rows, row);  // header
    while (std::getline(rows, row)) combined << setting << ',' << result.params << ',' << row << '\n';
  }
  std::ofstream csv(root / "ablation.csv");
  csv << combined.str();
  out << "wrote " << (root / "ablation.csv").string() << '\n';
  return 0;
}

}  // namespace

std::vector<std::uint8_t> normalize_map(const float* values, std::size_t count) {
  std::vector<std::uint8_t> px(count, 128);
  if (count == 0) return px;
  const auto [lo, hi] = std::minmax_element(values, values + count);
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0.0)) return px;
  for (std::size_t i = 0; i < count; ++i) {
    const double v = (static_cast<double>(values[i]) - *lo) / range;
    px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return px;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw std::invalid_argument("pgm pixel count does not match size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

double sparsity(const Tensor<float>& activations) {
  double peak = 0.0;
  for (float v : activations.data()) peak = std::max(peak, static_cast<double>(std::abs(v)));
  if (peak == 0.0) return 1.0;
  const double cut = 0.01 * peak;
  std::size_t low = 0;
  for (float v : activations.data()) low += std::abs(v) <= cut;
  return static_cast<double>(low) / static_cast<double>(activations.numel());
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"GM-Net: grouped-and-merged convolutional networks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  ModelFlags mf;
  TrainFlags tf;
  std::string checkpoint, vis_out = "feature_maps";
  std::optional<double> near;
  double tol = 0.10;
  std::size_t trace_batch = 1, index = 0;
  bool check = false;
  std::vector<std::string> taps, settings;

  CLI::App* train_cmd = app.add_subcommand("train", "train a model, write metrics.csv, model.gmnt and model.cfg");
  add_model_flags(train_cmd, mf);
  add_train_flags(train_cmd, tf);

  CLI::App* eval_cmd = app.add_subcommand("eval", "print test_error=<percent> for a checkpoint");
  add_model_flags(eval_cmd, mf);
  add_data_flags(eval_cmd, tf);
  eval_cmd->add_option("--checkpoint", checkpoint, "GMNT checkpoint")->required();

  CLI::App* params_cmd = app.add_subcommand("params", "per-block and total trainable parameter counts");
  add_model_flags(params_cmd, mf);
  params_cmd->add_option("--assert-near", near, "fail unless the total is within --tol of this value");
  params_cmd->add_option("--tol", tol, "relative tolerance for --assert-near (default 0.10)");

  CLI::App* trace_cmd = app.add_subcommand("trace", "block output shapes");
  add_model_flags(trace_cmd, mf);
  trace_cmd->add_option("--batch", trace_batch, "batch dimension of the traced input (default 1)");
  trace_cmd->add_flag("--check", check, "also run a real forward pass and compare shapes");

  CLI::App* vis_cmd = app.add_subcommand("visualize", "write one PGM per channel per tap, plus stats.txt");
  add_model_flags(vis_cmd, mf);
  add_data_flags(vis_cmd, tf);
  vis_cmd->add_option("--checkpoint", checkpoint, "GMNT checkpoint")->required();
  vis_cmd->add_option("--index", index, "test image index (default 0)");
  vis_cmd->add_option("--taps", taps, "tap names (default: BU_s, BU_f, merge adaption unit, BU_e)")->delimiter(',');
  vis_cmd->add_option("--out", vis_out, "output directory (default feature_maps)");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "train the group-setting grid and write ablation.csv");
  add_model_flags(ablate_cmd, mf);
  add_train_flags(ablate_cmd, tf);
  ablate_cmd->add_option("--settings", settings, "group profiles to run (default: the full grid)")->delimiter(',');

  std::vector<std::string> argv_store{"gmnet"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(mf, tf, train_cmd, out);
    if (eval_cmd->parsed()) return cmd_eval(mf, tf, checkpoint, eval_cmd, out);
    if (params_cmd->parsed()) return cmd_params(mf, near, tol, out);
    if (trace_cmd->parsed()) return cmd_trace(mf, trace_batch, check, out);
    if (vis_cmd->parsed()) return cmd_visualize(mf, tf, checkpoint, index, taps, vis_out, vis_cmd, out);
    if (ablate_cmd->parsed()) return cmd_ablate(mf, tf, settings, ablate_cmd, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const MissingCheckpoint& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return kExitFailure;
  }
  err << "error: no command given\n";
  return kExitUsage;
}

}  // namespace gmnet::cli
