// SPDX-License-Identifier: Apache-2.0
#include "gmnet/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "gmnet/ops.hpp"

namespace gmnet {

double lr_at(std::size_t epoch, std::size_t total_epochs, double base_lr) {
  if (epoch >= total_epochs) {
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(total_epochs) + ")");
  }
  if (epoch < total_epochs / 2) return base_lr;
  if (epoch < 3 * total_epochs / 4) return base_lr / 10.0;
  return base_lr / 100.0;
}

template <typename T>
OptState<T> make_opt_state(const Model<T>& model, T base_lr, T momentum, T weight_decay) {
  if (!(momentum >= T{0} && momentum < T{1})) {
    throw std::invalid_argument("momentum must lie in [0,1), got " + std::to_string(momentum));
  }
  OptState<T> st;
  st.momentum = momentum;
  st.weight_decay = weight_decay;
  st.base_lr = base_lr;
  for (const auto& [name, node] : model.params()) {
    st.velocity.emplace(name, Tensor<T>(node->value.shape()));
    if (model.decays(name)) st.decayed.insert(name);
  }
  return st;
}

template <typename T>
void nesterov_step(const ParamSet<T>& params, OptState<T>& state, T lr) {
  for (const auto& [name, node] : params) {
    if (!node->grad) throw std::invalid_argument("nesterov_step: parameter '" + name + "' has no gradient");
  }
  const T mu = state.momentum;
  for (const auto& [name, node] : params) {
    auto it = state.velocity.find(name);
    if (it == state.velocity.end()) it = state.velocity.emplace(name, Tensor<T>(node->value.shape())).first;
    Tensor<T>& v = it->second;
    if (v.shape() != node->value.shape()) {
      throw std::invalid_argument("nesterov_step: velocity for '" + name + "' has shape " + shape_str(v.shape()) +
                                  ", parameter has " + shape_str(node->value.shape()));
    }
    const T wd = state.decayed.count(name) ? state.weight_decay : T{0};
    T* p = node->value.ptr();
    T* vp = v.ptr();
    const T* gp = node->grad->ptr();
    const std::size_t count = v.numel();
    for (std::size_t i = 0; i < count; ++i) {
      const T g = gp[i] + wd * p[i];
      vp[i] = mu * vp[i] + g;
      p[i] -= lr * (g + mu * vp[i]);
    }
  }
}

std::vector<std::int32_t> argmax_rows(const Tensor<float>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * k;
    out[i] = static_cast<std::int32_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t{words[0]} << 32) | words[1];
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EpochStats train_epoch(Model<float>& model, const DatasetSplit& split, OptState<float>& opt, double lr,
                       std::size_t epoch, const TrainOptions& options) {
  BatchIterator batches(split, options.batch_size, true, mix_seed(options.seed, epoch, 1));
  Rng aug_rng(mix_seed(options.seed, epoch, 2));
  Rng drop_rng(mix_seed(options.seed, epoch, 3));
  double loss_sum = 0.0;
  std::size_t wrong = 0, seen = 0, index = 0;
  Batch batch;
  while (batches.next(batch)) {
    if (options.augment) augment_batch(batch.images, aug_rng);
    RunContext<float> ctx;
    ctx.mode = Mode::Train;
    ctx.rng = &drop_rng;
    Var<float> logits = model.forward(batch.images, ctx);
    Var<float> loss = softmax_cross_entropy(logits, batch.labels);
    const float value = loss->value.item();
    if (!std::isfinite(value)) {
      throw TrainingDiverged("non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch + 1) +
                             " batch " + std::to_string(index));
    }
    const std::vector<std::int32_t> pred = argmax_rows(logits->value);
    backward(loss);
    nesterov_step(model.params(), opt, static_cast<float>(lr));
    model.params().zero_grads();
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != batch.labels[i];
    loss_sum += static_cast<double>(value) * static_cast<double>(pred.size());
    seen += pred.size();
    ++index;
  }
  return EpochStats{loss_sum / static_cast<double>(seen), 100.0 * static_cast<double>(wrong) / static_cast<double>(seen)};
}

double evaluate(Model<float>& model, const DatasetSplit& split, std::size_t batch_size) {
  NoGradGuard no_grad;
  BatchIterator batches(split, batch_size, false, 0);
  std::size_t wrong = 0;
  Batch batch;
  while (batches.next(batch)) {
    RunContext<float> ctx;
    ctx.mode = Mode::Eval;
    const std::vector<std::int32_t> pred = argmax_rows(model.forward(batch.images, ctx)->value);
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != batch.labels[i];
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(split.size());
}

RunMetrics train(Model<float>& model, OptState<float>& opt, const DatasetPair& data, const TrainOptions& options,
                 const std::function<void(const EpochRecord&)>& on_epoch) {
  RunMetrics metrics;
  auto emit = [&](const EpochRecord& r) {
    metrics.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  auto t0 = std::chrono::steady_clock::now();
  EpochRecord initial;
  initial.lr = options.epochs ? lr_at(0, options.epochs, options.base_lr) : options.base_lr;
  initial.train_loss = std::numeric_limits<double>::quiet_NaN();
  initial.train_err = std::numeric_limits<double>::quiet_NaN();
  initial.test_err = evaluate(model, data.test, options.eval_batch);
  initial.seconds = seconds_since(t0);
  emit(initial);
  for (std::size_t e = 0; e < options.epochs; ++e) {
    t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(e, options.epochs, options.base_lr);
    const EpochStats stats = train_epoch(model, data.train, opt, lr, e, options);
    EpochRecord r;
    r.epoch = e + 1;
    r.lr = lr;
    r.train_loss = stats.loss;
    r.train_err = stats.error;
    r.test_err = evaluate(model, data.test, options.eval_batch);
    r.seconds = seconds_since(t0);
    emit(r);
  }
  return metrics;
}

std::string metrics_csv(const RunMetrics& metrics) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,train_err,test_err,seconds\n";
  auto num = [&](double v, int digits) {
    if (std::isnan(v)) {
      os << "nan";
    } else {
      os << std::fixed << std::setprecision(digits) << v;
    }
  };
  for (const EpochRecord& r : metrics) {
    os << r.epoch << ',';
    os << std::defaultfloat << std::setprecision(6) << r.lr << ',';
    num(r.train_loss, 6);
    os << ',';
    num(r.train_err, 2);
    os << ',';
    num(r.test_err, 2);
    os << ',';
    num(r.seconds, 1);
    os << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& metrics) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_csv(metrics);
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'M', 'N', 'T'};
constexpr std::string_view kVelocityPrefix = "velocity:";

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  const std::uint8_t* take(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(source_ + ": truncated while reading " + what + " at offset " + std::to_string(pos_) +
                            " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) +
                            " left)");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32(const std::string& what) {
    const std::uint8_t* p = take(4, what);
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
  }

  std::uint16_t u16(const std::string& what) {
    const std::uint8_t* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<NamedTensor> checkpoint_tensors(const Model<float>& model, const OptState<float>* opt,
                                            const NormStats* norm) {
  std::vector<NamedTensor> out;
  for (const auto& [name, node] : model.params()) out.push_back({name, node->value});
  for (const auto& [name, bn] : model.batch_norms()) {
    out.push_back({name + ".running_mean", bn->running_mean});
    out.push_back({name + ".running_var", bn->running_var});
  }
  if (opt) {
    for (const auto& [name, node] : model.params()) {
      auto it = opt->velocity.find(name);
      if (it == opt->velocity.end()) throw CheckpointError("optimizer has no velocity for '" + name + "'");
      out.push_back({std::string(kVelocityPrefix) + name, it->second});
    }
  }
  if (norm) {
    const std::size_t c = norm->mean.size();
    out.push_back({"data.mean", Tensor<float>({c}, norm->mean)});
    out.push_back({"data.std", Tensor<float>({c}, norm->std)});
  }
  return out;
}

std::size_t checkpoint_size(const std::vector<NamedTensor>& tensors) {
  std::size_t bytes = 12;
  for (const NamedTensor& t : tensors) bytes += 2 + t.name.size() + 1 + 4 * t.value.rank() + 4 * t.value.numel();
  return bytes;
}

std::vector<std::uint8_t> serialize_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out;
  out.reserve(checkpoint_size(tensors));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long: " + t.name.substr(0, 64));
    if (t.value.rank() > 0xff) throw CheckpointError("tensor rank too large: " + t.name);
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  Reader in(bytes, source);
  const std::uint8_t* magic = in.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(source + ": bad magic, not a GMNT checkpoint");
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const std::uint32_t count = in.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string at = "tensor " + std::to_string(i);
    const std::uint16_t len = in.u16(at + " name length");
    const std::uint8_t* name = in.take(len, at + " name");
    NamedTensor t;
    t.name.assign(reinterpret_cast<const char*>(name), len);
    const std::uint8_t rank = *in.take(1, "rank of '" + t.name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = in.u32("dims of '" + t.name + "'");
      if (d == 0) throw CheckpointError(source + ": zero dimension in '" + t.name + "'");
    }
    const std::size_t numel = shape_numel(shape);
    const std::uint8_t* raw = in.take(4 * numel, "values of '" + t.name + "'");
    t.value = rank ? Tensor<float>::uninitialized(shape) : Tensor<float>();
    float* dst = t.value.ptr();
    for (std::size_t k = 0; k < numel; ++k) {
      const std::uint8_t* p = raw + 4 * k;
      const std::uint32_t u =
          std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
      dst[k] = std::bit_cast<float>(u);
    }
    out.push_back(std::move(t));
  }
  if (!in.done()) {
    throw CheckpointError(source + ": " + std::to_string(bytes.size() - in.offset()) +
                          " trailing bytes after the last tensor");
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const OptState<float>* opt,
                     const NormStats* norm) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(checkpoint_tensors(model, opt, norm));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

std::optional<NormStats> load_checkpoint(const std::filesystem::path& path, Model<float>& model,
                                         OptState<float>* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string source = path.string();
  std::vector<NamedTensor> stored = parse_checkpoint(bytes, source);

  // Destinations for every tensor the current model expects.
  std::map<std::string, Tensor<float>*> targets;
  std::vector<std::string> order;
  auto expect = [&](const std::string& name, Tensor<float>* t) {
    targets.emplace(name, t);
    order.push_back(name);
  };
  for (const auto& [name, node] : model.params()) expect(name, &node->value);
  for (const auto& [name, bn] : model.batch_norms()) {
    expect(name + ".running_mean", &bn->running_mean);
    expect(name + ".running_var", &bn->running_var);
  }
  if (opt) {
    for (const auto& [name, node] : model.params()) {
      auto it = opt->velocity.try_emplace(name, Tensor<float>(node->value.shape())).first;
      expect(std::string(kVelocityPrefix) + name, &it->second);
    }
  }

  // Validate everything before touching the model.
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : stored) {
    if (!by_name.emplace(t.name, &t).second) throw CheckpointError(source + ": duplicate tensor '" + t.name + "'");
    const bool optional = t.name == "data.mean" || t.name == "data.std" ||
                          (!opt && t.name.rfind(kVelocityPrefix, 0) == 0);
    auto it = targets.find(t.name);
    if (it == targets.end()) {
      if (optional) continue;
      throw CheckpointError(source + ": tensor '" + t.name + "' does not exist in the current model spec");
    }
    if (it->second->shape() != t.value.shape()) {
      throw CheckpointError(source + ": tensor '" + t.name + "' has shape " + shape_str(t.value.shape()) +
                            ", current model spec expects " + shape_str(it->second->shape()));
    }
  }
  // A checkpoint saved without optimizer state leaves the velocities at zero.
  const bool has_velocity = std::any_of(stored.begin(), stored.end(), [](const NamedTensor& t) {
    return t.name.rfind(kVelocityPrefix, 0) == 0;
  });
  auto skippable = [&](const std::string& name) { return !has_velocity && name.rfind(kVelocityPrefix, 0) == 0; };
  for (const std::string& name : order) {
    if (!by_name.count(name) && !skippable(name)) throw CheckpointError(source + ": missing tensor '" + name + "'");
  }

  for (const std::string& name : order) {
    if (by_name.count(name)) *targets.at(name) = by_name.at(name)->value;
  }

  std::optional<NormStats> norm;
  if (by_name.count("data.mean") && by_name.count("data.std")) {
    const Tensor<float>& m = by_name.at("data.mean")->value;
    const Tensor<float>& s = by_name.at("data.std")->value;
    norm = NormStats{std::vector<float>(m.data().begin(), m.data().end()),
                     std::vector<float>(s.data().begin(), s.data().end())};
  }
  return norm;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

template OptState<float> make_opt_state<float>(const Model<float>&, float, float, float);
template OptState<double> make_opt_state<double>(const Model<double>&, double, double, double);
template void nesterov_step<float>(const ParamSet<float>&, OptState<float>&, float);
template void nesterov_step<double>(const ParamSet<double>&, OptState<double>&, double);

}  // namespace gmnet
