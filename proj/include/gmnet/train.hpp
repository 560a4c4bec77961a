// SPDX-License-Identifier: Apache-2.0
//
// Nesterov SGD with step learning-rate drops, epoch loops, evaluation,
// GMNT checkpoints and metrics CSV output.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmnet/arch.hpp"
#include "gmnet/autodiff.hpp"
#include "gmnet/data.hpp"
#include "gmnet/tensor.hpp"

namespace gmnet {

/// base_lr before floor(total/2), base_lr/10 before floor(3*total/4), base_lr/100 after.
double lr_at(std::size_t epoch, std::size_t total_epochs, double base_lr);

template <typename T>
struct OptState {
  T momentum = T(0.9);
  T weight_decay = T(1e-4);
  T base_lr = T(0.1);
  std::map<std::string, Tensor<T>> velocity;  // keyed by parameter name
  std::set<std::string> decayed;              // parameters that receive weight decay
};

/// Zero velocities for every parameter; decay applies to conv and fc weights.
template <typename T>
OptState<T> make_opt_state(const Model<T>& model, T base_lr, T momentum = T(0.9), T weight_decay = T(1e-4));

/// g = grad + wd*p (decayed params only); v = mu*v + g; p -= lr*(g + mu*v).
/// Throws naming the first parameter without a gradient.
template <typename T>
void nesterov_step(const ParamSet<T>& params, OptState<T>& state, T lr);

/// Non-finite loss during training.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  double loss = 0.0;
  double error = 0.0;  // percent
};

struct TrainOptions {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool augment = false;
  std::size_t eval_batch = 250;
};

/// One shuffled pass of (augment) -> forward -> loss -> backward -> step.
/// Shuffle order, augmentation and dropout masks derive from (seed, epoch).
EpochStats train_epoch(Model<float>& model, const DatasetSplit& split, OptState<float>& opt, double lr,
                       std::size_t epoch, const TrainOptions& options);

/// 100 * misclassified / N using argmax of eval-mode logits.
double evaluate(Model<float>& model, const DatasetSplit& split, std::size_t batch_size = 250);

/// Row-wise argmax, lowest index on ties.
std::vector<std::int32_t> argmax_rows(const Tensor<float>& logits);

struct EpochRecord {
  std::size_t epoch = 0;  // completed epochs; 0 is the untrained evaluation
  double lr = 0.0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double test_err = 0.0;
  double seconds = 0.0;
};

using RunMetrics = std::vector<EpochRecord>;

/// Evaluates the untrained model, then runs `options.epochs` epochs.
/// `on_epoch` sees every record as soon as it is produced.
RunMetrics train(Model<float>& model, OptState<float>& opt, const DatasetPair& data, const TrainOptions& options,
                 const std::function<void(const EpochRecord&)>& on_epoch = {});

std::string metrics_csv(const RunMetrics& metrics);
void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& metrics);

// ---- checkpoints ------------------------------------------------------------

/// Bad magic, version, shape or truncated checkpoint data.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Parameters, then BN running statistics (`<bn>.running_mean`, `<bn>.running_var`),
/// then velocities (`velocity:<param>`) when `opt` is given, then the input
/// normalization (`data.mean`, `data.std`) when `norm` is given.
std::vector<NamedTensor> checkpoint_tensors(const Model<float>& model, const OptState<float>* opt,
                                            const NormStats* norm = nullptr);

std::vector<std::uint8_t> serialize_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source);

/// 12-byte header plus, per tensor, 2 + name + 1 + 4*rank + 4*numel bytes.
std::size_t checkpoint_size(const std::vector<NamedTensor>& tensors);

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const OptState<float>* opt,
                     const NormStats* norm = nullptr);

/// Restores into an already-built model (and optimizer). Every model tensor
/// must be present with the same shape; velocity entries are skipped when
/// `opt` is null. Returns the stored input normalization, if any.
std::optional<NormStats> load_checkpoint(const std::filesystem::path& path, Model<float>& model,
                                         OptState<float>* opt);

/// Raises glibc's mmap and trim thresholds so large activation buffers are
/// recycled instead of being returned to the kernel after every step.
void tune_allocator();

}  // namespace gmnet
