#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "floodseg/data.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/model.hpp"
#include "floodseg/models.hpp"

namespace floodseg {

struct AdamConfig {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First and second moment estimates, one pair per parameter tensor.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

AdamState make_adam_state(std::span<const Tensor* const> params);
AdamState make_adam_state(const Model& model);

/// One bias-corrected Adam update; increments state.step first.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
               const AdamConfig& cfg);
void adam_step(Model& model, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  Architecture architecture = Architecture::kUNet;
  int epochs = 100;  // index of the last epoch to run (epochs are 1-based)
  std::size_t batch_size = 4;
  AdamConfig adam;
  LossKind loss = LossKind::kBce;
  int patience = 10;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentationPolicy policy = AugmentationPolicy::all();
  float threshold = 0.5f;

  /// Throws ConfigError unless epochs >= 1, patience >= 1, learning_rate > 0, batch_size >= 1.
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
};

/// Tracks the monitored validation loss. An epoch improves when its loss is
/// below the best so far by more than min_delta; training stops after
/// `patience` consecutive epochs without improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience, double min_delta = 1e-6);

  /// Continue from a restored best (used when resuming).
  void resume(int best_epoch, double best_loss);
  /// Returns true when `loss` is a new best.
  bool observe(int epoch, double loss);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  double min_delta_;
  int best_epoch_ = 0;
  double best_loss_;
  int bad_epochs_ = 0;
};

/// Parameter and buffer values of a model, in Model order.
struct ModelState {
  std::vector<Tensor> params;
  std::vector<Tensor> buffers;
};

ModelState capture_state(const Model& model);
void restore_state(Model& model, const ModelState& state);

/// Everything needed to continue training bit-exactly from the end of `epoch`.
struct TrainState {
  AdamState adam;
  int epoch = 0;
  double best_val_loss = 0.0;
};

struct TrainHooks {
  /// Called after every epoch with its record.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Replaces the measured validation loss (injected-loss harness).
  std::function<double(int epoch, double measured)> val_loss_override;
  /// Returning true ends training after the current epoch.
  std::function<bool(const EpochRecord&)> stop_when;
};

struct TrainResult {
  TrainHistory history;
  /// Training state at history.best_epoch; the model holds the matching weights.
  TrainState state;
};

/// Adam training with on-the-fly augmentation and early stopping. Epoch e
/// shuffles with Rng(seed).fork(2e) and augments sample i with
/// Rng(seed).fork(2e + 1).fork(i), so a run resumed from `resume` repeats an
/// uninterrupted run exactly. On return the model holds the best-epoch weights.
TrainResult train(Model& model, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainConfig& cfg, const TrainState* resume = nullptr, const TrainHooks& hooks = {});

using LogitFn = std::function<Tensor(const Tensor& images)>;

/// Eval-mode pass without augmentation: micro-averaged metrics plus the
/// sample-weighted mean loss.
MetricsReport evaluate(const LogitFn& logits, std::span<const Sample> samples, LossKind loss,
                       std::size_t batch_size = 4, float threshold = 0.5f);
MetricsReport evaluate(const Model& model, std::span<const Sample> samples, LossKind loss,
                       std::size_t batch_size = 4, float threshold = 0.5f);

// ---------------------------------------------------------------- persistence

/// CSV with header epoch,train_loss,train_acc,val_loss,val_acc; 6-decimal values.
std::string history_csv(const TrainHistory& history);
void write_history(const std::filesystem::path& file, const TrainHistory& history);
/// Throws ManifestError naming the offending line.
TrainHistory read_history(const std::filesystem::path& file);

struct CheckpointInfo {
  Architecture architecture = Architecture::kUNet;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  float best_val_loss = 0.0f;
};

struct Checkpoint {
  CheckpointInfo info;
  Model model;
  AdamState adam;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& adam, const CheckpointInfo& info);
/// Throws CorruptCheckpoint naming the field that failed to parse.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& file, const Model& model, const AdamState& adam,
                     const CheckpointInfo& info);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace floodseg
