#pragma once

// Teacher-forced optimisation: Adam, global-norm clipping, plateau LR
// decay, early stopping, checkpoints and champion selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "caplab/data.hpp"
#include "caplab/models.hpp"

namespace caplab {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainingConfig {
  double learning_rate = 1e-4;
  double clipnorm = 1.0;
  double label_epsilon = 0.1;
  std::size_t plateau_patience = 1;
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 3;
  std::size_t max_epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double min_delta = 1e-6;

  void validate() const;
};

// Scales every gradient by clipnorm/g when the global L2 norm g exceeds
// clipnorm.
std::vector<std::vector<double>> clip_by_global_norm(std::vector<std::vector<double>> grads, double clipnorm);
// In place over a store's gradient buffers; returns the norm before clipping.
double clip_gradients(ParameterStore& params, double clipnorm);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const ParameterStore& params);
};

void adam_update(ParameterStore& params, AdamState& state, double lr);

// Keras-style ReduceLROnPlateau on validation loss.
class PlateauScheduler {
 public:
  PlateauScheduler(std::size_t patience, double factor, double min_delta = 1e-6)
      : patience_(patience), factor_(factor), min_delta_(min_delta) {}
  // Learning rate for the next epoch.
  double update(double val_loss, double lr);

  double best() const { return best_; }
  std::size_t wait() const { return wait_; }
  void restore(double best, std::size_t wait) {
    best_ = best;
    wait_ = wait;
  }

 private:
  std::size_t patience_;
  double factor_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 1e-6) : patience_(patience), min_delta_(min_delta) {}
  // True when training should stop after this epoch.
  bool update(double val_loss);

  double best() const { return best_; }
  std::size_t wait() const { return wait_; }
  void restore(double best, std::size_t wait) {
    best_ = best;
    wait_ = wait;
  }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t wait_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch

  bool operator==(const EpochRecord&) const = default;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  ModelConfig model_config;
  TrainingConfig training_config;
  std::uint64_t model_seed = 0;
  std::vector<TensorRecord> params;
  AdamState adam;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
  double next_lr = 0.0;
  double plateau_best = std::numeric_limits<double>::infinity();
  std::size_t plateau_wait = 0;
  double stop_best = std::numeric_limits<double>::infinity();
  std::size_t stop_wait = 0;
  bool stopped = false;
};

// "CKPT", u32 version, u32 parameter count and records (u32 name length,
// name, u32 rank, u64 extents, f64 values), u64 Adam step and the m then v
// records, then a u64-length JSON trailer with configs and histories.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<TensorRecord> snapshot_params(const ParameterStore& params);
void restore_params(ParameterStore& params, const std::vector<TensorRecord>& records);
CaptionModel model_from_checkpoint(const Checkpoint& ckpt);

void write_loss_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

struct TrainOptions {
  // When set: checkpoints/epoch_NNN.ckpt and loss.csv are written here.
  std::filesystem::path output_dir;
  const Checkpoint* resume = nullptr;
  // Stop (without the early-stop flag) once this epoch is done; 0 = off.
  std::size_t halt_after_epoch = 0;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<std::filesystem::path> checkpoints;
  Checkpoint last;
  bool stopped_early = false;
};

// Mean smoothed loss per predicted token over every reference.
double dataset_loss(const CaptionModel& model, const std::vector<CaptionedExample>& examples, double epsilon);

TrainResult train(CaptionModel& model, const std::vector<CaptionedExample>& train_set,
                  const std::vector<CaptionedExample>& val_set, const TrainingConfig& config,
                  const TrainOptions& options = {}, std::uint64_t model_seed = 0);

struct ScoredEpoch {
  std::size_t epoch = 0;
  double score = 0.0;
};

// Highest score; ties go to the earliest epoch.
ScoredEpoch select_champion(const std::vector<ScoredEpoch>& scored);
const Checkpoint& select_champion(const std::vector<Checkpoint>& checkpoints,
                                  const std::function<double(const Checkpoint&)>& metric);

struct DivergenceReport {
  std::size_t min_val_loss_epoch = 0;
  std::size_t max_metric_epoch = 0;
  bool diverged = false;
};

DivergenceReport loss_metric_divergence(const std::vector<EpochRecord>& history, const std::vector<ScoredEpoch>& scores);

}  // namespace caplab
