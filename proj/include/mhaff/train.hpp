#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mhaff/data.hpp"
#include "mhaff/model.hpp"

namespace mhaff {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 50;
  double learning_rate = 1e-5;
  double lr_factor = 0.1;
  std::size_t lr_patience = 5;
  std::size_t early_stop_patience = 20;
  // A validation loss counts as an improvement when it beats the best by more than this.
  double improvement_threshold = 1e-8;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::string data = "synth://C=8,n=40,size=32,seed=0";
  SplitRatios split;
  bool augment = true;
  AugmentSpec augmentation;
  PreprocessConfig preprocess;
  AdamConfig adam;
  ModelConfig model;

  void validate() const;
};

// Structured JSON; missing keys keep their defaults, unknown keys are rejected.
TrainConfig config_from_json(std::string_view text);
std::string config_to_json(const TrainConfig& config);
TrainConfig load_config(const std::filesystem::path& path);

class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& config, std::vector<Tensor> params);

  // Applies one bias-corrected update from the accumulated gradients.
  void step(double lr);
  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t steps) { steps_ = steps; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }

 private:
  AdamConfig config_;
  std::vector<Tensor> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
};

// Multiplies the lr by `factor` once `patience` consecutive epochs pass
// without improvement, then restarts the count.
struct PlateauScheduler {
  double factor = 0.1;
  std::size_t patience = 5;
  double threshold = 1e-8;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  double step(double val_loss, double lr);
};

// Signals a stop after `patience` consecutive epochs without improvement.
struct EarlyStopping {
  std::size_t patience = 20;
  double threshold = 1e-8;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  bool step(double val_loss);
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  // Learning rate used during the epoch.
  double lr = 0.0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct TrainState {
  double lr = 0.0;
  std::size_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  PlateauScheduler scheduler;
  EarlyStopping early_stop;
  std::vector<EpochMetrics> history;
};

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history);
std::vector<EpochMetrics> read_history_csv(const std::filesystem::path& path);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> labels;
};

struct TrainReport {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double best_val_accuracy = 0.0;
  bool stopped_early = false;
  double final_lr = 0.0;
  std::optional<std::filesystem::path> checkpoint;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  // Shares an already-opened dataset; its class count overrides the config's.
  Trainer(TrainConfig config, Dataset dataset);

  const TrainConfig& config() const { return config_; }
  Model& model() { return model_; }
  const Dataset& dataset() const { return dataset_; }
  TrainState& state() { return state_; }
  Adam& optimizer() { return adam_; }

  // One optimisation step on the given records; returns the batch loss.
  double step(std::span<const std::size_t> records, std::uint64_t stream, std::size_t epoch, bool augment);
  // Shuffled pass over the training split; returns the sample-weighted mean loss.
  double train_epoch(std::size_t epoch);
  EvalResult evaluate(Split split);
  EvalResult evaluate_records(std::span<const std::size_t> records);

  // Full protocol: epochs, validation, scheduler, early stop, best-val
  // checkpoint and history.csv under out_dir when given.
  TrainReport run(const std::optional<std::filesystem::path>& out_dir = std::nullopt);

  // Replaces each measured validation loss before the scheduler and early
  // stop see it; used to inject plateaus.
  std::function<double(std::size_t epoch, double measured)> val_loss_hook;
  // Called after every epoch.
  std::function<void(const EpochMetrics&)> on_epoch;

 private:
  std::pair<Tensor, Tensor> views(std::size_t record, std::size_t epoch, bool augment);
  Tensor batch_probabilities(std::span<const std::size_t> records, bool train, std::size_t epoch, bool augment,
                             Rng& dropout_rng);

  TrainConfig config_;
  Dataset dataset_;
  Model model_;
  Adam adam_;
  TrainState state_;
  std::vector<std::optional<std::pair<Tensor, Tensor>>> view_cache_;
};

void save_checkpoint(const std::filesystem::path& path, Model& model, const TrainConfig& config,
                     const TrainState& state, Adam* adam = nullptr);

struct Checkpoint {
  TrainConfig config;
  Model model;
  TrainState state;
  // Adam moments keyed "m.<param>" / "v.<param>", present when saved with an optimizer.
  std::map<std::string, Tensor> optimizer;
  std::size_t optimizer_steps = 0;
};

// Throws CheckpointError with a distinct fault for each kind of corruption.
Checkpoint load_checkpoint(const std::filesystem::path& path);

EvalResult evaluate_checkpoint(const std::filesystem::path& path, Split split,
                               const std::optional<std::string>& data_override = std::nullopt);

struct ArmResult {
  std::string name;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  // Validation metrics at the best-validation-loss epoch.
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<EpochMetrics> history;
};

// Trains the six mixed wirings (ablation order XYY, YXY, YYX, YXX, XXY, XYX)
// from identical seeds and data.
std::vector<ArmResult> ablate_qkv(const TrainConfig& base, const std::optional<std::filesystem::path>& out_dir);

// Trains cnn-only, vit-only, add, concat and mhaff from identical seeds and data.
std::vector<ArmResult> compare_fusions(const TrainConfig& base, const std::optional<std::filesystem::path>& out_dir);

// Per-arm mean of accuracy and loss over seeds; an arm that failed on any
// seed is marked failed. Rows keep the order of the first run.
std::vector<ArmResult> mean_over_seeds(const std::vector<std::vector<ArmResult>>& runs);

// Aligned text table, rows sorted by validation accuracy (descending, stable).
std::string format_table(const std::vector<ArmResult>& rows);
std::string results_to_json(const std::vector<ArmResult>& rows);

// Softmax regression on raw standardized pixels of the patch view; a floor
// for what the synthetic task needs. Returns validation accuracy.
double linear_probe(const TrainConfig& config, const Dataset& dataset, std::size_t epochs, double lr);

}  // namespace mhaff
