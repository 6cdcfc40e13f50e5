#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apaseg/losses.hpp"
#include "apaseg/metrics.hpp"
#include "apaseg/network.hpp"
#include "apaseg/volume.hpp"

namespace apaseg {

struct TrainConfig {
  int epochs = 200;
  int warmup_epochs = 10;
  Index batch_size = 2;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  Index steps_per_epoch = 0;  // 0: ceil(cases / batch_size)
  std::uint64_t seed = 0;     // drives both weight init and sampling
  PatchSpec patch;
  NetworkConfig net;
  double dice_eps = kDiceEps;
  int checkpoint_every = 0;  // epochs between periodic checkpoints; 0 disables them
  bool flip = true;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  Index resolved_steps(std::size_t cases) const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected. The network
/// patch shape follows "patch.shape" unless "net.patch_shape" is given.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warm-up from 0 to lr0, then half-cosine decay to 0 at `epochs`.
double cosine_lr(double epoch, const TrainConfig& cfg);

/// Momentum SGD with L2 weight decay folded into the gradient:
/// g = grad + wd * p;  buf = momentum * buf + g;  p -= lr * buf.
template <typename T>
class Sgd {
 public:
  explicit Sgd(const ParamList<T>& params);

  void step(const ParamList<T>& params, double lr, double momentum, double weight_decay);

  std::vector<Tensor<T>>& buffers() { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const { return buffers_; }

 private:
  std::vector<Tensor<T>> buffers_;
};

struct StepStats {
  double loss = 0.0;
  double dice = 0.0;
  double ce = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double dice = 0.0;
  double ce = 0.0;
  double lr = 0.0;  // learning rate of the epoch's last step
};

nlohmann::json to_json(const EpochRecord& r);
EpochRecord epoch_record_from_json(const nlohmann::json& j);

/// Owns the network, optimiser and sampling state of one training run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<VolumeRecord> dataset);

  /// Restores network, momentum buffers, epoch counter, log and rng state.
  static Trainer resume(const std::filesystem::path& checkpoint, std::vector<VolumeRecord> dataset);

  /// One optimisation step. Throws TrainingError on a non-finite loss.
  StepStats step();
  EpochRecord run_epoch();

  void save_checkpoint(const std::filesystem::path& path) const;

  int epoch() const { return epoch_; }
  Index steps_per_epoch() const { return steps_per_epoch_; }
  std::uint64_t global_step() const { return global_step_; }
  const std::vector<EpochRecord>& log() const { return log_; }
  const TrainConfig& config() const { return cfg_; }
  const Network<float>& network() const { return net_; }
  Network<float>& network() { return net_; }
  const Sgd<float>& optimizer() const { return opt_; }
  std::size_t fallback_count() const { return sampler_->fallback_count(); }

 private:
  TrainConfig cfg_;
  std::shared_ptr<const std::vector<VolumeRecord>> dataset_;
  std::unique_ptr<PatchSampler> sampler_;
  Network<float> net_;
  Sgd<float> opt_;
  std::mt19937_64 rng_;
  Index steps_per_epoch_ = 1;
  int epoch_ = 0;
  Index step_in_epoch_ = 0;
  std::uint64_t global_step_ = 0;
  StepStats epoch_sums_;
  std::vector<EpochRecord> log_;
};

struct TrainOutputs {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many completed epochs (simulates an interruption).
  std::optional<int> stop_epoch;
};

/// Runs training to completion (or stop_epoch) and writes into out_dir:
/// final.ckpt, epoch_NNNN.ckpt every checkpoint_every epochs, train_log.csv,
/// train.log (epoch lines and the axis-weight table) and axis_weights.json.
Trainer train(const TrainConfig& cfg, std::vector<VolumeRecord> dataset, const TrainOutputs& out);

/// epoch,loss,dice,ce,lr with round-trip precision.
void write_train_log_csv(std::ostream& os, const std::vector<EpochRecord>& log);
nlohmann::json axis_weights_json(const std::vector<AxisWeightRow>& rows);

// ---- inference -------------------------------------------------------------------

/// Window origins on a regular grid with stride max(1, floor(patch * (1 - overlap)))
/// per axis; the last window on each axis is clamped to the border.
std::vector<Extent3> window_origins(const Extent3& volume, const Extent3& patch, double overlap);

/// Number of windows covering each voxel.
Tensor<std::int32_t> window_coverage(const Extent3& volume, const Extent3& patch,
                                     const std::vector<Extent3>& origins);

/// Class probabilities (K, H, W, D) averaged uniformly over the windows. The
/// result does not depend on the order of `origins`.
Tensor<float> sliding_window_probabilities(const Network<float>& net, const Tensor<float>& image,
                                           const Extent3& patch, const std::vector<Extent3>& origins);

/// Per-voxel argmax over (K, H, W, D); ties go to the lowest class index.
LabelVolume argmax_labels(const Tensor<float>& probs);

/// Throws ContractError when the volume is smaller than the patch or overlap is outside [0, 1).
LabelVolume sliding_window_infer(const Network<float>& net, const VolumeRecord& volume,
                                 const Extent3& patch, double overlap = 0.5);

// ---- evaluation ------------------------------------------------------------------

struct UnmatchedCase {
  std::string case_id;
  std::string reason;
};

struct EvalReport {
  std::vector<MetricsRow> rows;
  std::vector<UnmatchedCase> unmatched;
  nlohmann::json summary;  // metrics_summary plus "unmatched"
};

/// Matches predictions to ground truth by case id. Missing or mismatched
/// cases are listed in `unmatched` and the rest are still evaluated.
EvalReport evaluate(const std::vector<VolumeRecord>& predictions,
                    const std::vector<VolumeRecord>& ground_truth, int num_classes,
                    const SizeBins& bins = {});

/// Loads every *.vol file in a directory, or the cases of a dataset.json.
std::vector<VolumeRecord> load_volumes(const std::filesystem::path& dir_or_index);

/// Writes the JSON summary to `report` and the per-case CSV next to it (.csv).
void write_eval_report(const std::filesystem::path& report, const EvalReport& r);

}  // namespace apaseg
