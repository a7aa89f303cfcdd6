#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "idem/data.hpp"
#include "idem/losses.hpp"
#include "idem/network.hpp"
#include "idem/optim.hpp"

namespace idem {

/// Invalid configuration; the message names the offending field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or gradients during a training step.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t iterations = 6;    // N, unit applications per pass
  std::size_t deblur_times = 2;  // passes per step
  Widths widths = default_widths();
  std::size_t batch_size = 4;
  double lr0 = 1e-4;
  double lr_decay = 0.5;
  std::size_t decay_every = 500;  // epochs
  AdamConfig adam;
  std::size_t epochs = 0;
  LossWeights loss;
  std::uint64_t seed = 0;
  std::size_t patch = 64;
  AugmentOptions augment;
  /// "xavier" initializes every conv alike; "zero" also zeroes the output
  /// head so training starts from the identity map.
  std::string head_init = "xavier";
  std::size_t validate_every = 1;    // epochs; 0 disables validation
  std::size_t checkpoint_every = 10;  // epochs; 0 keeps only last/best

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys and type errors raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "config");
/// Hash of every field that affects the optimisation trajectory (not epochs
/// or bookkeeping cadence), so a run can be resumed with a larger epoch count.
std::uint64_t config_hash(const TrainConfig& cfg);

/// lr0 * decay^floor(epoch / decay_every)
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct StepMetrics {
  double total = 0, idem = 0, sharp = 0, grad_norm = 0;
};

template <typename T>
struct LossAndGrad {
  LossValue<T> loss;
  ModelParams<T> grads;
};

struct GradientOptions {
  /// Stop gradients between passes (diagnostic only; training never does this).
  bool detach_between_passes = false;
};

/// Re-deblurs `blurry` cfg.deblur_times times, applies total_loss against
/// `sharp`, and backpropagates through every pass and iteration. Inputs are
/// normalized batches.
template <typename T>
LossAndGrad<T> loss_and_gradients(const ModelParams<T>& params, const Tensor<T>& blurry, const Tensor<T>& sharp,
                                  const TrainConfig& cfg, const GradientOptions& options = {});

/// One Adam update at learning rate `lr` on a normalized batch.
template <typename T>
StepMetrics train_step(ModelParams<T>& params, AdamState<T>& opt, const Tensor<T>& blurry, const Tensor<T>& sharp,
                       const TrainConfig& cfg, double lr);

/// Normalizes and stacks [0,1] pairs into (blurry, sharp) batches.
std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<BlurPair>& pairs);

struct MetricsRow {
  std::size_t step = 0, epoch = 0;
  double lr = 0, total = 0, idem = 0, sharp = 0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();  // only on validation steps

  bool operator==(const MetricsRow& o) const;
};

inline constexpr const char* kMetricsHeader = "step,epoch,lr,total,idem,sharp,val_psnr";
std::string metrics_csv_line(const MetricsRow& row);

struct Checkpoint {
  ModelParams<float> params;
  AdamState<float> optimizer;
  std::size_t epoch = 0, step = 0;
  nlohmann::ordered_json config;
  std::uint64_t config_hash = 0;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  std::vector<MetricsRow> history;
};

inline constexpr std::uint32_t kCheckpointSchema = 1;

/// Binary container: magic, schema version, JSON header, raw float32 payload.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<Checkpoint> resume;
  std::function<void(const MetricsRow&)> on_step;
};

/// Seeded epoch loop over `train_set` with validation PSNR on `val_set`.
/// Writes metrics.csv, last.ckpt, best.ckpt and periodic epoch checkpoints
/// under out_dir.
Checkpoint train(const TrainConfig& cfg, const std::vector<BlurPair>& train_set, const std::vector<BlurPair>& val_set,
                 const TrainOptions& options = {});

/// Deterministic train/validation split: the last round(fraction * n) pairs validate.
std::pair<std::vector<BlurPair>, std::vector<BlurPair>> split_dataset(std::vector<BlurPair> pairs, double val_fraction);

}  // namespace idem
