#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sharplens/data.hpp"
#include "sharplens/model.hpp"

namespace sharplens {

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 128;
  double base_lr = 1e-3;
  double warmup_start_lr = 1e-4;
  std::size_t warmup_epochs = 5;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Linear warmup from warmup_start_lr to base_lr over warmup_epochs, then
/// constant. `epoch` is 0-based.
double lr_schedule(const TrainConfig& config, std::size_t epoch);

/// Heavy-ball SGD: v <- mu v + g (+ wd theta), theta <- theta - lr v.
class SgdMomentum {
 public:
  SgdMomentum(const Params& params, double momentum, double weight_decay = 0.0);

  void step(Params& params, std::span<const Tensor> grads, double lr);
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

/// Statistics accumulated over the mini-batches of one epoch, each batch
/// evaluated before its update.
struct EpochStats {
  std::size_t epoch = 0;  // 1-based: stats of the epoch that ends here
  double lr = 0.0;
  double loss = 0.0;
  double error = 0.0;
  std::size_t clean_count = 0;
  double clean_loss = 0.0;
  double clean_error = 0.0;
  std::size_t noisy_count = 0;
  double noisy_loss = 0.0;
  double noisy_error = 0.0;
};

struct TrainCallbacks {
  /// Epochs (number of completed epochs, 0 = initialisation) at which
  /// on_measure fires. Must be within [0, epochs].
  std::vector<std::size_t> measure_epochs;
  std::function<void(std::size_t epoch, const Params&)> on_measure;
  std::function<void(const EpochStats&)> on_epoch;
  /// Where a divergence dump goes; nothing is written when empty.
  std::filesystem::path diagnostics_dir;
};

struct TrainResult {
  Params params;
  std::vector<EpochStats> log;
};

/// Raised when the training loss stops being finite. The message carries the
/// optimiser state at the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch SGD on the mean cross-entropy. Batch order for epoch e comes
/// from derive_seed(config.seed, {e}).
TrainResult train(Params params, const ImageDataset& data, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {});

}  // namespace sharplens
