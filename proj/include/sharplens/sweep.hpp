#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sharplens/data.hpp"
#include "sharplens/metrics.hpp"
#include "sharplens/report.hpp"
#include "sharplens/train.hpp"

namespace sharplens {

enum class DataSource { Synthetic, Cifar10, Cifar100 };

const char* to_string(DataSource s);
DataSource data_source_from_string(const std::string& s);

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  std::vector<std::filesystem::path> train_files;
  std::filesystem::path test_file;
  /// 0 keeps every loaded record.
  std::size_t num_train = 4000;
  std::size_t num_test = 2000;
  std::size_t num_classes = 10;
  SyntheticOptions synthetic;
};

struct SweepConfig {
  TrainConfig train;
  std::vector<std::size_t> widths{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  /// Empty means log_spaced_epochs(train.epochs).
  std::vector<std::size_t> measure_epochs;
  double noise_fraction = 0.2;
  std::size_t num_paths = 3;
  std::size_t max_neighborhood = 7;
  std::size_t tangent_directions = kDefaultTangentDirections;
  double tangent_step = kDefaultTangentStep;
  HessianNormalization normalization = HessianNormalization::AsWritten;
  /// Epoch-wise sweeps also measure K = 1..max_neighborhood at the last slice.
  bool volume_at_final = true;
  bool save_checkpoints = true;
  DataConfig data;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  /// Slices an epoch-wise sweep measures: measure_epochs sorted, or the
  /// log-spaced list when it is empty.
  std::vector<std::size_t> epoch_slices() const;
};

/// 0, 1, 2, 4, 8, ... below `epochs`, then `epochs`.
std::vector<std::size_t> log_spaced_epochs(std::size_t epochs);

struct PreparedData {
  ImageDataset train;
  ImageDataset test;
  DatasetManifest manifest;
};

/// Training split with label noise and a clean held-out split.
PreparedData prepare_data(const SweepConfig& config);

/// Seeds of the random streams of a sweep, all derived from one root seed.
struct SweepSeeds {
  std::uint64_t root = 0;

  std::uint64_t train_data() const;
  std::uint64_t test_data() const;
  std::uint64_t noise() const;
  /// Shared by every width so all models see the same probe directions.
  std::uint64_t measure() const;
  std::uint64_t init(std::size_t width) const;
  std::uint64_t batches(std::size_t width) const;
};

/// Rows for one measurement slice of one model. The per-sample table is
/// copied to `table_out` when given.
std::vector<SweepRecord> measure_slice(const Params& params, const PreparedData& data, std::size_t epoch,
                                       std::size_t neighborhood, const SweepConfig& config,
                                       MeasurementTable* table_out = nullptr);

/// Number of rows measure_slice emits.
std::size_t slice_row_count(const ImageDataset& train, std::size_t neighborhood);

enum class SweepMode { ModelWise, EpochWise };

struct SweepResult {
  std::vector<SweepRecord> records;
  std::vector<std::size_t> completed_widths;
  std::vector<std::size_t> resumed_widths;
  std::vector<std::pair<std::size_t, std::string>> failed_widths;
  ThresholdReport thresholds;
};

/// Trains each width and measures it, appending rows to out_dir/records.csv
/// after every width. Widths already complete in an existing records.csv are
/// reused. A failing width is logged to out_dir/failures.log and skipped.
SweepResult run_sweep(const SweepConfig& config, SweepMode mode, std::ostream* progress = nullptr);

/// Final-epoch point-wise and volume measurements per width.
SweepResult run_modelwise_sweep(const SweepConfig& config, std::ostream* progress = nullptr);
/// Point-wise measurements at every epoch slice per width.
SweepResult run_epochwise_sweep(const SweepConfig& config, std::ostream* progress = nullptr);

/// Trains every grid width without measuring; saves checkpoints and logs.
void run_training(const SweepConfig& config, std::ostream* progress = nullptr);

void write_train_log(const std::vector<EpochStats>& log, const std::filesystem::path& path);

}  // namespace sharplens
