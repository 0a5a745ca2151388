#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharplens/tensor.hpp"

namespace sharplens {

class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images with values in [0,1], their (possibly corrupted) training labels,
/// the labels before corruption, and the corruption mask.
struct ImageDataset {
  Shape image_shape{3, 32, 32};
  std::size_t num_classes = 10;
  std::vector<double> pixels;  // size() * image_shape.numel(), row-major per image
  std::vector<int> labels;
  std::vector<int> original_labels;
  std::vector<std::uint8_t> noisy_mask;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_numel() const { return image_shape.numel(); }

  std::span<const double> image_data(std::size_t i) const;
  Tensor image(std::size_t i) const;
  /// Stacks the listed images into [B] + image_shape.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;

  std::size_t noisy_count() const;
  /// Appends one sample with a clean label.
  void push_back(std::span<const double> image, int label);
  /// Throws DataFormatError when an invariant does not hold.
  void validate() const;
  /// Rows at `indices`, in that order.
  ImageDataset select(std::span<const std::size_t> indices) const;
};

enum class Subset { All, Clean, Noisy };

const char* to_string(Subset s);
Subset subset_from_string(const std::string& s);

/// Indices of the subset in ascending order.
std::vector<std::size_t> subset_indices(const ImageDataset& data, Subset subset);

// ---- CIFAR binary ----------------------------------------------------------

/// Records of 3073 bytes: label byte, then 1024 R, 1024 G, 1024 B bytes.
ImageDataset load_cifar10(const std::filesystem::path& path);
/// Records of 3074 bytes: coarse label, fine label, 3072 pixel bytes. The
/// fine label is kept.
ImageDataset load_cifar100(const std::filesystem::path& path);
/// Writes the CIFAR-10 record layout; pixels are rounded to v*255.
void export_cifar10(const ImageDataset& data, const std::filesystem::path& path);

/// Concatenates datasets with identical geometry.
ImageDataset concatenate(std::span<const ImageDataset> parts);

// ---- synthetic data --------------------------------------------------------

/// Knobs of the procedural texture generator.
struct SyntheticOptions {
  /// Selects the family of class textures. Train and test splits must share
  /// it; only the per-sample seed differs between them.
  std::uint64_t texture_seed = 0x7e57u;
  /// Sinusoidal components per class texture.
  std::size_t components = 3;
  /// Std-dev of per-component random phase, radians.
  double phase_jitter = 0.6;
  /// Relative std-dev of per-component amplitude.
  double amplitude_jitter = 0.25;
  /// Std-dev of i.i.d. Gaussian pixel noise.
  double pixel_noise = 0.08;
  /// Weight of a texture borrowed from a random other class.
  double distractor_weight = 0.0;
};

/// 3x32x32 images; class c is a smooth texture built from a class-specific
/// low-frequency sinusoidal basis, perturbed per sample and clipped to [0,1].
/// Classes are balanced to within one sample.
ImageDataset generate_synthetic(std::size_t num_samples, std::size_t num_classes, std::uint64_t seed,
                                const SyntheticOptions& options = {});

// ---- label noise -------------------------------------------------------------

struct NoiseSpec {
  double fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Corrupts exactly round(fraction * N) labels, chosen uniformly without
/// replacement. Each corrupted label is drawn uniformly from the other
/// C - 1 classes.
ImageDataset inject_label_noise(const ImageDataset& data, const NoiseSpec& spec);

// ---- batching ----------------------------------------------------------------

/// Seeded shuffled mini-batches over [0, n). The last batch may be short.
class BatchIterator {
 public:
  BatchIterator(const ImageDataset& data, std::size_t batch_size, std::uint64_t epoch_seed);

  /// Fills `batch` with the next indices; false once the epoch is exhausted.
  bool next(std::vector<std::size_t>& batch);
  std::size_t num_batches() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
};

// ---- provenance ----------------------------------------------------------------

struct DatasetManifest {
  std::string source;
  std::vector<std::string> train_paths;
  std::string test_path;
  double noise_fraction = 0.0;
  std::uint64_t noise_seed = 0;
  std::uint64_t seed = 0;
  std::size_t num_train = 0;
  std::size_t num_test = 0;
  std::size_t num_classes = 0;
  std::size_t num_noisy = 0;
};

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace sharplens
