#include "sharplens/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "sharplens/random.hpp"

namespace sharplens {

namespace {

constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarSide = 32;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataFormatError("cannot open dataset file: " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

ImageDataset parse_cifar(const std::filesystem::path& path, std::size_t label_bytes, std::size_t num_classes) {
  const auto bytes = read_file(path);
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw DataFormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(record) + "-byte records");
  }
  ImageDataset data;
  data.image_shape = Shape{3, kCifarSide, kCifarSide};
  data.num_classes = num_classes;
  const std::size_t n = bytes.size() / record;
  data.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const unsigned label = rec[label_bytes - 1];
    if (label >= num_classes) {
      throw DataFormatError(path.string() + ": record " + std::to_string(i) + " has label " + std::to_string(label) +
                            " >= " + std::to_string(num_classes));
    }
    data.labels.push_back(static_cast<int>(label));
    double* dst = data.pixels.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = rec[label_bytes + p] / 255.0;
  }
  data.original_labels = data.labels;
  data.noisy_mask.assign(n, 0);
  return data;
}

double gaussian(Rng& rng) {
  // Box-Muller on two fixed-arithmetic uniforms.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

struct Component {
  double fx, fy, phase;
  double amp[3];
};

std::vector<std::vector<Component>> texture_family(std::size_t num_classes, const SyntheticOptions& opt) {
  Rng rng(derive_seed(opt.texture_seed, {num_classes}));
  std::vector<std::vector<Component>> family(num_classes);
  for (auto& comps : family) {
    for (std::size_t j = 0; j < opt.components; ++j) {
      Component c{};
      // Low spatial frequencies, 1..4 cycles per image, random orientation sign.
      c.fx = static_cast<double>(1 + uniform_index(rng, 4)) * (uniform01(rng) < 0.5 ? -1.0 : 1.0);
      c.fy = static_cast<double>(uniform_index(rng, 5));
      c.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (double& a : c.amp) a = uniform(rng, -0.25, 0.25);
      comps.push_back(c);
    }
  }
  return family;
}

}  // namespace

std::span<const double> ImageDataset::image_data(std::size_t i) const {
  const std::size_t n = image_numel();
  return std::span<const double>(pixels).subspan(i * n, n);
}

Tensor ImageDataset::image(std::size_t i) const {
  auto s = image_data(i);
  return Tensor(image_shape, std::vector<double>(s.begin(), s.end()));
}

Tensor ImageDataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t n = image_numel();
  std::vector<double> out(indices.size() * n);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    auto s = image_data(indices[j]);
    std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(j * n));
  }
  return Tensor(image_shape.prepend(indices.size()), std::move(out));
}

std::vector<int> ImageDataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

std::size_t ImageDataset::noisy_count() const {
  return static_cast<std::size_t>(std::count(noisy_mask.begin(), noisy_mask.end(), 1));
}

void ImageDataset::push_back(std::span<const double> image, int label) {
  if (image.size() != image_numel()) throw ShapeError("push_back: image size does not match dataset geometry");
  pixels.insert(pixels.end(), image.begin(), image.end());
  labels.push_back(label);
  original_labels.push_back(label);
  noisy_mask.push_back(0);
}

void ImageDataset::validate() const {
  const std::size_t n = labels.size();
  if (original_labels.size() != n || noisy_mask.size() != n || pixels.size() != n * image_numel()) {
    throw DataFormatError("dataset arrays have inconsistent lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes ||
        original_labels[i] < 0 || static_cast<std::size_t>(original_labels[i]) >= num_classes) {
      throw DataFormatError("label out of range at index " + std::to_string(i));
    }
    if ((noisy_mask[i] != 0) != (labels[i] != original_labels[i])) {
      throw DataFormatError("noisy mask disagrees with labels at index " + std::to_string(i));
    }
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataFormatError("pixel value outside [0,1]");
  }
}

ImageDataset ImageDataset::select(std::span<const std::size_t> indices) const {
  ImageDataset out;
  out.image_shape = image_shape;
  out.num_classes = num_classes;
  const std::size_t n = image_numel();
  out.pixels.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    auto s = image_data(i);
    out.pixels.insert(out.pixels.end(), s.begin(), s.end());
    out.labels.push_back(labels.at(i));
    out.original_labels.push_back(original_labels.at(i));
    out.noisy_mask.push_back(noisy_mask.at(i));
  }
  return out;
}

const char* to_string(Subset s) {
  switch (s) {
    case Subset::All:
      return "all";
    case Subset::Clean:
      return "clean";
    case Subset::Noisy:
      return "noisy";
  }
  return "?";
}

Subset subset_from_string(const std::string& s) {
  if (s == "all") return Subset::All;
  if (s == "clean") return Subset::Clean;
  if (s == "noisy") return Subset::Noisy;
  throw std::invalid_argument("unknown subset '" + s + "'");
}

std::vector<std::size_t> subset_indices(const ImageDataset& data, Subset subset) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool noisy = data.noisy_mask[i] != 0;
    if (subset == Subset::All || (subset == Subset::Noisy) == noisy) out.push_back(i);
  }
  return out;
}

ImageDataset load_cifar10(const std::filesystem::path& path) { return parse_cifar(path, 1, 10); }

ImageDataset load_cifar100(const std::filesystem::path& path) { return parse_cifar(path, 2, 100); }

void export_cifar10(const ImageDataset& data, const std::filesystem::path& path) {
  if (data.image_shape != Shape{3, kCifarSide, kCifarSide}) throw ShapeError("export_cifar10: images must be 3x32x32");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataFormatError("cannot open for writing: " + path.string());
  std::vector<char> record(1 + kCifarPixels);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] > 255) throw DataFormatError("label does not fit in a byte");
    record[0] = static_cast<char>(static_cast<unsigned char>(data.labels[i]));
    auto img = data.image_data(i);
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const double v = std::clamp(img[p], 0.0, 1.0);
      record[1 + p] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    os.write(record.data(), static_cast<std::streamsize>(record.size()));
  }
  if (!os) throw DataFormatError("failed writing " + path.string());
}

ImageDataset concatenate(std::span<const ImageDataset> parts) {
  if (parts.empty()) return {};
  ImageDataset out;
  out.image_shape = parts.front().image_shape;
  out.num_classes = parts.front().num_classes;
  for (const auto& p : parts) {
    if (p.image_shape != out.image_shape || p.num_classes != out.num_classes) {
      throw DataFormatError("cannot concatenate datasets with different geometry");
    }
    out.pixels.insert(out.pixels.end(), p.pixels.begin(), p.pixels.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.original_labels.insert(out.original_labels.end(), p.original_labels.begin(), p.original_labels.end());
    out.noisy_mask.insert(out.noisy_mask.end(), p.noisy_mask.begin(), p.noisy_mask.end());
  }
  return out;
}

ImageDataset generate_synthetic(std::size_t num_samples, std::size_t num_classes, std::uint64_t seed,
                                const SyntheticOptions& opt) {
  if (num_classes < 2) throw std::invalid_argument("generate_synthetic: need at least two classes");
  const auto family = texture_family(num_classes, opt);
  ImageDataset data;
  data.image_shape = Shape{3, kCifarSide, kCifarSide};
  data.num_classes = num_classes;
  data.pixels.resize(num_samples * kCifarPixels);

  // Balanced labels in a seeded order.
  std::vector<int> labels(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) labels[i] = static_cast<int>(i % num_classes);
  Rng rng(derive_seed(seed, {0x5a17u}));
  shuffle(labels.begin(), labels.end(), rng);

  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double side = static_cast<double>(kCifarSide);
  std::vector<double> phase(opt.components);
  std::vector<double> gain(opt.components);
  for (std::size_t i = 0; i < num_samples; ++i) {
    Rng srng(derive_seed(seed, {i}));
    const auto& comps = family[static_cast<std::size_t>(labels[i])];
    std::size_t other = uniform_index(srng, num_classes - 1);
    if (other >= static_cast<std::size_t>(labels[i])) ++other;
    const auto& distract = family[other];
    for (std::size_t j = 0; j < opt.components; ++j) {
      phase[j] = opt.phase_jitter * gaussian(srng);
      gain[j] = 1.0 + opt.amplitude_jitter * gaussian(srng);
    }
    const double dphase = uniform(srng, 0.0, two_pi);
    double* img = data.pixels.data() + i * kCifarPixels;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < kCifarSide; ++y) {
        for (std::size_t x = 0; x < kCifarSide; ++x) {
          double v = 0.5;
          for (std::size_t j = 0; j < comps.size(); ++j) {
            const Component& k = comps[j];
            const double arg = two_pi * (k.fx * static_cast<double>(x) + k.fy * static_cast<double>(y)) / side;
            v += gain[j] * k.amp[c] * std::sin(arg + k.phase + phase[j]);
          }
          if (opt.distractor_weight > 0.0) {
            const Component& k = distract[0];
            const double arg = two_pi * (k.fx * static_cast<double>(x) + k.fy * static_cast<double>(y)) / side;
            v += opt.distractor_weight * k.amp[c] * std::sin(arg + dphase);
          }
          img[(c * kCifarSide + y) * kCifarSide + x] = v;
        }
      }
    }
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      img[p] = std::clamp(img[p] + opt.pixel_noise * gaussian(srng), 0.0, 1.0);
    }
  }
  data.labels = labels;
  data.original_labels = labels;
  data.noisy_mask.assign(num_samples, 0);
  return data;
}

ImageDataset inject_label_noise(const ImageDataset& data, const NoiseSpec& spec) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
    throw std::invalid_argument("noise fraction must lie in [0,1]");
  }
  const std::size_t n = data.size();
  const auto count = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n)));
  if (count > 0 && data.num_classes < 2) throw std::invalid_argument("label noise needs at least two classes");
  ImageDataset out = data;
  out.labels = data.original_labels;
  out.noisy_mask.assign(n, 0);
  Rng rng(derive_seed(spec.seed, {0x0153u}));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + uniform_index(rng, n - i);
    std::swap(idx[i], idx[j]);
  }
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = idx[i];
    const int orig = out.original_labels[s];
    auto r = static_cast<int>(uniform_index(rng, data.num_classes - 1));
    if (r >= orig) ++r;
    out.labels[s] = r;
    out.noisy_mask[s] = 1;
  }
  return out;
}

BatchIterator::BatchIterator(const ImageDataset& data, std::size_t batch_size, std::uint64_t epoch_seed)
    : order_(data.size()), batch_size_(batch_size) {
  if (data.empty()) throw std::invalid_argument("batch iterator over an empty dataset");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(epoch_seed, {0xba7c4u}));
  shuffle(order_.begin(), order_.end(), rng);
}

bool BatchIterator::next(std::vector<std::size_t>& batch) {
  batch.clear();
  if (cursor_ >= order_.size()) return false;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  batch.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_), order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return true;
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["source"] = m.source;
  j["train_paths"] = m.train_paths;
  j["test_path"] = m.test_path;
  j["noise_fraction"] = m.noise_fraction;
  j["noise_seed"] = m.noise_seed;
  j["seed"] = m.seed;
  j["num_train"] = m.num_train;
  j["num_test"] = m.num_test;
  j["num_classes"] = m.num_classes;
  j["num_noisy"] = m.num_noisy;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest: " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace sharplens
