#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sharplens/tape.hpp"
#include "sharplens/tensor.hpp"

namespace sharplens {

enum class ModelKind : std::uint32_t { ConvNet = 0, Mlp = 1 };

/// Architecture description.
///
/// ConvNet: four conv(3x3)+ReLU+maxpool stages of widths [k, 2k, 4k, 8k],
/// one extra maxpool, then a linear classifier. Needs h, w divisible by 32.
/// Mlp: fully-connected ReLU network over `layer_widths`; the input is
/// flattened, so product(input_shape) must equal layer_widths.front().
struct ModelSpec {
  ModelKind kind = ModelKind::ConvNet;
  std::size_t base_width = 1;
  Shape input_shape{3, 32, 32};
  std::size_t num_classes = 10;
  std::vector<std::size_t> layer_widths;  // mlp only

  static ModelSpec convnet(std::size_t k, std::size_t num_classes = 10, Shape input_shape = Shape{3, 32, 32});
  static ModelSpec mlp(std::vector<std::size_t> layer_widths);

  std::vector<std::size_t> stage_widths() const;
  void validate() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Learnable parameter set of one model, in forward order.
struct Params {
  ModelSpec spec;
  std::vector<NamedTensor> tensors;

  std::size_t scalar_count() const;
  bool all_finite() const;

  friend bool operator==(const Params&, const Params&) = default;
};

/// Closed-form number of learnable scalars.
std::size_t param_count(const ModelSpec& spec);

/// Weights and biases ~ Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Params build_convnet(const ModelSpec& spec, std::uint64_t seed);
Params build_mlp(const std::vector<std::size_t>& layer_widths, std::uint64_t seed);
/// Dispatches on spec.kind.
Params build_model(const ModelSpec& spec, std::uint64_t seed);

/// Parameters placed on a tape, one leaf per tensor.
std::vector<Var> place_params(Tape& tape, const Params& params, bool requires_grad);

/// Records the network on `tape`. `x` is one sample (input_shape) or a batch
/// ([B] + input_shape). Returns logits [C] or [B,C].
Var forward(Tape& tape, const Params& params, std::span<const Var> param_vars, Var x);

/// Convenience: logits of a single sample or batch on a throwaway tape.
Tensor forward(const Params& params, const Tensor& x);

/// Flat binary checkpoint ("SLNS" container, little-endian).
void save_checkpoint(const Params& params, const std::filesystem::path& path);
Params load_checkpoint(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sharplens
