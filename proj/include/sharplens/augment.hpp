#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sharplens/tensor.hpp"

namespace sharplens {

/// Erase `strength` singular values per channel, offset `path_index` from the
/// smallest one: 1-based descending indices w-k-p+1 .. w-p.
struct SvdAugmentSpec {
  std::size_t strength = 0;
  std::size_t path_index = 0;
};

/// Per-channel SVD of a square image with a contiguous block of singular
/// values zeroed. strength 0 returns the input unchanged.
Tensor svd_augment(const Tensor& x, const SvdAugmentSpec& spec);

/// Singular values of every channel, descending. Shape [C, w].
Tensor channel_singular_values(const Tensor& x);

enum class ColorOp : std::uint8_t { Brightness, Contrast, Saturation, Hue };

struct ColorJitterSpec {
  double brightness = 1.0;  // [0.9, 1.1]
  double contrast = 1.0;    // [0.9, 1.1]
  double saturation = 1.0;  // [0.9, 1.1]
  double hue = 0.0;         // [-0.05, 0.05], fraction of the hue circle
  std::array<ColorOp, 4> order{ColorOp::Brightness, ColorOp::Contrast, ColorOp::Saturation, ColorOp::Hue};

  void validate() const;
  /// Factors uniform in their ranges, order a uniform permutation.
  static ColorJitterSpec random(std::uint64_t seed);
};

/// Photometric jitter of an RGB image [3,h,w] with values in [0,1]:
///   brightness  clip(f * v)
///   contrast    clip(mu + f * (v - mu)), mu = image mean of luma
///   saturation  clip(gray + f * (v - gray)), gray = per-pixel luma
///   hue         rotate HSV hue by the shift (mod 1)
/// Luma is 0.299 R + 0.587 G + 0.114 B.
Tensor color_jitter(const Tensor& x, const ColorJitterSpec& spec);

/// HSV hue rotation by `shift` turns, any real shift.
Tensor rotate_hue(const Tensor& x, double shift);

/// Displacements u_m = jitter(x) - x for tangent-Hessian finite differences.
struct TangentDirectionSet {
  std::vector<Tensor> directions;
  double step = 0.1;

  std::size_t size() const { return directions.size(); }
};

inline constexpr std::size_t kDefaultTangentDirections = 4;
inline constexpr double kDefaultTangentStep = 0.1;

TangentDirectionSet sample_tangent_directions(const Tensor& x, std::size_t count = kDefaultTangentDirections,
                                              double step = kDefaultTangentStep, std::uint64_t seed = 0);

/// Piecewise-linear path of augmentations of increasing strength starting at
/// the base point (node 0, strength 0).
struct AugmentationPath {
  std::vector<Tensor> nodes;
  std::vector<std::size_t> strengths;
  std::vector<double> segment_lengths;

  double length() const;
  std::size_t segments() const { return segment_lengths.size(); }
};

/// P paths of K segments each; node k of path p is svd_augment(x, {k, p}).
/// Requires K >= 1, P >= 1 and K + P <= w.
std::vector<AugmentationPath> generate_paths(const Tensor& x, std::size_t num_paths, std::size_t num_strengths);

}  // namespace sharplens
