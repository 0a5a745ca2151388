#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sharplens/augment.hpp"
#include "sharplens/data.hpp"
#include "sharplens/model.hpp"
#include "sharplens/tape.hpp"

namespace sharplens {

// ---- objectives ------------------------------------------------------------

/// A scalar loss L(x, y) that can be differentiated with respect to x.
class InputObjective {
 public:
  struct Evaluation {
    std::vector<double> losses;
    /// argmax class per sample; -1 when the objective has no logits.
    std::vector<int> predictions;
    /// dL/dx stacked as [B] + input_shape; empty unless requested.
    Tensor input_grads;
  };

  virtual ~InputObjective() = default;
  virtual const Shape& input_shape() const = 0;
  /// Per-sample losses for a batch [B] + input_shape.
  virtual Evaluation evaluate(const Tensor& batch, std::span<const int> labels, bool with_grad) const = 0;
};

/// Cross-entropy of a model's logits. Parameters stay fixed.
class ModelObjective final : public InputObjective {
 public:
  explicit ModelObjective(const Params& params) : params_(params) {}
  const Shape& input_shape() const override { return params_.spec.input_shape; }
  Evaluation evaluate(const Tensor& batch, std::span<const int> labels, bool with_grad) const override;

 private:
  const Params& params_;
};

/// Any per-sample loss built from tape primitives; evaluated one sample at a
/// time. Used for closed-form oracles.
class TapeObjective final : public InputObjective {
 public:
  using Builder = std::function<Var(Tape&, Var x, int y)>;
  TapeObjective(Shape input_shape, Builder build) : shape_(std::move(input_shape)), build_(std::move(build)) {}
  const Shape& input_shape() const override { return shape_; }
  Evaluation evaluate(const Tensor& batch, std::span<const int> labels, bool with_grad) const override;

 private:
  Shape shape_;
  Builder build_;
};

// ---- point-wise measures ---------------------------------------------------------

enum class ScalarField : std::size_t { JacobianNorm = 0, HessianNorm = 1, CrossEntropy = 2, Accuracy01 = 3 };
inline constexpr std::size_t kNumFields = 4;
inline constexpr std::array<ScalarField, kNumFields> kAllFields{ScalarField::JacobianNorm, ScalarField::HessianNorm,
                                                                 ScalarField::CrossEntropy, ScalarField::Accuracy01};

const char* to_string(ScalarField f);
ScalarField field_from_string(const std::string& s);

/// Prefactor of the tangent-Hessian estimator.
enum class HessianNormalization {
  /// 1/(M^2 delta^2) * sqrt(sum_m ||J(x) - J(x + delta u_m)||^2)
  AsWritten,
  /// 1/(M delta) * sqrt(sum_m ||J(x) - J(x + delta u_m)||^2)
  PerDirection,
};

const char* to_string(HessianNormalization n);
HessianNormalization normalization_from_string(const std::string& s);

/// All four fields at one point.
struct PointValues {
  std::array<double, kNumFields> v{};
  double operator[](ScalarField f) const { return v[static_cast<std::size_t>(f)]; }
  double& operator[](ScalarField f) { return v[static_cast<std::size_t>(f)]; }
};

/// J(x, y) = dL/dx with parameters held fixed.
Tensor loss_jacobian(const InputObjective& objective, const Tensor& x, int y);

/// Tangent-Hessian term from the Jacobian at x and the Jacobians at the
/// displaced points x + delta u_m.
double tangent_hessian_from_jacobians(const Tensor& base, std::span<const Tensor> displaced, double step,
                                      HessianNormalization normalization);

double tangent_hessian_norm(const InputObjective& objective, const Tensor& x, int y, const TangentDirectionSet& dirs,
                            HessianNormalization normalization = HessianNormalization::AsWritten);

/// Every field at (x, y) from one batched forward/backward over x and its
/// M displaced copies.
PointValues evaluate_point(const InputObjective& objective, const Tensor& x, int y, const TangentDirectionSet& dirs,
                           HessianNormalization normalization = HessianNormalization::AsWritten);

double evaluate_field(const InputObjective& objective, ScalarField field, const Tensor& x, int y,
                      const TangentDirectionSet& dirs,
                      HessianNormalization normalization = HessianNormalization::AsWritten);

// ---- volume measures ---------------------------------------------------------------

/// Length-normalised trapezoidal integral of node values along a polyline:
/// sum_s l_s (v_s + v_{s+1}) / 2 / sum_s l_s.
double path_average(std::span<const double> node_values, std::span<const double> segment_lengths);

struct MeasureConfig {
  std::size_t num_paths = 3;        // P
  std::size_t max_neighborhood = 7;  // K; 0 measures the base points only
  std::size_t tangent_directions = kDefaultTangentDirections;
  double tangent_step = kDefaultTangentStep;
  HessianNormalization normalization = HessianNormalization::AsWritten;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Tangent directions used at node `strength` of path `path_index` of sample
/// `sample`. The base node (strength 0) shares one set across paths.
TangentDirectionSet node_directions(const Tensor& node, std::size_t sample, std::size_t path_index,
                                    std::size_t strength, const MeasureConfig& config);

double path_integral(const InputObjective& objective, ScalarField field, const AugmentationPath& path, int y,
                     std::size_t sample, std::size_t path_index, const MeasureConfig& config);

/// Per-sample field values for neighbourhood sizes 0..K. Entry K=0 holds the
/// point-wise values at the base sample; K >= 1 holds the mean over P paths of
/// the length-normalised path integral over the first K segments.
class MeasurementTable {
 public:
  MeasurementTable(std::size_t samples, std::size_t max_neighborhood)
      : k_(max_neighborhood), rows_(samples * (max_neighborhood + 1)) {}

  std::size_t samples() const { return rows_.size() / (k_ + 1); }
  std::size_t max_neighborhood() const { return k_; }
  PointValues& at(std::size_t sample, std::size_t k) { return rows_[sample * (k_ + 1) + k]; }
  const PointValues& at(std::size_t sample, std::size_t k) const { return rows_[sample * (k_ + 1) + k]; }

  /// Mean over `indices`, summed in index order. Throws on an empty subset.
  PointValues mean(std::span<const std::size_t> indices, std::size_t k) const;

 private:
  std::size_t k_;
  std::vector<PointValues> rows_;
};

/// Evaluates every sample with its training label. Per-sample work runs on
/// config.threads workers; results do not depend on the worker count.
MeasurementTable measure_dataset(const InputObjective& objective, const ImageDataset& data,
                                 const MeasureConfig& config);

struct VolumeMeasurement {
  std::size_t neighborhood = 0;
  std::size_t count = 0;
  PointValues values;
};

VolumeMeasurement volume_measure(const InputObjective& objective, const ImageDataset& data, Subset subset,
                                 const MeasureConfig& config);

/// Mean Frobenius norm of J over the subset.
double jacobian_norm_dataset(const InputObjective& objective, const ImageDataset& data, Subset subset,
                             std::size_t threads = 1);

struct ClassificationStats {
  double mean_loss = 0.0;
  double error = 0.0;
  std::size_t count = 0;
};

/// Forward-only loss and 0/1 error against `labels`.
ClassificationStats evaluate_classification(const InputObjective& objective, const ImageDataset& data,
                                            std::span<const std::size_t> indices, std::size_t threads = 1);

}  // namespace sharplens
