#include "sharplens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sharplens/parallel.hpp"
#include "sharplens/random.hpp"

namespace sharplens {

namespace {

constexpr std::size_t kEvalChunk = 256;
// Stream id for the base node, whose directions are shared by all paths.
constexpr std::uint64_t kBaseNodeStream = 0xba5eULL;

void check_batch(const InputObjective& objective, const Tensor& batch, std::size_t labels) {
  if (batch.rank() != objective.input_shape().rank() + 1 || batch.shape().drop_front() != objective.input_shape()) {
    throw ShapeError("objective: batch " + batch.shape().str() + " does not match input " +
                     objective.input_shape().str());
  }
  if (batch.shape()[0] != labels) throw std::invalid_argument("objective: batch and label counts differ");
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double squared_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

double hessian_prefactor(std::size_t m, double step, HessianNormalization normalization) {
  const double md = static_cast<double>(m) * step;
  return normalization == HessianNormalization::AsWritten ? 1.0 / (md * md) : 1.0 / md;
}

std::span<const double> slice(const Tensor& batch, std::size_t i) {
  const std::size_t n = batch.numel() / batch.shape()[0];
  return batch.data().subspan(i * n, n);
}

Tensor clip01(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// Evaluates every field at several points sharing one label, in one batched
// forward/backward over each point and its displaced copies.
std::vector<PointValues> evaluate_points(const InputObjective& objective, std::span<const Tensor> points, int y,
                                         std::span<const TangentDirectionSet> dirs,
                                         HessianNormalization normalization) {
  if (points.size() != dirs.size()) throw std::invalid_argument("evaluate_points: one direction set per point");
  std::vector<Tensor> parts;
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& d = dirs[i];
    if (d.size() == 0) throw std::invalid_argument("tangent Hessian: need at least one direction");
    if (!(d.step > 0.0)) throw std::invalid_argument("tangent Hessian: step must be > 0");
    offsets.push_back(parts.size());
    parts.push_back(points[i]);
    for (const Tensor& u : d.directions) {
      if (u.shape() != points[i].shape()) throw ShapeError("tangent direction shape " + u.shape().str());
      Tensor displaced = points[i];
      const auto ud = u.data();
      auto pd = displaced.data();
      for (std::size_t j = 0; j < pd.size(); ++j) pd[j] += d.step * ud[j];
      parts.push_back(std::move(displaced));
    }
  }
  const Tensor batch = stack(parts);
  parts.clear();
  const std::vector<int> labels(batch.shape()[0], y);
  const auto eval = objective.evaluate(batch, labels, true);

  std::vector<PointValues> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const std::size_t o = offsets[i];
    const auto j0 = slice(eval.input_grads, o);
    double s = 0.0;
    for (std::size_t m = 1; m <= dirs[i].size(); ++m) s += squared_distance(j0, slice(eval.input_grads, o + m));
    PointValues& pv = out[i];
    pv[ScalarField::JacobianNorm] = std::sqrt(squared_norm(j0));
    pv[ScalarField::HessianNorm] = hessian_prefactor(dirs[i].size(), dirs[i].step, normalization) * std::sqrt(s);
    pv[ScalarField::CrossEntropy] = eval.losses[o];
    pv[ScalarField::Accuracy01] = eval.predictions[o] == y ? 1.0 : 0.0;
    for (double v : pv.v) {
      if (!std::isfinite(v)) throw NonFiniteError("point measurement is not finite");
    }
  }
  return out;
}

std::vector<std::size_t> nonempty_subset(const ImageDataset& data, Subset subset) {
  auto idx = subset_indices(data, subset);
  if (idx.empty()) throw std::invalid_argument(std::string("subset '") + to_string(subset) + "' is empty");
  return idx;
}

}  // namespace

// ---- objectives ------------------------------------------------------------

InputObjective::Evaluation ModelObjective::evaluate(const Tensor& batch, std::span<const int> labels,
                                                    bool with_grad) const {
  check_batch(*this, batch, labels.size());
  Tape tape;
  const Var x = tape.leaf(batch, with_grad);
  const auto vars = place_params(tape, params_, false);
  const Var logits = forward(tape, params_, vars, x);
  LossValue loss = tape.softmax_crossentropy(logits, labels, Reduction::Sum);
  Evaluation e;
  if (with_grad) e.input_grads = backward_to_input(tape, loss, x);
  e.losses = std::move(loss.per_sample);
  e.predictions = std::move(loss.predictions);
  return e;
}

InputObjective::Evaluation TapeObjective::evaluate(const Tensor& batch, std::span<const int> labels,
                                                   bool with_grad) const {
  check_batch(*this, batch, labels.size());
  const std::size_t b = labels.size();
  Evaluation e;
  e.predictions.assign(b, -1);
  if (with_grad) e.input_grads = Tensor(batch.shape());
  for (std::size_t i = 0; i < b; ++i) {
    Tape tape;
    const Var x = tape.leaf(unstack_one(batch, i), with_grad);
    const Var loss = build_(tape, x, labels[i]);
    if (tape.value(loss).numel() != 1) throw ShapeError("TapeObjective: loss must be a scalar");
    const double v = tape.value(loss)[0];
    if (!std::isfinite(v)) throw NonFiniteError("TapeObjective: non-finite loss");
    e.losses.push_back(v);
    if (with_grad) {
      const LossValue lv{loss, {v}, {-1}};
      const Tensor g = backward_to_input(tape, lv, x);
      std::copy(g.data().begin(), g.data().end(), e.input_grads.data().begin() + static_cast<std::ptrdiff_t>(i * g.numel()));
    }
  }
  return e;
}

// ---- names -------------------------------------------------------------------

const char* to_string(ScalarField f) {
  switch (f) {
    case ScalarField::JacobianNorm: return "jacobian_norm";
    case ScalarField::HessianNorm: return "hessian_norm";
    case ScalarField::CrossEntropy: return "crossentropy";
    case ScalarField::Accuracy01: return "accuracy01";
  }
  return "?";
}

ScalarField field_from_string(const std::string& s) {
  for (ScalarField f : kAllFields) {
    if (s == to_string(f)) return f;
  }
  throw std::invalid_argument("unknown scalar field '" + s + "'");
}

const char* to_string(HessianNormalization n) {
  return n == HessianNormalization::AsWritten ? "as_written" : "per_direction";
}

HessianNormalization normalization_from_string(const std::string& s) {
  if (s == "as_written") return HessianNormalization::AsWritten;
  if (s == "per_direction") return HessianNormalization::PerDirection;
  throw std::invalid_argument("unknown Hessian normalization '" + s + "' (expected as_written or per_direction)");
}

// ---- point-wise ----------------------------------------------------------------

Tensor loss_jacobian(const InputObjective& objective, const Tensor& x, int y) {
  const Tensor batch = stack(std::span<const Tensor>(&x, 1));
  const int labels[1] = {y};
  auto e = objective.evaluate(batch, labels, true);
  return e.input_grads.reshaped(x.shape());
}

double tangent_hessian_from_jacobians(const Tensor& base, std::span<const Tensor> displaced, double step,
                                      HessianNormalization normalization) {
  if (displaced.empty()) throw std::invalid_argument("tangent Hessian: need at least one direction");
  if (!(step > 0.0)) throw std::invalid_argument("tangent Hessian: step must be > 0");
  double s = 0.0;
  for (const Tensor& j : displaced) {
    if (j.shape() != base.shape()) throw ShapeError("tangent Hessian: Jacobian shape mismatch");
    if (!j.all_finite()) throw NonFiniteError("tangent Hessian: non-finite displaced Jacobian");
    s += squared_distance(base.data(), j.data());
  }
  return hessian_prefactor(displaced.size(), step, normalization) * std::sqrt(s);
}

double tangent_hessian_norm(const InputObjective& objective, const Tensor& x, int y, const TangentDirectionSet& dirs,
                            HessianNormalization normalization) {
  return evaluate_point(objective, x, y, dirs, normalization)[ScalarField::HessianNorm];
}

PointValues evaluate_point(const InputObjective& objective, const Tensor& x, int y, const TangentDirectionSet& dirs,
                           HessianNormalization normalization) {
  return evaluate_points(objective, std::span<const Tensor>(&x, 1), y, std::span<const TangentDirectionSet>(&dirs, 1),
                         normalization)[0];
}

double evaluate_field(const InputObjective& objective, ScalarField field, const Tensor& x, int y,
                      const TangentDirectionSet& dirs, HessianNormalization normalization) {
  return evaluate_point(objective, x, y, dirs, normalization)[field];
}

// ---- volume ------------------------------------------------------------------------

double path_average(std::span<const double> node_values, std::span<const double> segment_lengths) {
  if (segment_lengths.empty()) throw std::invalid_argument("path integral: path needs at least one segment");
  if (node_values.size() != segment_lengths.size() + 1) {
    throw std::invalid_argument("path integral: need one more node value than segments");
  }
  double integral = 0.0;
  double length = 0.0;
  for (std::size_t s = 0; s < segment_lengths.size(); ++s) {
    integral += segment_lengths[s] * (node_values[s] + node_values[s + 1]) / 2.0;
    length += segment_lengths[s];
  }
  if (!(length > 0.0)) throw std::domain_error("path integral: path has zero length");
  return integral / length;
}

TangentDirectionSet node_directions(const Tensor& node, std::size_t sample, std::size_t path_index,
                                    std::size_t strength, const MeasureConfig& config) {
  const std::uint64_t stream = strength == 0 ? kBaseNodeStream : path_index;
  const std::uint64_t seed = derive_seed(config.seed, {sample, stream, strength});
  // Erasure can push a node slightly outside [0,1]; jitter is defined there.
  const Tensor clipped = clip01(node);
  return sample_tangent_directions(clipped, config.tangent_directions, config.tangent_step, seed);
}

double path_integral(const InputObjective& objective, ScalarField field, const AugmentationPath& path, int y,
                     std::size_t sample, std::size_t path_index, const MeasureConfig& config) {
  std::vector<TangentDirectionSet> dirs;
  for (std::size_t k = 0; k < path.nodes.size(); ++k) {
    dirs.push_back(node_directions(path.nodes[k], sample, path_index, path.strengths[k], config));
  }
  const auto values = evaluate_points(objective, path.nodes, y, dirs, config.normalization);
  std::vector<double> v;
  for (const auto& pv : values) v.push_back(pv[field]);
  return path_average(v, path.segment_lengths);
}

PointValues MeasurementTable::mean(std::span<const std::size_t> indices, std::size_t k) const {
  if (indices.empty()) throw std::invalid_argument("measurement mean over an empty subset");
  // Neumaier-compensated sums keep subset means additive to round-off.
  std::array<double, kNumFields> sum{}, comp{};
  for (std::size_t i : indices) {
    const auto& r = at(i, k);
    for (std::size_t f = 0; f < kNumFields; ++f) {
      const double t = sum[f] + r.v[f];
      comp[f] += std::abs(sum[f]) >= std::abs(r.v[f]) ? (sum[f] - t) + r.v[f] : (r.v[f] - t) + sum[f];
      sum[f] = t;
    }
  }
  PointValues acc;
  for (std::size_t f = 0; f < kNumFields; ++f) acc.v[f] = (sum[f] + comp[f]) / static_cast<double>(indices.size());
  return acc;
}

MeasurementTable measure_dataset(const InputObjective& objective, const ImageDataset& data,
                                 const MeasureConfig& config) {
  if (config.max_neighborhood > 0 && config.num_paths == 0) throw std::invalid_argument("measure: P must be >= 1");
  const std::size_t kmax = config.max_neighborhood;
  const std::size_t paths = kmax == 0 ? 0 : config.num_paths;
  MeasurementTable table(data.size(), kmax);

  parallel_for(data.size(), config.threads, [&](std::size_t n) {
    const Tensor x = data.image(n);
    const int y = data.labels[n];
    std::vector<Tensor> points{x};
    std::vector<TangentDirectionSet> dirs{node_directions(x, n, 0, 0, config)};
    std::vector<AugmentationPath> ps;
    if (kmax > 0) ps = generate_paths(x, paths, kmax);
    for (std::size_t p = 0; p < ps.size(); ++p) {
      for (std::size_t k = 1; k <= kmax; ++k) {
        points.push_back(ps[p].nodes[k]);
        dirs.push_back(node_directions(ps[p].nodes[k], n, p, k, config));
      }
    }
    const auto values = evaluate_points(objective, points, y, dirs, config.normalization);
    table.at(n, 0) = values[0];

    std::vector<double> node_values(kmax + 1);
    for (std::size_t k = 1; k <= kmax; ++k) {
      PointValues& row = table.at(n, k);
      for (std::size_t f = 0; f < kNumFields; ++f) {
        double acc = 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
          node_values[0] = values[0].v[f];
          for (std::size_t j = 1; j <= k; ++j) node_values[j] = values[1 + p * kmax + (j - 1)].v[f];
          acc += path_average(std::span(node_values).first(k + 1), std::span(ps[p].segment_lengths).first(k));
        }
        row.v[f] = acc / static_cast<double>(paths);
      }
    }
  });
  return table;
}

VolumeMeasurement volume_measure(const InputObjective& objective, const ImageDataset& data, Subset subset,
                                 const MeasureConfig& config) {
  const auto idx = nonempty_subset(data, subset);
  const ImageDataset sub = data.select(idx);
  const MeasurementTable table = measure_dataset(objective, sub, config);
  std::vector<std::size_t> all(sub.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return {config.max_neighborhood, sub.size(), table.mean(all, config.max_neighborhood)};
}

double jacobian_norm_dataset(const InputObjective& objective, const ImageDataset& data, Subset subset,
                             std::size_t threads) {
  const auto idx = nonempty_subset(data, subset);
  std::vector<double> norms(idx.size());
  const std::size_t chunks = (idx.size() + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk;
    const std::size_t hi = std::min(idx.size(), lo + kEvalChunk);
    const std::span<const std::size_t> rows(idx.data() + lo, hi - lo);
    const auto e = objective.evaluate(data.gather(rows), data.gather_labels(rows), true);
    for (std::size_t i = lo; i < hi; ++i) norms[i] = std::sqrt(squared_norm(slice(e.input_grads, i - lo)));
  });
  double s = 0.0;
  for (double v : norms) s += v;
  return s / static_cast<double>(norms.size());
}

ClassificationStats evaluate_classification(const InputObjective& objective, const ImageDataset& data,
                                            std::span<const std::size_t> indices, std::size_t threads) {
  if (indices.empty()) throw std::invalid_argument("evaluate_classification: no samples");
  std::vector<double> losses(indices.size());
  std::vector<std::uint8_t> wrong(indices.size());
  const std::size_t chunks = (indices.size() + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kEvalChunk;
    const std::size_t hi = std::min(indices.size(), lo + kEvalChunk);
    const auto rows = indices.subspan(lo, hi - lo);
    const auto labels = data.gather_labels(rows);
    const auto e = objective.evaluate(data.gather(rows), labels, false);
    for (std::size_t i = lo; i < hi; ++i) {
      losses[i] = e.losses[i - lo];
      wrong[i] = e.predictions[i - lo] != labels[i - lo];
    }
  });
  ClassificationStats s;
  s.count = indices.size();
  std::size_t errors = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    s.mean_loss += losses[i];
    errors += wrong[i];
  }
  s.mean_loss /= static_cast<double>(s.count);
  s.error = static_cast<double>(errors) / static_cast<double>(s.count);
  return s;
}

}  // namespace sharplens
