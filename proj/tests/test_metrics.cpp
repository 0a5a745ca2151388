#include <gtest/gtest.h>

#include <cmath>

#include "sharplens/metrics.hpp"
#include "support/oracles.hpp"

using namespace sharplens;
using sharplens::testing::central_difference;
using sharplens::testing::random_tensor;
using sharplens::testing::relative_error;

namespace {

// L(x) = 1/2 x^T A x for symmetric A, so J(x) = A x.
TapeObjective quadratic(const Tensor& a) {
  const std::size_t d = a.shape()[0];
  return TapeObjective(Shape{d}, [a, d](Tape& t, Var x, int) {
    const Var ax = t.linear(x, t.leaf(a, false), t.leaf(Tensor::zeros(Shape{d}), false));
    return t.scale(t.sum(t.mul(x, ax)), 0.5);
  });
}

Tensor identity(std::size_t d) {
  Tensor a = Tensor::zeros(Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) a[i * d + i] = 1.0;
  return a;
}

TapeObjective linear_loss(const Tensor& coeffs) {
  return TapeObjective(coeffs.shape(), [coeffs](Tape& t, Var x, int) { return t.dot_const(x, coeffs); });
}

// Loss fixed at c whatever x is.
TapeObjective constant_loss(const Shape& shape, double c) {
  return TapeObjective(shape, [c](Tape& t, Var x, int) {
    return t.add(t.scale(t.sum(x), 0.0), t.leaf(Tensor(Shape{}, {c}), false));
  });
}

Tensor unit(std::size_t d, std::size_t i) {
  Tensor u = Tensor::zeros(Shape{d});
  u[i] = 1.0;
  return u;
}

Tensor matvec(const Tensor& a, const Tensor& u) {
  const std::size_t d = u.numel();
  Tensor out = Tensor::zeros(Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i] += a[i * d + j] * u[j];
  }
  return out;
}

Tensor random_symmetric(std::size_t d, Rng& rng) {
  Tensor a = random_tensor(Shape{d, d}, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) a[i * d + j] = a[j * d + i];
  }
  return a;
}

ImageDataset small_images(std::size_t n, double noise, std::uint64_t seed) {
  SyntheticOptions opts;
  ImageDataset d = generate_synthetic(n, 10, seed, opts);
  return inject_label_noise(d, {noise, seed + 1});
}

MeasureConfig small_config(std::size_t k) {
  MeasureConfig c;
  c.num_paths = 2;
  c.max_neighborhood = k;
  c.tangent_directions = 2;
  c.seed = 77;
  return c;
}

}  // namespace

TEST(LossJacobian, HalfSquaredNorm) {
  const auto obj = quadratic(identity(2));
  EXPECT_EQ(loss_jacobian(obj, Tensor::from({3, 4}), 0), Tensor::from({3, 4}));
}

TEST(LossJacobian, LogitsConstantInInputGiveZero) {
  Params p = build_mlp({3, 4}, 1);
  p.tensors[0].value = Tensor::zeros(Shape{4, 3});
  const ModelObjective obj(p);
  const Tensor j = loss_jacobian(obj, Tensor::from({0.2, -1, 3}), 2);
  for (double v : j.data()) EXPECT_EQ(v, 0.0);
}

TEST(LossJacobian, ConvNetMatchesFiniteDifferences) {
  const Params p = build_convnet(ModelSpec::convnet(2), 3);
  const ModelObjective obj(p);
  Rng rng(4);
  const Tensor x = random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0);
  const Tensor numeric = central_difference(
      [&](const Tensor& z) { return obj.evaluate(z.reshaped(Shape{1, 3, 32, 32}), std::vector<int>{5}, false).losses[0]; },
      x);
  EXPECT_LT(relative_error(loss_jacobian(obj, x, 5), numeric), 1e-4);
}

TEST(LossJacobian, BatchedGradientsArePerSample) {
  const Params p = build_convnet(ModelSpec::convnet(1), 5);
  const ModelObjective obj(p);
  Rng rng(6);
  const Tensor xs[] = {random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0), random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0)};
  const auto e = obj.evaluate(stack(xs), std::vector<int>{1, 7}, true);
  EXPECT_LT(relative_error(unstack_one(e.input_grads, 0), loss_jacobian(obj, xs[0], 1)), 1e-12);
  EXPECT_LT(relative_error(unstack_one(e.input_grads, 1), loss_jacobian(obj, xs[1], 7)), 1e-12);
}

TEST(TangentHessian, SingleUnitDirection) {
  const auto obj = quadratic(identity(3));
  TangentDirectionSet dirs;
  dirs.step = 0.1;
  dirs.directions = {unit(3, 1)};
  EXPECT_NEAR(tangent_hessian_norm(obj, Tensor::from({1, 2, 3}), 0, dirs), 10.0, 1e-9);
  EXPECT_NEAR(tangent_hessian_norm(obj, Tensor::from({1, 2, 3}), 0, dirs, HessianNormalization::PerDirection), 1.0,
              1e-9);
}

TEST(TangentHessian, FourUnitDirections) {
  const auto obj = quadratic(identity(4));
  TangentDirectionSet dirs;
  dirs.step = 0.1;
  for (std::size_t i = 0; i < 4; ++i) dirs.directions.push_back(unit(4, i));
  EXPECT_NEAR(tangent_hessian_norm(obj, Tensor::from({1, 0, -1, 2}), 0, dirs), 1.25, 1e-9);
}

TEST(TangentHessian, LinearLossHasNoCurvature) {
  const auto obj = linear_loss(Tensor::from({1, -2, 0.5}));
  Rng rng(7);
  TangentDirectionSet dirs;
  dirs.step = 0.1;
  for (int m = 0; m < 3; ++m) dirs.directions.push_back(random_tensor(Shape{3}, rng));
  EXPECT_EQ(tangent_hessian_norm(obj, Tensor::from({0.1, 0.2, 0.3}), 0, dirs), 0.0);
}

TEST(TangentHessian, QuadraticClosedForm) {
  Rng rng(8);
  for (std::size_t d : {2u, 7u, 16u}) {
    const Tensor a = random_symmetric(d, rng);
    const auto obj = quadratic(a);
    const Tensor x = random_tensor(Shape{d}, rng);
    for (std::size_t m : {1u, 4u}) {
      for (double delta : {0.1, 0.01}) {
        TangentDirectionSet dirs;
        dirs.step = delta;
        double ss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          dirs.directions.push_back(random_tensor(Shape{d}, rng));
          const Tensor au = matvec(a, dirs.directions.back());
          ss += dot(au, au);
        }
        const double md = static_cast<double>(m);
        EXPECT_NEAR(tangent_hessian_norm(obj, x, 0, dirs), delta * std::sqrt(ss) / (md * md * delta * delta), 1e-9);
        EXPECT_NEAR(tangent_hessian_norm(obj, x, 0, dirs, HessianNormalization::PerDirection), std::sqrt(ss) / md,
                    1e-9);
      }
    }
  }
}

TEST(TangentHessian, FromJacobiansErrors) {
  const Tensor base = Tensor::from({1, 2});
  EXPECT_THROW(tangent_hessian_from_jacobians(base, {}, 0.1, HessianNormalization::AsWritten), std::invalid_argument);
  const Tensor bad[] = {Tensor::from({NAN, 0})};
  EXPECT_THROW(tangent_hessian_from_jacobians(base, bad, 0.1, HessianNormalization::AsWritten), NonFiniteError);
}

TEST(EvaluateField, UniformLogits) {
  Params p = build_mlp({2, 10}, 1);
  for (auto& t : p.tensors) t.value = Tensor::zeros(t.value.shape());
  const ModelObjective obj(p);
  TangentDirectionSet dirs;
  dirs.directions = {Tensor::from({1, 0})};
  EXPECT_NEAR(evaluate_field(obj, ScalarField::CrossEntropy, Tensor::from({0.3, 0.4}), 4, dirs), std::log(10.0),
              1e-12);
}

TEST(EvaluateField, AccuracyOnCorrectAndWrongPoint) {
  Params p = build_mlp({2, 2}, 1);
  p.tensors[0].value = identity(2);
  p.tensors[1].value = Tensor::zeros(Shape{2});
  const ModelObjective obj(p);
  TangentDirectionSet dirs;
  dirs.directions = {Tensor::from({1, 0})};
  EXPECT_EQ(evaluate_field(obj, ScalarField::Accuracy01, Tensor::from({2, 1}), 0, dirs), 1.0);
  EXPECT_EQ(evaluate_field(obj, ScalarField::Accuracy01, Tensor::from({2, 1}), 1, dirs), 0.0);
}

TEST(EvaluateField, MatchesPointOperations) {
  const Params p = build_convnet(ModelSpec::convnet(1), 9);
  const ModelObjective obj(p);
  Rng rng(10);
  const Tensor x = random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0);
  const auto dirs = sample_tangent_directions(x, 3, 0.1, 11);
  const PointValues v = evaluate_point(obj, x, 2, dirs);
  EXPECT_NEAR(v[ScalarField::JacobianNorm], loss_jacobian(obj, x, 2).frobenius_norm(), 1e-12);
  EXPECT_NEAR(v[ScalarField::HessianNorm], tangent_hessian_norm(obj, x, 2, dirs), 1e-10);
  const auto e = obj.evaluate(x.reshaped(Shape{1, 3, 32, 32}), std::vector<int>{2}, false);
  EXPECT_NEAR(v[ScalarField::CrossEntropy], e.losses[0], 1e-12);
  EXPECT_EQ(v[ScalarField::Accuracy01], e.predictions[0] == 2 ? 1.0 : 0.0);
  for (ScalarField f : kAllFields) EXPECT_EQ(evaluate_field(obj, f, x, 2, dirs), v[f]) << to_string(f);
}

TEST(EvaluateField, Names) {
  for (ScalarField f : kAllFields) EXPECT_EQ(field_from_string(to_string(f)), f);
  EXPECT_EQ(normalization_from_string("per_direction"), HessianNormalization::PerDirection);
  EXPECT_THROW(field_from_string("loss"), std::invalid_argument);
  EXPECT_THROW(normalization_from_string("other"), std::invalid_argument);
}

TEST(PathAverage, Examples) {
  EXPECT_EQ(path_average(std::vector<double>{1, 3}, std::vector<double>{0.37}), 2.0);
  EXPECT_EQ(path_average(std::vector<double>{0, 0, 4}, std::vector<double>{1, 3}), 1.5);
}

TEST(PathAverage, ConstantField) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t segs = 1 + uniform_index(rng, 7);
    const double c = uniform(rng, -5, 5);
    std::vector<double> lengths(segs);
    for (double& l : lengths) l = uniform(rng, 1e-3, 10);
    EXPECT_NEAR(path_average(std::vector<double>(segs + 1, c), lengths), c, 1e-12);
  }
}

TEST(PathAverage, Errors) {
  EXPECT_THROW(path_average(std::vector<double>{1}, std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(path_average(std::vector<double>{1, 2, 3}, std::vector<double>{1}), std::invalid_argument);
  EXPECT_THROW(path_average(std::vector<double>{1, 2}, std::vector<double>{0}), std::domain_error);
}

TEST(PathIntegral, ConstantLossOverRealPaths) {
  const auto obj = constant_loss(Shape{3, 8, 8}, 2.75);
  Rng rng(13);
  const Tensor x = random_tensor(Shape{3, 8, 8}, rng, 0.0, 1.0);
  const MeasureConfig cfg = small_config(3);
  for (const auto& path : generate_paths(x, 2, 3)) {
    EXPECT_NEAR(path_integral(obj, ScalarField::CrossEntropy, path, 0, 0, 0, cfg), 2.75, 1e-12);
    EXPECT_EQ(path_integral(obj, ScalarField::JacobianNorm, path, 0, 0, 0, cfg), 0.0);
  }
}

TEST(PathIntegral, ZeroLengthPathRejected) {
  const auto obj = constant_loss(Shape{3, 3, 3}, 1.0);
  AugmentationPath path;
  path.nodes = {Tensor::zeros(Shape{3, 3, 3}), Tensor::zeros(Shape{3, 3, 3})};
  path.strengths = {0, 1};
  path.segment_lengths = {0.0};
  EXPECT_THROW(path_integral(obj, ScalarField::CrossEntropy, path, 0, 0, 0, small_config(1)), std::domain_error);
}

TEST(NodeDirections, BaseSharedAcrossPathsAndSeeded) {
  Rng rng(14);
  const Tensor x = random_tensor(Shape{3, 4, 4}, rng, 0.0, 1.0);
  const MeasureConfig cfg = small_config(2);
  EXPECT_EQ(node_directions(x, 3, 0, 0, cfg).directions[0], node_directions(x, 3, 1, 0, cfg).directions[0]);
  EXPECT_NE(node_directions(x, 3, 0, 1, cfg).directions[0], node_directions(x, 3, 1, 1, cfg).directions[0]);
  EXPECT_NE(node_directions(x, 3, 0, 0, cfg).directions[0], node_directions(x, 4, 0, 0, cfg).directions[0]);
  EXPECT_EQ(node_directions(x, 3, 0, 0, cfg).size(), cfg.tangent_directions);
}

TEST(Jacobian, TwoPointToySet) {
  const auto obj = quadratic(identity(2));
  ImageDataset d;
  d.image_shape = Shape{2};
  d.num_classes = 2;
  d.push_back(std::vector<double>{3, 4}, 0);
  d.push_back(std::vector<double>{0, 0}, 1);
  EXPECT_DOUBLE_EQ(jacobian_norm_dataset(obj, d, Subset::All), 2.5);
  EXPECT_DOUBLE_EQ(jacobian_norm_dataset(obj, d, Subset::Clean), 2.5);
  EXPECT_THROW(jacobian_norm_dataset(obj, d, Subset::Noisy), std::invalid_argument);
}

TEST(Volume, ZeroNeighbourhoodEqualsPointValues) {
  const Params p = build_convnet(ModelSpec::convnet(1), 15);
  const ModelObjective obj(p);
  const ImageDataset d = small_images(4, 0.5, 16);
  const MeasureConfig cfg = small_config(0);
  const MeasurementTable t = measure_dataset(obj, d, cfg);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor x = d.image(i);
    const PointValues v = evaluate_point(obj, x, d.labels[i], node_directions(x, i, 0, 0, cfg));
    for (ScalarField f : kAllFields) EXPECT_NEAR(t.at(i, 0)[f], v[f], 1e-10) << i << ' ' << to_string(f);
  }
  const auto vm = volume_measure(obj, d, Subset::All, cfg);
  EXPECT_EQ(vm.neighborhood, 0u);
  EXPECT_DOUBLE_EQ(vm.values[ScalarField::JacobianNorm], jacobian_norm_dataset(obj, d, Subset::All));
}

TEST(Volume, TableMatchesPathIntegrals) {
  const Params p = build_convnet(ModelSpec::convnet(1), 17);
  const ModelObjective obj(p);
  const ImageDataset d = small_images(2, 0.0, 18);
  const MeasureConfig cfg = small_config(3);
  const MeasurementTable t = measure_dataset(obj, d, cfg);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 1; k <= 3; ++k) {
      const auto paths = generate_paths(d.image(i), cfg.num_paths, k);
      for (ScalarField f : kAllFields) {
        double mean = 0.0;
        for (std::size_t pi = 0; pi < paths.size(); ++pi) {
          mean += path_integral(obj, f, paths[pi], d.labels[i], i, pi, cfg);
        }
        mean /= static_cast<double>(paths.size());
        EXPECT_NEAR(t.at(i, k)[f], mean, 1e-9 * std::max(1.0, std::abs(mean))) << i << ' ' << k << ' ' << to_string(f);
      }
    }
  }
}

TEST(Volume, ConstantPerSampleFieldAveragesToMean) {
  // Loss c_n = sum of the first pixel's label-dependent constant; with the
  // training label as the constant, the volume mean is the label mean.
  const TapeObjective obj(Shape{3, 32, 32}, [](Tape& t, Var x, int y) {
    return t.add(t.scale(t.sum(x), 0.0), t.leaf(Tensor(Shape{}, {static_cast<double>(y)}), false));
  });
  const ImageDataset d = small_images(6, 0.0, 19);
  MeasureConfig cfg = small_config(2);
  cfg.num_paths = 1;
  double mean = 0.0;
  for (int y : d.labels) mean += y;
  mean /= static_cast<double>(d.size());
  const auto vm = volume_measure(obj, d, Subset::All, cfg);
  EXPECT_NEAR(vm.values[ScalarField::CrossEntropy], mean, 1e-12);
}

TEST(Volume, SubsetAdditivity) {
  const Params p = build_convnet(ModelSpec::convnet(1), 20);
  const ModelObjective obj(p);
  const ImageDataset d = small_images(10, 0.3, 21);
  const MeasureConfig cfg = small_config(2);
  const MeasurementTable t = measure_dataset(obj, d, cfg);
  const auto all = subset_indices(d, Subset::All);
  const auto clean = subset_indices(d, Subset::Clean);
  const auto noisy = subset_indices(d, Subset::Noisy);
  ASSERT_EQ(noisy.size(), 3u);
  for (std::size_t k = 0; k <= 2; ++k) {
    const PointValues a = t.mean(all, k), c = t.mean(clean, k), n = t.mean(noisy, k);
    for (ScalarField f : kAllFields) {
      EXPECT_NEAR(10.0 * a[f], 7.0 * c[f] + 3.0 * n[f], 1e-9) << k << ' ' << to_string(f);
    }
  }
  EXPECT_THROW(t.mean(std::vector<std::size_t>{}, 0), std::invalid_argument);
}

TEST(Volume, CleanEqualsAllWithoutNoise) {
  const Params p = build_convnet(ModelSpec::convnet(1), 22);
  const ModelObjective obj(p);
  const ImageDataset d = small_images(4, 0.0, 23);
  EXPECT_EQ(jacobian_norm_dataset(obj, d, Subset::Clean), jacobian_norm_dataset(obj, d, Subset::All));
  const MeasureConfig cfg = small_config(1);
  EXPECT_EQ(volume_measure(obj, d, Subset::Clean, cfg).values.v, volume_measure(obj, d, Subset::All, cfg).values.v);
}

TEST(Volume, ThreadCountDoesNotChangeResults) {
  const Params p = build_convnet(ModelSpec::convnet(1), 24);
  const ModelObjective obj(p);
  const ImageDataset d = small_images(5, 0.4, 25);
  MeasureConfig one = small_config(2);
  MeasureConfig three = one;
  three.threads = 3;
  const MeasurementTable a = measure_dataset(obj, d, one);
  const MeasurementTable b = measure_dataset(obj, d, three);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 0; k <= 2; ++k) EXPECT_EQ(a.at(i, k).v, b.at(i, k).v);
  }
}

TEST(Volume, MeasurementIsPure) {
  const Params p = build_convnet(ModelSpec::convnet(1), 26);
  const Params before = p;
  const ImageDataset d = small_images(3, 0.3, 27);
  const ImageDataset d_before = d;
  const ModelObjective obj(p);
  volume_measure(obj, d, Subset::All, small_config(1));
  evaluate_classification(obj, d, subset_indices(d, Subset::All));
  EXPECT_EQ(p, before);
  EXPECT_EQ(d.pixels, d_before.pixels);
  EXPECT_EQ(d.labels, d_before.labels);
}

TEST(Classification, ErrorAndLoss) {
  Params p = build_mlp({2, 2}, 1);
  p.tensors[0].value = identity(2);
  p.tensors[1].value = Tensor::zeros(Shape{2});
  const ModelObjective obj(p);
  ImageDataset d;
  d.image_shape = Shape{2};
  d.num_classes = 2;
  d.push_back(std::vector<double>{1, 0}, 0);
  d.push_back(std::vector<double>{1, 0}, 1);
  d.push_back(std::vector<double>{0, 0}, 1);  // tie resolves to class 0
  const auto stats = evaluate_classification(obj, d, subset_indices(d, Subset::All));
  EXPECT_EQ(stats.count, 3u);
  EXPECT_NEAR(stats.error, 2.0 / 3.0, 1e-15);
  const double l0 = std::log(1.0 + std::exp(-1.0));
  const double l1 = std::log(1.0 + std::exp(1.0));
  EXPECT_NEAR(stats.mean_loss, (l0 + l1 + std::log(2.0)) / 3.0, 1e-12);
}
