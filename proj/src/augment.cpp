#include "sharplens/augment.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sharplens/random.hpp"

namespace sharplens {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ChannelSvd {
  Eigen::MatrixXd u;
  Eigen::VectorXd sigma;  // descending
  Eigen::MatrixXd v;
};

void require_square(const Tensor& x, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected [C,h,w], got " + x.shape().str());
  if (x.shape()[1] != x.shape()[2]) {
    throw ShapeError(std::string(op) + ": spatial dims must be square, got " + x.shape().str());
  }
}

std::vector<ChannelSvd> decompose(const Tensor& x) {
  const std::size_t c = x.shape()[0];
  const auto w = static_cast<Eigen::Index>(x.shape()[1]);
  std::vector<ChannelSvd> out;
  out.reserve(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    Eigen::Map<const RowMat> m(x.data().data() + ch * static_cast<std::size_t>(w * w), w, w);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m), Eigen::ComputeFullU | Eigen::ComputeFullV);
    out.push_back({svd.matrixU(), svd.singularValues(), svd.matrixV()});
  }
  return out;
}

// Subtracts sigma_i u_i v_i^T (0-based descending index i) from every channel.
void erase_component(Tensor& img, const std::vector<ChannelSvd>& svds, std::size_t i) {
  const auto w = static_cast<Eigen::Index>(img.shape()[1]);
  const auto idx = static_cast<Eigen::Index>(i);
  for (std::size_t ch = 0; ch < svds.size(); ++ch) {
    Eigen::Map<RowMat> m(img.data().data() + ch * static_cast<std::size_t>(w * w), w, w);
    m.noalias() -= svds[ch].sigma(idx) * svds[ch].u.col(idx) * svds[ch].v.col(idx).transpose();
  }
}

void check_erase_range(std::size_t k, std::size_t p, std::size_t w) {
  if (k + p > w) {
    throw std::invalid_argument("svd augmentation: strength " + std::to_string(k) + " + path index " +
                                std::to_string(p) + " exceeds width " + std::to_string(w));
  }
}

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = (g - b) / delta;
    if (h < 0.0) h += 6.0;
    h /= 6.0;
  } else if (mx == g) {
    h = ((b - r) / delta + 2.0) / 6.0;
  } else {
    h = ((r - g) / delta + 4.0) / 6.0;
  }
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = h * 6.0;
  const double sector = std::floor(h6);
  const double f = h6 - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(sector) % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

void check_range(double v, double lo, double hi, const char* what) {
  if (!(v >= lo && v <= hi)) {
    throw std::invalid_argument(std::string("color jitter ") + what + " " + std::to_string(v) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

Tensor svd_augment(const Tensor& x, const SvdAugmentSpec& spec) {
  require_square(x, "svd_augment");
  const std::size_t w = x.shape()[1];
  check_erase_range(spec.strength, spec.path_index, w);
  if (spec.strength == 0) return x;
  const auto svds = decompose(x);
  Tensor out = x;
  // 1-based indices w-k-p+1 .. w-p are 0-based w-k-p .. w-p-1. Erasing from
  // the smallest upwards matches the order generate_paths uses, so path nodes
  // equal svd_augment bitwise.
  for (std::size_t i = w - spec.path_index; i-- > w - spec.strength - spec.path_index;) erase_component(out, svds, i);
  return out;
}

Tensor channel_singular_values(const Tensor& x) {
  require_square(x, "channel_singular_values");
  const std::size_t c = x.shape()[0];
  const std::size_t w = x.shape()[1];
  Tensor out(Shape{c, w});
  const auto svds = decompose(x);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < w; ++i) out[ch * w + i] = svds[ch].sigma(static_cast<Eigen::Index>(i));
  }
  return out;
}

void ColorJitterSpec::validate() const {
  check_range(brightness, 0.9, 1.1, "brightness");
  check_range(contrast, 0.9, 1.1, "contrast");
  check_range(saturation, 0.9, 1.1, "saturation");
  check_range(hue, -0.05, 0.05, "hue");
  std::array<ColorOp, 4> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::array{ColorOp::Brightness, ColorOp::Contrast, ColorOp::Saturation, ColorOp::Hue}) {
    throw std::invalid_argument("color jitter order must be a permutation of the four operations");
  }
}

ColorJitterSpec ColorJitterSpec::random(std::uint64_t seed) {
  Rng rng(seed);
  ColorJitterSpec s;
  s.brightness = uniform(rng, 0.9, 1.1);
  s.contrast = uniform(rng, 0.9, 1.1);
  s.saturation = uniform(rng, 0.9, 1.1);
  s.hue = uniform(rng, -0.05, 0.05);
  shuffle(s.order.begin(), s.order.end(), rng);
  return s;
}

Tensor rotate_hue(const Tensor& x, double shift) {
  if (x.rank() != 3 || x.shape()[0] != 3) throw ShapeError("rotate_hue: expected [3,h,w], got " + x.shape().str());
  const std::size_t n = x.shape()[1] * x.shape()[2];
  Tensor out = x;
  double* r = out.data().data();
  double* g = r + n;
  double* b = g + n;
  for (std::size_t i = 0; i < n; ++i) {
    double h, s, v;
    rgb_to_hsv(r[i], g[i], b[i], h, s, v);
    h += shift;
    h -= std::floor(h);
    hsv_to_rgb(h, s, v, r[i], g[i], b[i]);
    r[i] = clip01(r[i]);
    g[i] = clip01(g[i]);
    b[i] = clip01(b[i]);
  }
  return out;
}

Tensor color_jitter(const Tensor& x, const ColorJitterSpec& spec) {
  spec.validate();
  if (x.rank() != 3 || x.shape()[0] != 3) throw ShapeError("color_jitter: expected [3,h,w], got " + x.shape().str());
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("color_jitter: pixel values must lie in [0,1]");
  }
  const std::size_t n = x.shape()[1] * x.shape()[2];
  Tensor out = x;
  double* r = out.data().data();
  double* g = r + n;
  double* b = g + n;
  for (ColorOp op : spec.order) {
    switch (op) {
      case ColorOp::Brightness:
        for (double& v : out.data()) v = clip01(spec.brightness * v);
        break;
      case ColorOp::Contrast: {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += luma(r[i], g[i], b[i]);
        mu /= static_cast<double>(n);
        for (double& v : out.data()) v = clip01(mu + spec.contrast * (v - mu));
        break;
      }
      case ColorOp::Saturation:
        for (std::size_t i = 0; i < n; ++i) {
          const double gray = luma(r[i], g[i], b[i]);
          r[i] = clip01(gray + spec.saturation * (r[i] - gray));
          g[i] = clip01(gray + spec.saturation * (g[i] - gray));
          b[i] = clip01(gray + spec.saturation * (b[i] - gray));
        }
        break;
      case ColorOp::Hue:
        if (spec.hue != 0.0) out = rotate_hue(out, spec.hue);
        r = out.data().data();
        g = r + n;
        b = g + n;
        break;
    }
  }
  return out;
}

TangentDirectionSet sample_tangent_directions(const Tensor& x, std::size_t count, double step, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("tangent directions: count must be >= 1");
  if (!(step > 0.0)) throw std::invalid_argument("tangent directions: step must be > 0");
  TangentDirectionSet set;
  set.step = step;
  set.directions.reserve(count);
  for (std::size_t m = 0; m < count; ++m) {
    const auto spec = ColorJitterSpec::random(derive_seed(seed, {m}));
    set.directions.push_back(color_jitter(x, spec) - x);
  }
  return set;
}

double AugmentationPath::length() const {
  return std::accumulate(segment_lengths.begin(), segment_lengths.end(), 0.0);
}

std::vector<AugmentationPath> generate_paths(const Tensor& x, std::size_t num_paths, std::size_t num_strengths) {
  require_square(x, "generate_paths");
  if (num_paths == 0) throw std::invalid_argument("generate_paths: need at least one path");
  if (num_strengths == 0) throw std::invalid_argument("generate_paths: need at least one strength (K >= 1)");
  const std::size_t w = x.shape()[1];
  if (num_strengths + num_paths > w) {
    throw std::invalid_argument("generate_paths: K + P = " + std::to_string(num_strengths + num_paths) +
                                " exceeds width " + std::to_string(w));
  }
  const auto svds = decompose(x);
  std::vector<AugmentationPath> paths(num_paths);
  for (std::size_t p = 0; p < num_paths; ++p) {
    AugmentationPath& path = paths[p];
    path.nodes.push_back(x);
    path.strengths.push_back(0);
    Tensor node = x;
    for (std::size_t k = 1; k <= num_strengths; ++k) {
      // Strength k adds 0-based index w-k-p to the erased block of strength k-1.
      erase_component(node, svds, w - k - p);
      path.segment_lengths.push_back((node - path.nodes.back()).frobenius_norm());
      path.nodes.push_back(node);
      path.strengths.push_back(k);
    }
  }
  return paths;
}

}  // namespace sharplens
