#include "sharplens/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sharplens {

namespace {

#if defined(__GLIBC__)
// Activation buffers are large and short-lived. Keeping them on the heap
// instead of fresh mmap regions avoids a page fault per touched page.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using ConstMapRow = Eigen::Map<const RowMat>;

// Batch view of an image tensor: single samples are treated as B = 1.
struct ImageDims {
  bool batched;
  std::size_t b, c, h, w;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.rank() == 3) return {false, 1, s[0], s[1], s[2]};
  if (s.rank() == 4) return {true, s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected [C,h,w] or [B,C,h,w], got " + s.str());
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.b, c, h, w} : Shape{c, h, w};
}

// Unfolds the 3x3 neighbourhoods of one sample [C,h,w] into the (C*9) x (h*w)
// block of a row-major matrix with leading dimension `ld`.
void im2col(const double* in, std::size_t channels, std::size_t h, std::size_t w, double* col, std::size_t ld) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = in + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * ld;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          double* drow = dst + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(drow, drow + w, 0.0);
            continue;
          }
          const double* srow = plane + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            drow[x] = (sx < 0 || sx >= static_cast<long>(w)) ? 0.0 : srow[sx];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: adds column gradients back onto one sample.
void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w, double* out, std::size_t ld) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = out + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = col + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * ld;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          double* prow = plane + static_cast<std::size_t>(sy) * w;
          const double* srow = src + y * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) prow[sx] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, BackwardFn backward) {
  if (backward_done_) throw TapeError("tape already consumed by a backward pass");
  nodes_.push_back(Node{std::move(value), requires_grad, requires_grad ? std::move(backward) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

void Tape::check(Var v) const {
  if (v.tape != this) throw TapeError("variable is not on this tape");
  if (v.id >= nodes_.size()) throw TapeError("variable id out of range");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, {});
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

void Tape::accumulate(Var v, Tensor g) {
  if (!nodes_[v.id].requires_grad) return;
  Tensor& slot = grads_[v.id];
  if (slot.numel() == 0) {
    slot = std::move(g);
    return;
  }
  auto dst = slot.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  check(loss);
  if (backward_done_) throw TapeError("backward already ran on this tape");
  if (nodes_[loss.id].value.numel() != 1) throw TapeError("backward requires a scalar loss");
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  if (!nodes_[loss.id].requires_grad) return;
  grads_[loss.id] = Tensor::full(nodes_[loss.id].value.shape(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || grads_[i].numel() == 0) continue;
    node.backward(*this, grads_[i]);
  }
}

Tensor Tape::grad(Var v) const {
  check(v);
  if (!backward_done_) throw TapeError("grad() requested before backward()");
  if (grads_[v.id].numel() == 0) return Tensor::zeros(nodes_[v.id].value.shape());
  return grads_[v.id];
}

Var Tape::conv2d(Var input, Var kernel, Var bias) {
  check(input);
  check(kernel);
  check(bias);
  const Tensor& x = value(input);
  const Tensor& k = value(kernel);
  const Tensor& b = value(bias);
  const ImageDims d = image_dims(x.shape(), "conv2d");
  if (k.rank() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3) {
    throw ShapeError("conv2d: kernel must be [C_out,C_in,3,3], got " + k.shape().str());
  }
  const std::size_t cout = k.shape()[0];
  if (k.shape()[1] != d.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.shape()[1]) + " input channels, input has " +
                     std::to_string(d.c));
  }
  if (b.shape() != Shape{cout}) throw ShapeError("conv2d: bias must be [C_out], got " + b.shape().str());

  const std::size_t hw = d.h * d.w;
  const std::size_t krows = d.c * 9;
  // Samples are processed in groups spanning ~kGroupColumns output pixels, so
  // the unfolded block stays cache-resident while GEMMs keep a useful width.
  // The block is recomputed in the backward pass rather than stored.
  constexpr std::size_t kGroupColumns = 1024;
  const std::size_t group = std::max<std::size_t>(1, kGroupColumns / hw);
  const auto M = static_cast<Eigen::Index>(cout);
  const auto K = static_cast<Eigen::Index>(krows);

  Tensor out(image_shape(d, cout, d.h, d.w));
  ConstMapRow wmat(k.data().data(), M, K);
  RowMat col;
  RowMat prod;
  for (std::size_t b0 = 0; b0 < d.b; b0 += group) {
    const std::size_t gn = std::min(group, d.b - b0);
    const std::size_t ld = gn * hw;
    col.resize(K, static_cast<Eigen::Index>(ld));
    for (std::size_t j = 0; j < gn; ++j) {
      im2col(x.data().data() + (b0 + j) * d.c * hw, d.c, d.h, d.w, col.data() + j * hw, ld);
    }
    prod.noalias() = wmat * col;
    for (std::size_t j = 0; j < gn; ++j) {
      double* dst = out.data().data() + (b0 + j) * cout * hw;
      for (std::size_t co = 0; co < cout; ++co) {
        const double* src = prod.data() + co * ld + j * hw;
        const double bias_v = b[co];
        for (std::size_t p = 0; p < hw; ++p) dst[co * hw + p] = src[p] + bias_v;
      }
    }
  }

  const bool need = requires_grad(input) || requires_grad(kernel) || requires_grad(bias);
  return push(std::move(out), need, [=](Tape& t, const Tensor& g) {
    const bool gk_needed = t.requires_grad(kernel);
    const bool gx_needed = t.requires_grad(input);
    const Tensor& xv = t.value(input);
    const Tensor& kv = t.value(kernel);
    ConstMapRow wm(kv.data().data(), M, K);
    RowMat gk = RowMat::Zero(M, K);
    Tensor gb(Shape{cout});
    Tensor gx = gx_needed ? Tensor(xv.shape()) : Tensor{};
    RowMat gmat;
    RowMat col_g;
    for (std::size_t b0 = 0; b0 < d.b; b0 += group) {
      const std::size_t gn = std::min(group, d.b - b0);
      const std::size_t ld = gn * hw;
      gmat.resize(M, static_cast<Eigen::Index>(ld));
      for (std::size_t j = 0; j < gn; ++j) {
        const double* src = g.data().data() + (b0 + j) * cout * hw;
        for (std::size_t co = 0; co < cout; ++co) {
          std::copy_n(src + co * hw, hw, gmat.data() + co * ld + j * hw);
        }
      }
      for (Eigen::Index co = 0; co < M; ++co) gb[static_cast<std::size_t>(co)] += gmat.row(co).sum();
      if (gk_needed) {
        col_g.resize(K, static_cast<Eigen::Index>(ld));
        for (std::size_t j = 0; j < gn; ++j) {
          im2col(xv.data().data() + (b0 + j) * d.c * hw, d.c, d.h, d.w, col_g.data() + j * hw, ld);
        }
        gk.noalias() += gmat * col_g.transpose();
      }
      if (gx_needed) {
        col_g.noalias() = wm.transpose() * gmat;
        for (std::size_t j = 0; j < gn; ++j) {
          col2im(col_g.data() + j * hw, d.c, d.h, d.w, gx.data().data() + (b0 + j) * d.c * hw, ld);
        }
      }
    }
    t.accumulate(bias, std::move(gb));
    if (gk_needed) t.accumulate(kernel, Tensor(kv.shape(), std::vector<double>(gk.data(), gk.data() + gk.size())));
    if (gx_needed) t.accumulate(input, std::move(gx));
  });
}

Var Tape::maxpool2(Var input) {
  check(input);
  const Tensor& x = value(input);
  const ImageDims d = image_dims(x.shape(), "maxpool2");
  if (d.h % 2 != 0 || d.w % 2 != 0) throw ShapeError("maxpool2: spatial dims must be even, got " + x.shape().str());
  const std::size_t oh = d.h / 2;
  const std::size_t ow = d.w / 2;
  Tensor out(image_shape(d, d.c, oh, ow));
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const double* in = x.data().data();
  double* o = out.data().data();
  std::size_t oi = 0;
  for (std::size_t plane = 0; plane < d.b * d.c; ++plane) {
    const std::size_t base = plane * d.h * d.w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo, ++oi) {
        std::size_t best = base + (2 * y) * d.w + 2 * xo;
        // Scan order (0,0),(0,1),(1,0),(1,1); strict comparison keeps the first maximum.
        const std::size_t cand[3] = {best + 1, best + d.w, best + d.w + 1};
        for (std::size_t c : cand) {
          if (in[c] > in[best]) best = c;
        }
        o[oi] = in[best];
        (*argmax)[oi] = best;
      }
    }
  }
  return push(std::move(out), requires_grad(input), [=](Tape& t, const Tensor& g) {
    Tensor gx(t.value(input).shape());
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[i];
    t.accumulate(input, std::move(gx));
  });
}

Var Tape::relu(Var input) {
  check(input);
  const Tensor& x = value(input);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return push(std::move(out), requires_grad(input), [=](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(input);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
    t.accumulate(input, std::move(gx));
  });
}

Var Tape::linear(Var input, Var weight, Var bias) {
  check(input);
  check(weight);
  check(bias);
  const Tensor& x = value(input);
  const Tensor& wt = value(weight);
  const Tensor& b = value(bias);
  if (wt.rank() != 2) throw ShapeError("linear: weight must be [m,n], got " + wt.shape().str());
  const std::size_t m = wt.shape()[0];
  const std::size_t n = wt.shape()[1];
  std::size_t batch = 0;
  bool batched = false;
  if (x.rank() == 1 && x.shape()[0] == n) {
    batch = 1;
  } else if (x.rank() == 2 && x.shape()[1] == n) {
    batch = x.shape()[0];
    batched = true;
  } else {
    throw ShapeError("linear: input " + x.shape().str() + " incompatible with weight " + wt.shape().str());
  }
  if (b.shape() != Shape{m}) throw ShapeError("linear: bias must be [" + std::to_string(m) + "], got " + b.shape().str());

  const auto B = static_cast<Eigen::Index>(batch);
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  Tensor out(batched ? Shape{batch, m} : Shape{m});
  MapRow om(out.data().data(), B, M);
  om.noalias() = ConstMapRow(x.data().data(), B, N) * ConstMapRow(wt.data().data(), M, N).transpose();
  for (Eigen::Index r = 0; r < B; ++r) {
    for (Eigen::Index c = 0; c < M; ++c) om(r, c) += b[static_cast<std::size_t>(c)];
  }

  const bool need = requires_grad(input) || requires_grad(weight) || requires_grad(bias);
  return push(std::move(out), need, [=](Tape& t, const Tensor& g) {
    ConstMapRow gm(g.data().data(), B, M);
    if (t.requires_grad(bias)) {
      Tensor gb(Shape{m});
      for (Eigen::Index c = 0; c < M; ++c) gb[static_cast<std::size_t>(c)] = gm.col(c).sum();
      t.accumulate(bias, std::move(gb));
    }
    if (t.requires_grad(weight)) {
      Tensor gw(Shape{m, n});
      MapRow(gw.data().data(), M, N).noalias() =
          gm.transpose() * ConstMapRow(t.value(input).data().data(), B, N);
      t.accumulate(weight, std::move(gw));
    }
    if (t.requires_grad(input)) {
      Tensor gx(t.value(input).shape());
      MapRow(gx.data().data(), B, N).noalias() = gm * ConstMapRow(t.value(weight).data().data(), M, N);
      t.accumulate(input, std::move(gx));
    }
  });
}

Var Tape::reshape(Var input, Shape shape) {
  check(input);
  const Tensor& x = value(input);
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  }
  return push(x.reshaped(std::move(shape)), requires_grad(input), [=](Tape& t, const Tensor& g) {
    t.accumulate(input, g.reshaped(t.value(input).shape()));
  });
}

LossValue Tape::softmax_crossentropy(Var logits, std::span<const int> targets, Reduction reduction) {
  check(logits);
  const Tensor& z = value(logits);
  std::size_t batch = 0;
  std::size_t classes = 0;
  if (z.rank() == 1) {
    batch = 1;
    classes = z.shape()[0];
  } else if (z.rank() == 2) {
    batch = z.shape()[0];
    classes = z.shape()[1];
  } else {
    throw ShapeError("softmax_crossentropy: logits must be [C] or [B,C], got " + z.shape().str());
  }
  if (targets.size() != batch) {
    throw ShapeError("softmax_crossentropy: " + std::to_string(targets.size()) + " targets for batch of " +
                     std::to_string(batch));
  }

  LossValue result;
  result.per_sample.resize(batch);
  result.predictions.resize(batch);
  auto probs = std::make_shared<std::vector<double>>(batch * classes);
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int target = tgt[r];
    if (target < 0 || static_cast<std::size_t>(target) >= classes) {
      throw std::out_of_range("softmax_crossentropy: target " + std::to_string(target) + " outside [0," +
                              std::to_string(classes) + ")");
    }
    const double* row = z.data().data() + r * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    const double mx = row[best];
    double s = 0.0;
    double* p = probs->data() + r * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(row[c] - mx);
      s += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= s;
    const double loss = std::log(s) + mx - row[target];
    if (!std::isfinite(loss)) throw NonFiniteError("softmax_crossentropy: non-finite loss");
    result.per_sample[r] = loss;
    result.predictions[r] = static_cast<int>(best);
    total += loss;
  }
  const double scale = reduction == Reduction::Mean ? 1.0 / static_cast<double>(batch) : 1.0;
  result.total = push(Tensor(Shape{}, {total * scale}), requires_grad(logits), [=](Tape& t, const Tensor& g) {
    Tensor gz(t.value(logits).shape());
    const double gs = g[0] * scale;
    for (std::size_t r = 0; r < batch; ++r) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<int>(c) == tgt[r] ? 1.0 : 0.0;
        gz[r * classes + c] = gs * ((*probs)[r * classes + c] - onehot);
      }
    }
    t.accumulate(logits, std::move(gz));
  });
  return result;
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: shape mismatch " + av.shape().str() + " vs " + bv.shape().str());
  return push(av + bv, requires_grad(a) || requires_grad(b), [=](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, requires_grad(a), [=](Tape& t, const Tensor& g) { t.accumulate(a, g * s); });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.shape() != bv.shape()) throw ShapeError("mul: shape mismatch " + av.shape().str() + " vs " + bv.shape().str());
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b), [=](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    Tensor ga(x.shape());
    Tensor gb(y.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] = g[i] * y[i];
      gb[i] = g[i] * x[i];
    }
    t.accumulate(a, std::move(ga));
    t.accumulate(b, std::move(gb));
  });
}

Var Tape::sum(Var a) {
  const Tensor& av = value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  return push(Tensor(Shape{}, {s}), requires_grad(a), [=](Tape& t, const Tensor& g) {
    t.accumulate(a, Tensor::full(t.value(a).shape(), g[0]));
  });
}

Var Tape::dot_const(Var a, const Tensor& c) {
  const Tensor& av = value(a);
  if (av.numel() != c.numel()) throw ShapeError("dot_const: size mismatch");
  return push(Tensor(Shape{}, {dot(av, c)}), requires_grad(a), [=](Tape& t, const Tensor& g) {
    t.accumulate(a, c.reshaped(t.value(a).shape()) * g[0]);
  });
}

Tensor backward_to_input(Tape& tape, const LossValue& loss, Var x) {
  if (x.tape != &tape) throw TapeError("backward_to_input: input variable is not on the tape");
  if (loss.total.tape != &tape) throw TapeError("backward_to_input: loss was produced on a different tape");
  if (!tape.requires_grad(x)) throw TapeError("backward_to_input: input was recorded without requires_grad");
  if (!tape.backward_done()) tape.backward(loss.total);
  Tensor g = tape.grad(x);
  if (!g.all_finite()) throw NonFiniteError("backward_to_input: non-finite input gradient");
  return g;
}

}  // namespace sharplens
