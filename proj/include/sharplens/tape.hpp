#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sharplens/tensor.hpp"

namespace sharplens {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  const Tape* tape = nullptr;
  std::size_t id = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a forward or backward pass produces NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Reduction { Mean, Sum };

/// Scalar loss plus the per-sample terms it was reduced from.
struct LossValue {
  Var total;
  std::vector<double> per_sample;
  /// Row-wise argmax of the logits, one entry per sample.
  std::vector<int> predictions;
};

/// Reverse-mode tape. Records primitive operations in execution order, so
/// operands always precede their consumers. A tape supports exactly one
/// backward pass; build a fresh tape for every forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Propagates adjoints from the scalar `loss` to every node that requires
  /// them. Throws TapeError on a second call.
  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  /// Adjoint of `v` after backward(); zeros when `v` did not influence the loss.
  Tensor grad(Var v) const;

  // ---- primitives -------------------------------------------------------
  // Image ops accept either a single sample [C,h,w] or a batch [B,C,h,w].

  /// 3x3 convolution, stride 1, zero padding 1.
  Var conv2d(Var input, Var kernel, Var bias);
  /// 2x2 max pooling with stride 2. Ties route the adjoint to the first
  /// element of the window in row-major order.
  Var maxpool2(Var input);
  Var relu(Var input);
  /// weight . input + bias for input [n] or [B,n], weight [m,n], bias [m].
  Var linear(Var input, Var weight, Var bias);
  Var reshape(Var input, Shape shape);
  /// Mean or summed cross-entropy of logits [C] or [B,C] against targets.
  LossValue softmax_crossentropy(Var logits, std::span<const int> targets, Reduction reduction = Reduction::Mean);

  Var add(Var a, Var b);
  Var scale(Var a, double s);
  Var mul(Var a, Var b);
  Var sum(Var a);
  /// Inner product with a constant tensor of the same size.
  Var dot_const(Var a, const Tensor& c);

 private:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward);
  void check(Var v) const;
  void accumulate(Var v, Tensor g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool backward_done_ = false;
};

/// dL/dx for a loss produced on the same tape as `x`. Runs the backward pass
/// if it has not run yet. Parameters are never updated.
Tensor backward_to_input(Tape& tape, const LossValue& loss, Var x);

}  // namespace sharplens
