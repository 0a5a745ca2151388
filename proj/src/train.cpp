#include "sharplens/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "sharplens/random.hpp"
#include "sharplens/tape.hpp"

namespace sharplens {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw std::invalid_argument("base_lr must be positive");
  if (!(warmup_start_lr >= 0.0) || !std::isfinite(warmup_start_lr)) {
    throw std::invalid_argument("warmup_start_lr must be nonnegative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("weight_decay must be nonnegative");
  }
}

double lr_schedule(const TrainConfig& config, std::size_t epoch) {
  if (config.warmup_epochs == 0 || epoch >= config.warmup_epochs) return config.base_lr;
  const double w = static_cast<double>(config.warmup_epochs);
  return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * static_cast<double>(epoch) / w;
}

SgdMomentum::SgdMomentum(const Params& params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params.tensors.size());
  for (const auto& t : params.tensors) velocity_.push_back(Tensor(t.value.shape()));
}

void SgdMomentum::step(Params& params, std::span<const Tensor> grads, double lr) {
  if (grads.size() != params.tensors.size() || velocity_.size() != grads.size()) {
    throw std::invalid_argument("SgdMomentum: one gradient per parameter tensor");
  }
  for (std::size_t t = 0; t < grads.size(); ++t) {
    auto theta = params.tensors[t].value.data();
    auto v = velocity_[t].data();
    const auto g = grads[t].data();
    if (g.size() != theta.size()) throw ShapeError("SgdMomentum: gradient shape mismatch for " + params.tensors[t].name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double gi = g[i];
      if (weight_decay_ != 0.0) gi += weight_decay_ * theta[i];
      v[i] = momentum_ * v[i] + gi;
      theta[i] -= lr * v[i];
    }
  }
}

namespace {

struct Accumulator {
  double loss = 0.0;
  std::size_t wrong = 0;
  std::size_t count = 0;

  void add(double l, bool w) {
    loss += l;
    wrong += w;
    ++count;
  }
  double mean_loss() const { return count ? loss / static_cast<double>(count) : 0.0; }
  double error() const { return count ? static_cast<double>(wrong) / static_cast<double>(count) : 0.0; }
};

[[noreturn]] void diverged(const Params& params, const SgdMomentum& opt, const TrainCallbacks& cb, std::size_t epoch,
                           std::size_t batch, double lr, const std::string& cause) {
  std::ostringstream msg;
  msg << "training diverged at epoch " << epoch << ", batch " << batch << " (lr " << lr << "): " << cause;
  msg << "\n  parameter norms:";
  for (const auto& t : params.tensors) msg << ' ' << t.name << '=' << t.value.frobenius_norm();
  msg << "\n  velocity norms:";
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    msg << ' ' << params.tensors[i].name << '=' << opt.velocity()[i].frobenius_norm();
  }
  if (!cb.diagnostics_dir.empty()) {
    std::filesystem::create_directories(cb.diagnostics_dir);
    save_checkpoint(params, cb.diagnostics_dir / "diverged_params.slns");
    std::ofstream(cb.diagnostics_dir / "diverged.txt") << msg.str() << '\n';
    msg << "\n  state written to " << cb.diagnostics_dir.string();
  }
  throw TrainingDiverged(msg.str());
}

}  // namespace

TrainResult train(Params params, const ImageDataset& data, const TrainConfig& config, const TrainCallbacks& cb) {
  config.validate();
  params.spec.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (data.image_shape != params.spec.input_shape) {
    throw ShapeError("train: dataset images " + data.image_shape.str() + " do not match model input " +
                     params.spec.input_shape.str());
  }
  for (std::size_t e : cb.measure_epochs) {
    if (e > config.epochs) throw std::invalid_argument("measurement epoch " + std::to_string(e) + " beyond training");
  }
  auto measure_at = [&](std::size_t e) {
    if (cb.on_measure && std::find(cb.measure_epochs.begin(), cb.measure_epochs.end(), e) != cb.measure_epochs.end()) {
      cb.on_measure(e, params);
    }
  };

  TrainResult result;
  SgdMomentum opt(params, config.momentum, config.weight_decay);
  measure_at(0);

  std::vector<std::size_t> batch;
  std::vector<Tensor> grads;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_schedule(config, epoch);
    BatchIterator it(data, config.batch_size, derive_seed(config.seed, {epoch}));
    Accumulator all, clean, noisy;
    std::size_t b = 0;
    while (it.next(batch)) {
      const auto labels = data.gather_labels(batch);
      Tape tape;
      const Var x = tape.leaf(data.gather(batch), false);
      const auto vars = place_params(tape, params, true);
      const Var logits = forward(tape, params, vars, x);
      LossValue loss;
      try {
        loss = tape.softmax_crossentropy(logits, labels, Reduction::Mean);
        tape.backward(loss.total);
      } catch (const NonFiniteError& e) {
        diverged(params, opt, cb, epoch, b, lr, e.what());
      }
      grads.clear();
      for (Var v : vars) grads.push_back(tape.grad(v));
      for (const auto& g : grads) {
        if (!g.all_finite()) diverged(params, opt, cb, epoch, b, lr, "non-finite parameter gradient");
      }
      opt.step(params, grads, lr);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const bool wrong = loss.predictions[i] != labels[i];
        all.add(loss.per_sample[i], wrong);
        (data.noisy_mask[batch[i]] ? noisy : clean).add(loss.per_sample[i], wrong);
      }
      ++b;
    }
    EpochStats s;
    s.epoch = epoch + 1;
    s.lr = lr;
    s.loss = all.mean_loss();
    s.error = all.error();
    s.clean_count = clean.count;
    s.clean_loss = clean.mean_loss();
    s.clean_error = clean.error();
    s.noisy_count = noisy.count;
    s.noisy_loss = noisy.mean_loss();
    s.noisy_error = noisy.error();
    result.log.push_back(s);
    if (cb.on_epoch) cb.on_epoch(s);
    measure_at(epoch + 1);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace sharplens
