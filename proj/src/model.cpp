#include "sharplens/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sharplens/random.hpp"

namespace sharplens {

namespace {

constexpr std::size_t kStages = 4;
constexpr std::size_t kPools = kStages + 1;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

void add_layer(Params& p, const std::string& name, Shape weight_shape, std::size_t out, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  p.tensors.push_back({name + ".weight", uniform_tensor(std::move(weight_shape), bound, rng)});
  p.tensors.push_back({name + ".bias", uniform_tensor(Shape{out}, bound, rng)});
}

}  // namespace

ModelSpec ModelSpec::convnet(std::size_t k, std::size_t num_classes, Shape input_shape) {
  ModelSpec s;
  s.kind = ModelKind::ConvNet;
  s.base_width = k;
  s.num_classes = num_classes;
  s.input_shape = std::move(input_shape);
  return s;
}

ModelSpec ModelSpec::mlp(std::vector<std::size_t> layer_widths) {
  ModelSpec s;
  s.kind = ModelKind::Mlp;
  s.base_width = 0;
  s.layer_widths = std::move(layer_widths);
  if (!s.layer_widths.empty()) {
    s.input_shape = Shape{s.layer_widths.front()};
    s.num_classes = s.layer_widths.back();
  }
  return s;
}

std::vector<std::size_t> ModelSpec::stage_widths() const {
  if (kind != ModelKind::ConvNet) return {};
  return {base_width, 2 * base_width, 4 * base_width, 8 * base_width};
}

void ModelSpec::validate() const {
  if (kind == ModelKind::ConvNet) {
    if (base_width == 0) throw std::invalid_argument("convnet base width must be positive");
    if (input_shape.rank() != 3) throw ShapeError("convnet input must be [C,h,w], got " + input_shape.str());
    const std::size_t div = std::size_t{1} << kPools;
    if (input_shape[1] % div != 0 || input_shape[2] % div != 0) {
      throw ShapeError("convnet input spatial dims must be divisible by 32, got " + input_shape.str());
    }
    if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
  } else {
    if (layer_widths.size() < 2) throw std::invalid_argument("mlp needs at least two layer widths");
    if (std::find(layer_widths.begin(), layer_widths.end(), 0u) != layer_widths.end()) {
      throw std::invalid_argument("mlp layer widths must be positive");
    }
    if (input_shape.numel() != layer_widths.front()) {
      throw ShapeError("mlp input shape " + input_shape.str() + " does not flatten to " +
                       std::to_string(layer_widths.front()));
    }
    if (num_classes != layer_widths.back()) throw std::invalid_argument("mlp num_classes must equal last width");
  }
}

std::size_t Params::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.numel();
  return n;
}

bool Params::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.value.all_finite(); });
}

std::size_t param_count(const ModelSpec& spec) {
  std::size_t n = 0;
  if (spec.kind == ModelKind::ConvNet) {
    std::size_t cin = spec.input_shape[0];
    for (std::size_t cout : spec.stage_widths()) {
      n += cin * cout * 9 + cout;
      cin = cout;
    }
    const std::size_t spatial = (spec.input_shape[1] >> kPools) * (spec.input_shape[2] >> kPools);
    n += cin * spatial * spec.num_classes + spec.num_classes;
  } else {
    for (std::size_t i = 0; i + 1 < spec.layer_widths.size(); ++i) {
      n += spec.layer_widths[i] * spec.layer_widths[i + 1] + spec.layer_widths[i + 1];
    }
  }
  return n;
}

Params build_convnet(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.kind != ModelKind::ConvNet) throw std::invalid_argument("build_convnet: spec is not a convnet");
  spec.validate();
  Rng rng(seed);
  Params p{spec, {}};
  std::size_t cin = spec.input_shape[0];
  std::size_t stage = 1;
  for (std::size_t cout : spec.stage_widths()) {
    add_layer(p, "conv" + std::to_string(stage++), Shape{cout, cin, 3, 3}, cout, cin * 9, rng);
    cin = cout;
  }
  const std::size_t features = cin * (spec.input_shape[1] >> kPools) * (spec.input_shape[2] >> kPools);
  add_layer(p, "fc", Shape{spec.num_classes, features}, spec.num_classes, features, rng);
  return p;
}

Params build_mlp(const std::vector<std::size_t>& layer_widths, std::uint64_t seed) {
  ModelSpec spec = ModelSpec::mlp(layer_widths);
  spec.validate();
  Rng rng(seed);
  Params p{spec, {}};
  for (std::size_t i = 0; i + 1 < layer_widths.size(); ++i) {
    add_layer(p, "fc" + std::to_string(i + 1), Shape{layer_widths[i + 1], layer_widths[i]}, layer_widths[i + 1],
              layer_widths[i], rng);
  }
  return p;
}

Params build_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.kind == ModelKind::ConvNet) return build_convnet(spec, seed);
  Params p = build_mlp(spec.layer_widths, seed);
  p.spec.input_shape = spec.input_shape;
  p.spec.validate();
  return p;
}

std::vector<Var> place_params(Tape& tape, const Params& params, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(tape.leaf(t.value, requires_grad));
  return vars;
}

Var forward(Tape& tape, const Params& params, std::span<const Var> pv, Var x) {
  const ModelSpec& spec = params.spec;
  const Shape& xs = tape.value(x).shape();
  bool batched;
  if (xs == spec.input_shape) {
    batched = false;
  } else if (xs.rank() == spec.input_shape.rank() + 1 && xs.drop_front() == spec.input_shape) {
    batched = true;
  } else {
    throw ShapeError("forward: input " + xs.str() + " does not match model input " + spec.input_shape.str());
  }
  if (pv.size() != params.tensors.size()) throw std::invalid_argument("forward: parameter variable count mismatch");
  const std::size_t batch = batched ? xs[0] : 1;

  if (spec.kind == ModelKind::ConvNet) {
    Var h = x;
    for (std::size_t s = 0; s < kStages; ++s) {
      h = tape.maxpool2(tape.relu(tape.conv2d(h, pv[2 * s], pv[2 * s + 1])));
    }
    h = tape.maxpool2(h);
    const std::size_t features = tape.value(h).numel() / batch;
    h = tape.reshape(h, batched ? Shape{batch, features} : Shape{features});
    return tape.linear(h, pv[2 * kStages], pv[2 * kStages + 1]);
  }

  const std::size_t in = spec.layer_widths.front();
  Var h = tape.reshape(x, batched ? Shape{batch, in} : Shape{in});
  const std::size_t layers = spec.layer_widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = tape.linear(h, pv[2 * l], pv[2 * l + 1]);
    if (l + 1 < layers) h = tape.relu(h);
  }
  return h;
}

Tensor forward(const Params& params, const Tensor& x) {
  Tape tape;
  auto pv = place_params(tape, params, false);
  Var xv = tape.leaf(x, false);
  return tape.value(forward(tape, params, pv, xv));
}

// ---- checkpoint container --------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'L', 'N', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw CheckpointError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

void put_dims(std::ostream& os, const std::vector<std::size_t>& dims) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) put<std::uint64_t>(os, d);
}

std::vector<std::size_t> get_dims(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > 16) throw CheckpointError("checkpoint: implausible rank " + std::to_string(n));
  std::vector<std::size_t> dims(n);
  for (auto& d : dims) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  return dims;
}

}  // namespace

void save_checkpoint(const Params& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kFormatVersion);
  const ModelSpec& s = params.spec;
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.kind));
  put<std::uint64_t>(os, s.base_width);
  put<std::uint64_t>(os, s.num_classes);
  put_dims(os, s.input_shape.dims());
  put_dims(os, s.layer_widths);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_dims(os, t.value.shape().dims());
    for (double v : t.value.data()) put<double>(os, v);
  }
  if (!os) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Params load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kFormatVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Params p;
  const auto kind = get<std::uint32_t>(is);
  if (kind > 1) throw CheckpointError("unknown model kind " + std::to_string(kind));
  p.spec.kind = static_cast<ModelKind>(kind);
  p.spec.base_width = static_cast<std::size_t>(get<std::uint64_t>(is));
  p.spec.num_classes = static_cast<std::size_t>(get<std::uint64_t>(is));
  p.spec.input_shape = Shape(get_dims(is));
  p.spec.layer_widths = get_dims(is);
  p.spec.validate();
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    if (len > 4096) throw CheckpointError("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint truncated");
    Shape shape(get_dims(is));
    std::vector<double> data(shape.numel());
    for (double& v : data) v = get<double>(is);
    p.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint payload");
  if (p.scalar_count() != param_count(p.spec)) throw CheckpointError("checkpoint parameter count does not match spec");
  return p;
}

}  // namespace sharplens
