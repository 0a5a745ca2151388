// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 when any
// criterion fails.
//
//   sharplens_acceptance [--results DIR] [--desk-rerun WIDTH --threads N]
//
// Criteria 1-6 run live. Criteria 7-12 read the desk-scale sweep committed
// under DIR (default: results/desk in the source tree).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sharplens/config.hpp"
#include "sharplens/metrics.hpp"
#include "sharplens/sweep.hpp"
#include "support/oracles.hpp"

using namespace sharplens;
using sharplens::testing::random_tensor;
using sharplens::testing::relative_error;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances -----------------------------------------------------------
constexpr double kFdStep = 1e-5;
constexpr double kModelGradTol = 1e-4;
constexpr double kPrimitiveGradTol = 1e-6;
constexpr std::size_t kMinModelPairs = 100;
constexpr double kHessianTol = 1e-9;
constexpr std::size_t kSvdImages = 1000;
constexpr double kSvdTol = 1e-9;
constexpr double kQuadratureTol = 1e-12;
constexpr double kAdditivityTol = 1e-9;
constexpr double kDoubleDescentMargin = 0.02;
constexpr std::size_t kPeakAlignPositions = 2;
constexpr double kSharpnessDecayRatio = 0.5;
constexpr double kNeighbourhoodGrowth = 2.0;
constexpr std::size_t kVolumeLowK = 1;
constexpr std::size_t kVolumeHighK = 7;
constexpr double kFitLoss = 0.1;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

int report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << std::endl;
  return o.pass ? 0 : 1;
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

// ---- 1: autodiff -------------------------------------------------------------------

double scalar_of(Tape& t, Var v, const Tensor& weights) { return t.value(t.dot_const(v, weights))[0]; }

// FD check of one primitive: `op` builds the output from leaves, the scalar is
// <op(...), w> for fixed random w.
double primitive_error(const std::vector<Tensor>& inputs,
                       const std::function<Var(Tape&, const std::vector<Var>&)>& op, Rng& rng) {
  Tensor w;
  {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(t.leaf(x, false));
    w = random_tensor(t.value(op(t, vs)).shape(), rng);
  }
  double worst = 0.0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(t.leaf(x, true));
    const Var s = t.dot_const(op(t, vs), w);
    t.backward(s);
    const Tensor analytic = t.grad(vs[which]);
    const Tensor numeric = sharplens::testing::central_difference(
        [&](const Tensor& z) {
          Tape u;
          std::vector<Var> us;
          for (std::size_t i = 0; i < inputs.size(); ++i) us.push_back(u.leaf(i == which ? z : inputs[i], false));
          return scalar_of(u, op(u, us), w);
        },
        inputs[which], kFdStep);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

double loss_at(const Params& p, const Tensor& x, int y) {
  const ModelObjective obj(p);
  return obj.evaluate(x.reshaped(x.shape().prepend(1)), std::vector<int>{y}, false).losses[0];
}

// Finite differences on a random subset of coordinates plus one random
// direction; the full input for small inputs.
double model_pair_error(const Params& p, const Tensor& x, int y, std::size_t coords, Rng& rng) {
  const Tensor g = loss_jacobian(ModelObjective(p), x, y);
  std::vector<std::size_t> idx;
  if (coords >= x.numel()) {
    for (std::size_t i = 0; i < x.numel(); ++i) idx.push_back(i);
  } else {
    for (std::size_t i = 0; i < coords; ++i) idx.push_back(uniform_index(rng, x.numel()));
  }
  Tensor analytic(Shape{idx.size() + 1}), numeric(Shape{idx.size() + 1});
  Tensor probe = x;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const std::size_t i = idx[j];
    probe[i] = x[i] + kFdStep;
    const double up = loss_at(p, probe, y);
    probe[i] = x[i] - kFdStep;
    const double down = loss_at(p, probe, y);
    probe[i] = x[i];
    analytic[j] = g[i];
    numeric[j] = (up - down) / (2 * kFdStep);
  }
  const Tensor v = random_tensor(x.shape(), rng);
  analytic[idx.size()] = dot(g, v);
  numeric[idx.size()] = (loss_at(p, x + kFdStep * v, y) - loss_at(p, x - kFdStep * v, y)) / (2 * kFdStep);
  return relative_error(analytic, numeric);
}

Outcome criterion_autodiff() {
  Rng rng(101);
  double prim = 0.0;
  const Tensor img = random_tensor(Shape{2, 3, 6, 6}, rng);
  prim = std::max(prim, primitive_error({img, random_tensor(Shape{4, 3, 3, 3}, rng), random_tensor(Shape{4}, rng)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.conv2d(v[0], v[1], v[2]); },
                                        rng));
  prim = std::max(prim, primitive_error({img}, [](Tape& t, const std::vector<Var>& v) { return t.maxpool2(v[0]); }, rng));
  prim = std::max(prim, primitive_error({img}, [](Tape& t, const std::vector<Var>& v) { return t.relu(v[0]); }, rng));
  prim = std::max(prim, primitive_error({random_tensor(Shape{3, 5}, rng), random_tensor(Shape{4, 5}, rng),
                                         random_tensor(Shape{4}, rng)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.linear(v[0], v[1], v[2]); },
                                        rng));
  prim = std::max(prim, primitive_error({img}, [](Tape& t, const std::vector<Var>& v) {
                    return t.reshape(v[0], Shape{2, 108});
                  }, rng));
  const Tensor a = random_tensor(Shape{7}, rng), b = random_tensor(Shape{7}, rng);
  prim = std::max(prim, primitive_error({a, b}, [](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); }, rng));
  prim = std::max(prim, primitive_error({a, b}, [](Tape& t, const std::vector<Var>& v) { return t.mul(v[0], v[1]); }, rng));
  prim = std::max(prim, primitive_error({a}, [](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], -1.7); }, rng));
  prim = std::max(prim, primitive_error({a}, [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); }, rng));
  for (Reduction red : {Reduction::Mean, Reduction::Sum}) {
    prim = std::max(prim, primitive_error({random_tensor(Shape{3, 6}, rng, -3, 3)},
                                          [red](Tape& t, const std::vector<Var>& v) {
                                            const int ys[] = {0, 5, 2};
                                            return t.softmax_crossentropy(v[0], ys, red).total;
                                          },
                                          rng));
  }

  double model = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < 60; ++i) {
    const std::size_t k = 1 + i % 4;
    const std::size_t classes = i % 3 == 0 ? 100 : 10;
    const Params p = build_convnet(ModelSpec::convnet(k, classes), 1000 + i);
    const Tensor x = random_tensor(Shape{3, 32, 32}, rng, 0.0, 1.0);
    model = std::max(model, model_pair_error(p, x, static_cast<int>(uniform_index(rng, classes)), 24, rng));
    ++pairs;
  }
  for (std::size_t i = 0; i < 40; ++i) {
    const std::size_t in = 2 + uniform_index(rng, 10), hidden = 2 + uniform_index(rng, 10), out = 2 + uniform_index(rng, 5);
    const Params p = i % 2 ? build_mlp({in, hidden, out}, 2000 + i) : build_mlp({in, hidden, hidden, out}, 2000 + i);
    const Tensor x = random_tensor(Shape{in}, rng, -2, 2);
    model = std::max(model, model_pair_error(p, x, static_cast<int>(uniform_index(rng, out)), in, rng));
    ++pairs;
  }
  const bool pass = pairs >= kMinModelPairs && model < kModelGradTol && prim < kPrimitiveGradTol;
  return {pass, std::to_string(pairs) + " model pairs, max rel err " + fmt(model) + " (< " + fmt(kModelGradTol) +
                    "); primitives " + fmt(prim) + " (< " + fmt(kPrimitiveGradTol) + ")"};
}

// ---- 2: tangent Hessian -----------------------------------------------------------

Outcome criterion_hessian() {
  Rng rng(202);
  double worst = 0.0;
  std::size_t cases = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t d = 1 + uniform_index(rng, 16);
    Tensor a = random_tensor(Shape{d, d}, rng);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) a[i * d + j] = a[j * d + i];
    }
    const TapeObjective obj(Shape{d}, [a, d](Tape& t, Var x, int) {
      const Var ax = t.linear(x, t.leaf(a, false), t.leaf(Tensor::zeros(Shape{d}), false));
      return t.scale(t.sum(t.mul(x, ax)), 0.5);
    });
    const Tensor x = random_tensor(Shape{d}, rng);
    for (std::size_t m : {1u, 4u}) {
      for (double delta : {0.1, 0.01}) {
        TangentDirectionSet dirs;
        dirs.step = delta;
        double ss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const Tensor u = random_tensor(Shape{d}, rng);
          dirs.directions.push_back(u);
          for (std::size_t r = 0; r < d; ++r) {
            double au = 0.0;
            for (std::size_t c = 0; c < d; ++c) au += a[r * d + c] * u[c];
            ss += au * au;
          }
        }
        const double md = static_cast<double>(m);
        const double as_written = delta * std::sqrt(ss) / (md * md * delta * delta);
        const double per_direction = std::sqrt(ss) / md;
        worst = std::max(worst, std::abs(tangent_hessian_norm(obj, x, 0, dirs) - as_written));
        worst = std::max(worst, std::abs(tangent_hessian_norm(obj, x, 0, dirs, HessianNormalization::PerDirection) -
                                         per_direction));
        cases += 2;
      }
    }
  }
  return {worst < kHessianTol, std::to_string(cases) + " cases, max abs err " + fmt(worst) + " (< " +
                                   fmt(kHessianTol) + ")"};
}

// ---- 3: SVD truncation --------------------------------------------------------------

Outcome criterion_svd() {
  Rng rng(303);
  double worst = 0.0;
  std::size_t checks = 0;
  const std::size_t sides[] = {4, 8, 12, 16, 32};
  for (std::size_t n = 0; n < kSvdImages; ++n) {
    const std::size_t w = n % 100 == 0 ? 32 : sides[n % 4];
    const Tensor x = random_tensor(Shape{3, w, w}, rng, 0.0, 1.0);
    const Tensor s = channel_singular_values(x);
    for (std::size_t k = 0; k <= w; ++k) {
      for (std::size_t p = 0; k + p <= w; ++p) {
        double expected = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t i = w - k - p; i < w - p; ++i) expected += s.at(c, i) * s.at(c, i);
        }
        const double got = (svd_augment(x, {k, p}) - x).frobenius_norm();
        worst = std::max(worst, std::abs(got - std::sqrt(expected)));
        ++checks;
      }
    }
  }
  return {worst < kSvdTol, std::to_string(kSvdImages) + " images, " + std::to_string(checks) +
                               " (k,p) pairs, max abs err " + fmt(worst) + " (< " + fmt(kSvdTol) + ")"};
}

// ---- 4: quadrature -------------------------------------------------------------------

Outcome criterion_quadrature() {
  Rng rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t segs = 1 + uniform_index(rng, 10);
    const double c = uniform(rng, -10, 10);
    std::vector<double> lengths(segs);
    for (double& l : lengths) l = uniform(rng, 1e-4, 20);
    worst = std::max(worst, std::abs(path_average(std::vector<double>(segs + 1, c), lengths) - c));
  }
  // Constant losses along real augmentation paths.
  MeasureConfig cfg;
  cfg.tangent_directions = 2;
  for (int trial = 0; trial < 10; ++trial) {
    const double c = uniform(rng, 0, 5);
    const TapeObjective obj(Shape{3, 8, 8}, [c](Tape& t, Var x, int) {
      return t.add(t.scale(t.sum(x), 0.0), t.leaf(Tensor(Shape{}, {c}), false));
    });
    const Tensor x = random_tensor(Shape{3, 8, 8}, rng, 0.0, 1.0);
    const std::size_t paths = 1 + uniform_index(rng, 3), k = 1 + uniform_index(rng, 5);
    const auto ps = generate_paths(x, paths, k);
    for (std::size_t p = 0; p < ps.size(); ++p) {
      worst = std::max(worst, std::abs(path_integral(obj, ScalarField::CrossEntropy, ps[p], 0, 0, p, cfg) - c));
    }
  }
  const double hand = path_average(std::vector<double>{0, 0, 4}, std::vector<double>{1, 3});
  return {worst < kQuadratureTol && hand == 1.5,
          "constant fields max abs err " + fmt(worst) + " (< " + fmt(kQuadratureTol) + "); two-segment example = " +
              fmt(hand)};
}

// ---- shared: records ------------------------------------------------------------------

using Key = std::tuple<std::size_t, std::size_t, std::string, std::size_t, std::string>;

struct Table {
  std::map<Key, double> v;
  std::vector<std::size_t> widths;
  std::map<std::size_t, std::vector<std::size_t>> epochs;  // per width, ascending

  explicit Table(const std::vector<SweepRecord>& rows) {
    std::map<std::size_t, std::set<std::size_t>> e;
    for (const auto& r : rows) {
      v[{r.width, r.epoch, to_string(r.subset), r.neighborhood_k, r.metric}] = r.value;
      e[r.width].insert(r.epoch);
    }
    for (auto& [w, s] : e) {
      widths.push_back(w);
      epochs[w] = {s.begin(), s.end()};
    }
  }
  std::optional<double> get(std::size_t w, std::size_t e, const std::string& s, std::size_t k,
                            const std::string& m) const {
    const auto it = v.find({w, e, s, k, m});
    if (it == v.end()) return std::nullopt;
    return it->second;
  }
  double at(std::size_t w, std::size_t e, const std::string& s, std::size_t k, const std::string& m) const {
    const auto r = get(w, e, s, k, m);
    if (!r) {
      throw std::runtime_error("missing row width=" + std::to_string(w) + " epoch=" + std::to_string(e) + " " + s +
                               " K=" + std::to_string(k) + " " + m);
    }
    return *r;
  }
  std::size_t final_epoch(std::size_t w) const { return epochs.at(w).back(); }
  double final(std::size_t w, const std::string& m, const std::string& s = "all", std::size_t k = 0) const {
    return at(w, final_epoch(w), s, k, m);
  }
};

// Largest |N_all m_all - (N_clean m_clean + N_noisy m_noisy)| over every slice.
double additivity_error(const std::vector<SweepRecord>& rows, double n_all, double n_clean, double n_noisy,
                        std::size_t& slices) {
  const Table t(rows);
  double worst = 0.0;
  slices = 0;
  for (const auto& [key, value] : t.v) {
    const auto& [w, e, s, k, m] = key;
    if (s != "all" || m == "test_error" || m == "test_loss") continue;
    const double c = t.at(w, e, "clean", k, m), n = t.at(w, e, "noisy", k, m);
    worst = std::max(worst, std::abs(n_all * value - (n_clean * c + n_noisy * n)));
    ++slices;
  }
  return worst;
}

SweepConfig reduced_config(const fs::path& out, std::size_t threads) {
  SweepConfig c;
  c.train.epochs = 4;
  c.train.batch_size = 16;
  c.train.base_lr = 0.02;
  c.train.warmup_start_lr = 0.002;
  c.train.warmup_epochs = 2;
  c.widths = {1, 2};
  c.data.num_train = 60;
  c.data.num_test = 30;
  c.num_paths = 2;
  c.max_neighborhood = 3;
  c.tangent_directions = 2;
  c.seed = 606;
  c.threads = threads;
  c.out_dir = out;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct DeskRun {
  fs::path dir;
  std::vector<SweepRecord> rows;
  nlohmann::json config;
  nlohmann::json manifest;
  std::optional<std::string> error;
};

DeskRun load_desk(const fs::path& dir) {
  DeskRun d;
  d.dir = dir;
  try {
    if (!fs::exists(dir / "records.csv")) throw std::runtime_error("no records.csv under " + dir.string());
    d.rows = read_csv(dir / "records.csv");
    d.config = nlohmann::json::parse(slurp(dir / "sweep_config.json"));
    d.manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    const std::size_t expected = d.config.at("widths").size();
    std::set<std::size_t> present;
    for (const auto& r : d.rows) present.insert(r.width);
    if (present.size() != expected) {
      throw std::runtime_error("desk sweep incomplete: " + std::to_string(present.size()) + " of " +
                               std::to_string(expected) + " widths");
    }
  } catch (const std::exception& e) {
    d.error = e.what();
  }
  return d;
}

// ---- 5: subset additivity ----------------------------------------------------------

Outcome criterion_additivity(const std::vector<SweepRecord>& live, const SweepConfig& live_cfg, const DeskRun& desk) {
  const PreparedData data = prepare_data(live_cfg);
  const double n = static_cast<double>(data.train.size()), nn = static_cast<double>(data.train.noisy_count());
  std::size_t live_slices = 0;
  const double live_err = additivity_error(live, n, n - nn, nn, live_slices);
  std::string detail = "reduced sweep " + std::to_string(live_slices) + " slice values, max abs err " + fmt(live_err);
  bool pass = live_err < kAdditivityTol;
  if (desk.error) return {false, detail + "; desk sweep unavailable: " + *desk.error};
  const double dn = desk.manifest.at("num_train").get<double>(), dnn = desk.manifest.at("num_noisy").get<double>();
  std::size_t desk_slices = 0;
  const double desk_err = additivity_error(desk.rows, dn, dn - dnn, dnn, desk_slices);
  pass = pass && desk_err < kAdditivityTol;
  detail += "; desk sweep " + std::to_string(desk_slices) + " slice values, max abs err " + fmt(desk_err) + " (< " +
            fmt(kAdditivityTol) + ")";
  return {pass, detail};
}

// ---- 6: determinism -----------------------------------------------------------------

Outcome criterion_determinism(std::vector<SweepRecord>& live_out, SweepConfig& live_cfg) {
  const fs::path base = fs::temp_directory_path() / "sharplens_acceptance_determinism";
  fs::remove_all(base);
  std::vector<std::string> csvs;
  for (const auto& [name, threads] : std::vector<std::pair<std::string, std::size_t>>{{"a1", 1}, {"b1", 1}, {"c2", 2}, {"d4", 4}}) {
    const SweepConfig c = reduced_config(base / name, threads);
    const SweepResult r = run_epochwise_sweep(c);
    if (name == "a1") {
      live_out = r.records;
      live_cfg = c;
    }
    csvs.push_back(slurp(base / name / "records.csv"));
  }
  fs::remove_all(base);
  bool same = !csvs[0].empty();
  for (const auto& s : csvs) same = same && s == csvs[0];
  return {same, "reduced epoch-wise sweep run 4x (threads 1,1,2,4): " +
                    std::string(same ? "bitwise-identical" : "DIFFERENT") + " records.csv (" +
                    std::to_string(csvs[0].size()) + " bytes)"};
}

Outcome desk_rerun(const DeskRun& desk, std::size_t width, std::size_t threads) {
  if (desk.error) return {false, *desk.error};
  auto j = desk.config;
  j.erase("mode");
  SweepConfig c = config_from_json(j);
  c.widths = {width};
  c.threads = threads;
  c.save_checkpoints = false;
  c.out_dir = fs::temp_directory_path() / "sharplens_desk_rerun";
  fs::remove_all(c.out_dir);
  const SweepMode mode = desk.config.value("mode", "epoch") == "model" ? SweepMode::ModelWise : SweepMode::EpochWise;
  const SweepResult r = run_sweep(c, mode, &std::cerr);
  std::vector<SweepRecord> committed;
  for (const auto& row : desk.rows) {
    if (row.width == width) committed.push_back(row);
  }
  std::ostringstream a, b;
  write_csv_rows(a, r.records);
  write_csv_rows(b, committed);
  fs::remove_all(c.out_dir);
  const bool same = a.str() == b.str() && !committed.empty();
  return {same, "width " + std::to_string(width) + " rerun with " + std::to_string(threads) + " threads: " +
                    std::to_string(r.records.size()) + " rows, " + (same ? "bitwise-identical" : "DIFFERENT") +
                    " to the committed CSV"};
}

// ---- 7-12: desk-scale reproductions --------------------------------------------------

std::size_t threshold_of(const Table& t) {
  for (std::size_t w : t.widths) {
    if (t.final(w, "train_error") == 0.0) return w;
  }
  throw std::runtime_error("no width interpolates");
}

std::string curve(const Table& t, const std::string& metric) {
  std::string s;
  for (std::size_t w : t.widths) s += (s.empty() ? "" : " ") + std::to_string(w) + ":" + fmt(t.final(w, metric));
  return s;
}

Outcome criterion_double_descent(const Table& t) {
  const auto& w = t.widths;
  std::vector<double> test;
  for (std::size_t x : w) test.push_back(t.final(x, "test_error"));
  std::optional<std::tuple<std::size_t, std::size_t, std::size_t>> found;
  for (std::size_t b = 1; b + 1 < w.size() && !found; ++b) {
    double lo_before = 1e300, lo_after = 1e300;
    std::size_t a = 0, c = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (test[i] < lo_before) lo_before = test[i], a = i;
    }
    for (std::size_t i = b + 1; i < w.size(); ++i) {
      if (test[i] < lo_after) lo_after = test[i], c = i;
    }
    if (test[b] >= test[a] + kDoubleDescentMargin && test[c] <= test[b] - kDoubleDescentMargin) found = {a, b, c};
  }
  std::optional<std::size_t> thr;
  try {
    thr = threshold_of(t);
  } catch (const std::exception&) {
  }
  std::string detail = "test error " + curve(t, "test_error");
  if (found) {
    const auto [a, b, c] = *found;
    detail += "; a,b,c = " + std::to_string(w[a]) + "," + std::to_string(w[b]) + "," + std::to_string(w[c]);
  } else {
    detail += "; no a<b<c with margin " + fmt(kDoubleDescentMargin);
  }
  detail += thr ? "; interpolation threshold k=" + std::to_string(*thr) : "; no interpolation threshold";
  return {found.has_value() && thr.has_value(), detail};
}

Outcome criterion_peak_alignment(const Table& t) {
  const auto& w = t.widths;
  std::size_t jpeak = 0, tpeak = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (t.final(w[i], "jacobian_norm") > t.final(w[jpeak], "jacobian_norm")) jpeak = i;
    if (t.final(w[i], "test_error") > t.final(w[tpeak], "test_error")) tpeak = i;
  }
  const std::size_t gap = jpeak > tpeak ? jpeak - tpeak : tpeak - jpeak;
  const double ratio = t.final(w.back(), "jacobian_norm") / t.final(w[jpeak], "jacobian_norm");
  return {gap <= kPeakAlignPositions && ratio < kSharpnessDecayRatio,
          "jacobian norm " + curve(t, "jacobian_norm") + "; peak k=" + std::to_string(w[jpeak]) +
              ", test error peak k=" + std::to_string(w[tpeak]) + " (" + std::to_string(gap) +
              " positions); J(largest)/J(peak) = " + fmt(ratio) + " (< " + fmt(kSharpnessDecayRatio) + ")"};
}

Outcome criterion_neighbourhood_growth(const Table& t) {
  const std::size_t thr = threshold_of(t);
  auto ratio = [&](std::size_t w) {
    return t.final(w, "crossentropy", "all", kVolumeHighK) / t.final(w, "crossentropy", "all", kVolumeLowK);
  };
  const double r_thr = ratio(thr), r_big = ratio(t.widths.back());
  return {r_thr >= kNeighbourhoodGrowth && r_big < r_thr,
          "CE(K=7)/CE(K=1) at threshold k=" + std::to_string(thr) + ": " + fmt(r_thr) + " (>= " +
              fmt(kNeighbourhoodGrowth) + "); at k=" + std::to_string(t.widths.back()) + ": " + fmt(r_big)};
}

Outcome criterion_noisy_sharper(const Table& t) {
  const std::size_t thr = threshold_of(t);
  const std::size_t e = t.final_epoch(thr);
  bool all = true;
  std::string detail = "threshold k=" + std::to_string(thr) + " noisy/clean J:";
  for (std::size_t k = 1;; ++k) {
    const auto n = t.get(thr, e, "noisy", k, "jacobian_norm");
    const auto c = t.get(thr, e, "clean", k, "jacobian_norm");
    if (!n || !c) {
      if (k == 1) return {false, "no volume rows at the threshold width"};
      break;
    }
    all = all && *n > *c;
    detail += " K" + std::to_string(k) + "=" + fmt(*n / *c);
  }
  return {all, detail};
}

Outcome criterion_clean_first(const Table& t) {
  const std::size_t thr = threshold_of(t);
  bool pass = true;
  std::size_t checked = 0;
  std::string detail;
  auto first_fit = [&](std::size_t w, const char* subset) -> std::optional<std::size_t> {
    for (std::size_t e : t.epochs.at(w)) {
      if (t.at(w, e, subset, 0, "crossentropy") < kFitLoss) return e;
    }
    return std::nullopt;
  };
  for (std::size_t w : t.widths) {
    if (w <= thr) continue;
    const auto c = first_fit(w, "clean"), n = first_fit(w, "noisy");
    const bool ok = c && (!n || *c < *n);
    pass = pass && ok;
    ++checked;
    detail += (detail.empty() ? "" : ", ") + std::string("k=") + std::to_string(w) + ": clean@" +
              (c ? std::to_string(*c) : "never") + " noisy@" + (n ? std::to_string(*n) : "never");
  }
  if (checked == 0) return {false, "no width past the threshold k=" + std::to_string(thr)};
  return {pass, "first slice with mean CE < " + fmt(kFitLoss) + ": " + detail};
}

Outcome criterion_sharpness_rise(const Table& t, std::size_t warmup) {
  const std::size_t thr = threshold_of(t);
  std::string detail;
  bool any = false;
  for (std::size_t w : t.widths) {
    if (w >= thr) break;
    const auto& es = t.epochs.at(w);
    const auto first = std::find_if(es.begin(), es.end(), [&](std::size_t e) { return e >= warmup; });
    if (first == es.end() || *first == es.back()) continue;
    const double j0 = t.at(w, *first, "all", 0, "jacobian_norm"), j1 = t.at(w, es.back(), "all", 0, "jacobian_norm");
    any = any || j1 > j0;
    detail += (detail.empty() ? "" : ", ") + std::string("k=") + std::to_string(w) + ": J@" + std::to_string(*first) +
              "=" + fmt(j0) + " -> J@" + std::to_string(es.back()) + "=" + fmt(j1);
  }
  if (detail.empty()) return {false, "no sub-threshold width with post-warmup slices (threshold k=" +
                                         std::to_string(thr) + ")"};
  return {any, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string results = SHARPLENS_DEFAULT_RESULTS;
  std::size_t rerun_width = 0, rerun_threads = 2;
  app.add_option("--results", results, "Directory of the committed desk-scale sweep");
  app.add_option("--desk-rerun", rerun_width, "Re-run one desk width and compare with the committed rows");
  app.add_option("--threads", rerun_threads, "Worker threads for --desk-rerun");
  CLI11_PARSE(app, argc, argv);

  const DeskRun desk = load_desk(results);
  if (rerun_width > 0) return report(6, "desk width rerun", guarded([&] { return desk_rerun(desk, rerun_width, rerun_threads); }));

  int failures = 0;
  failures += report(1, "autodiff vs finite differences", guarded(criterion_autodiff));
  failures += report(2, "tangent-Hessian closed form", guarded(criterion_hessian));
  failures += report(3, "SVD truncation identity", guarded(criterion_svd));
  failures += report(4, "quadrature identities", guarded(criterion_quadrature));
  std::vector<SweepRecord> live;
  SweepConfig live_cfg;
  const Outcome det = guarded([&] { return criterion_determinism(live, live_cfg); });
  failures += report(5, "subset additivity", guarded([&] { return criterion_additivity(live, live_cfg, desk); }));
  failures += report(6, "determinism across runs and threads", det);

  auto desk_check = [&](const std::function<Outcome(const Table&)>& f) {
    return guarded([&]() -> Outcome {
      if (desk.error) return {false, "desk sweep unavailable: " + *desk.error};
      return f(Table(desk.rows));
    });
  };
  const std::size_t warmup = desk.error ? 0 : desk.config.value("warmup_epochs", std::size_t{0});
  failures += report(7, "model-wise double descent", desk_check(criterion_double_descent));
  failures += report(8, "sharpness peak alignment", desk_check(criterion_peak_alignment));
  failures += report(9, "neighbourhood loss growth at threshold", desk_check(criterion_neighbourhood_growth));
  failures += report(10, "noisy sharper than clean at threshold", desk_check(criterion_noisy_sharper));
  failures += report(11, "clean points fitted before noisy", desk_check(criterion_clean_first));
  failures += report(12, "epoch-wise sharpness rise below threshold",
                     desk_check([&](const Table& t) { return criterion_sharpness_rise(t, warmup); }));
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
