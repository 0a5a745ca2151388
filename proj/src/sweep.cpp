#include "sharplens/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "sharplens/config.hpp"
#include "sharplens/random.hpp"

namespace sharplens {

namespace fs = std::filesystem;

const char* to_string(DataSource s) {
  switch (s) {
    case DataSource::Synthetic: return "synthetic";
    case DataSource::Cifar10: return "cifar10";
    case DataSource::Cifar100: return "cifar100";
  }
  return "?";
}

DataSource data_source_from_string(const std::string& s) {
  for (DataSource d : {DataSource::Synthetic, DataSource::Cifar10, DataSource::Cifar100}) {
    if (s == to_string(d)) return d;
  }
  throw std::invalid_argument("unknown dataset '" + s + "' (expected synthetic, cifar10 or cifar100)");
}

std::vector<std::size_t> log_spaced_epochs(std::size_t epochs) {
  std::vector<std::size_t> out{0};
  for (std::size_t e = 1; e < epochs; e *= 2) out.push_back(e);
  if (epochs > 0) out.push_back(epochs);
  return out;
}

namespace {
constexpr std::size_t kImageSide = 32;
}  // namespace

void SweepConfig::validate() const {
  train.validate();
  if (widths.empty()) throw std::invalid_argument("width grid is empty");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) throw std::invalid_argument("widths must be positive");
    if (i > 0 && widths[i] <= widths[i - 1]) throw std::invalid_argument("width grid must be strictly increasing");
  }
  for (std::size_t e : measure_epochs) {
    if (e > train.epochs) {
      throw std::invalid_argument("measure epoch " + std::to_string(e) + " exceeds epochs " +
                                  std::to_string(train.epochs));
    }
  }
  if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0)) throw std::invalid_argument("noise_fraction must lie in [0,1]");
  if (num_paths == 0) throw std::invalid_argument("num_paths must be >= 1");
  if (max_neighborhood > 0 && max_neighborhood + num_paths > kImageSide) {
    throw std::invalid_argument("max_neighborhood + num_paths must not exceed the image side " +
                                std::to_string(kImageSide));
  }
  if (tangent_directions == 0) throw std::invalid_argument("tangent_directions must be >= 1");
  if (!(tangent_step > 0.0)) throw std::invalid_argument("tangent_step must be > 0");
  if (data.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (threads == 0) throw std::invalid_argument("threads must be >= 1");
  if (data.source == DataSource::Synthetic && (data.num_train == 0 || data.num_test == 0)) {
    throw std::invalid_argument("synthetic data needs num_train and num_test > 0");
  }
  if (data.source != DataSource::Synthetic && (data.train_files.empty() || data.test_file.empty())) {
    throw std::invalid_argument("CIFAR data needs train_files and test_file");
  }
}

std::vector<std::size_t> SweepConfig::epoch_slices() const {
  std::vector<std::size_t> s = measure_epochs.empty() ? log_spaced_epochs(train.epochs) : measure_epochs;
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

std::uint64_t SweepSeeds::train_data() const { return derive_seed(root, {1}); }
std::uint64_t SweepSeeds::test_data() const { return derive_seed(root, {2}); }
std::uint64_t SweepSeeds::noise() const { return derive_seed(root, {3}); }
std::uint64_t SweepSeeds::measure() const { return derive_seed(root, {4}); }
std::uint64_t SweepSeeds::init(std::size_t width) const { return derive_seed(root, {5, width}); }
std::uint64_t SweepSeeds::batches(std::size_t width) const { return derive_seed(root, {6, width}); }

namespace {

ImageDataset load_split(DataSource source, const fs::path& path) {
  return source == DataSource::Cifar100 ? load_cifar100(path) : load_cifar10(path);
}

ImageDataset head(const ImageDataset& d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return d.select(idx);
}

std::vector<Subset> present_subsets(const ImageDataset& train) {
  std::vector<Subset> s{Subset::All};
  const std::size_t noisy = train.noisy_count();
  if (noisy < train.size()) s.push_back(Subset::Clean);
  if (noisy > 0) s.push_back(Subset::Noisy);
  return s;
}

void say(std::ostream* os, const std::string& msg) {
  if (os) *os << msg << std::endl;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

}  // namespace

PreparedData prepare_data(const SweepConfig& config) {
  const auto& dc = config.data;
  const SweepSeeds seeds{config.seed};
  PreparedData out;
  ImageDataset train;
  if (dc.source == DataSource::Synthetic) {
    train = generate_synthetic(dc.num_train, dc.num_classes, seeds.train_data(), dc.synthetic);
    out.test = generate_synthetic(dc.num_test, dc.num_classes, seeds.test_data(), dc.synthetic);
  } else {
    std::vector<ImageDataset> parts;
    for (const auto& f : dc.train_files) parts.push_back(load_split(dc.source, f));
    train = head(concatenate(parts), dc.num_train);
    out.test = head(load_split(dc.source, dc.test_file), dc.num_test);
    if (train.num_classes != dc.num_classes) {
      throw std::invalid_argument("num_classes " + std::to_string(dc.num_classes) + " does not match the " +
                                  to_string(dc.source) + " reader (" + std::to_string(train.num_classes) + ")");
    }
  }
  out.train = inject_label_noise(train, {config.noise_fraction, seeds.noise()});

  auto& m = out.manifest;
  m.source = to_string(dc.source);
  for (const auto& f : dc.train_files) m.train_paths.push_back(f.string());
  m.test_path = dc.test_file.string();
  m.noise_fraction = config.noise_fraction;
  m.noise_seed = seeds.noise();
  m.seed = config.seed;
  m.num_train = out.train.size();
  m.num_test = out.test.size();
  m.num_classes = out.train.num_classes;
  m.num_noisy = out.train.noisy_count();
  return out;
}

std::size_t slice_row_count(const ImageDataset& train, std::size_t neighborhood) {
  return present_subsets(train).size() * ((neighborhood + 1) * kNumFields + 1) + 2;
}

std::vector<SweepRecord> measure_slice(const Params& params, const PreparedData& data, std::size_t epoch,
                                       std::size_t neighborhood, const SweepConfig& config,
                                       MeasurementTable* table_out) {
  const ModelObjective objective(params);
  MeasureConfig mc;
  mc.num_paths = config.num_paths;
  mc.max_neighborhood = neighborhood;
  mc.tangent_directions = config.tangent_directions;
  mc.tangent_step = config.tangent_step;
  mc.normalization = config.normalization;
  mc.seed = SweepSeeds{config.seed}.measure();
  mc.threads = config.threads;
  const MeasurementTable table = measure_dataset(objective, data.train, mc);

  const std::size_t width = params.spec.base_width;
  std::vector<SweepRecord> rows;
  for (Subset s : present_subsets(data.train)) {
    const auto idx = subset_indices(data.train, s);
    for (std::size_t k = 0; k <= neighborhood; ++k) {
      const PointValues mean = table.mean(idx, k);
      for (ScalarField f : kAllFields) rows.push_back({width, epoch, s, k, to_string(f), mean[f]});
    }
    std::size_t wrong = 0;
    for (std::size_t i : idx) wrong += table.at(i, 0)[ScalarField::Accuracy01] == 0.0;
    rows.push_back({width, epoch, s, 0, "train_error", static_cast<double>(wrong) / static_cast<double>(idx.size())});
  }
  const auto test_idx = subset_indices(data.test, Subset::All);
  const auto test = evaluate_classification(objective, data.test, test_idx, config.threads);
  rows.push_back({width, epoch, Subset::All, 0, "test_error", test.error});
  rows.push_back({width, epoch, Subset::All, 0, "test_loss", test.mean_loss});
  if (table_out) *table_out = table;
  return rows;
}

void write_train_log(const std::vector<EpochStats>& log, const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,lr,loss,error,clean_loss,clean_error,noisy_loss,noisy_error\n";
  auto opt = [](std::size_t n, double v) { return n ? format_double(v) : std::string(); };
  for (const auto& s : log) {
    os << s.epoch << ',' << format_double(s.lr) << ',' << format_double(s.loss) << ',' << format_double(s.error) << ','
       << opt(s.clean_count, s.clean_loss) << ',' << opt(s.clean_count, s.clean_error) << ','
       << opt(s.noisy_count, s.noisy_loss) << ',' << opt(s.noisy_count, s.noisy_error) << '\n';
  }
}

namespace {

struct WidthPlan {
  std::vector<std::size_t> slices;
  std::size_t volume_slice;  // the slice measured with K = max_neighborhood
  bool volume;

  std::size_t neighborhood(std::size_t epoch, const SweepConfig& c) const {
    return volume && epoch == volume_slice ? c.max_neighborhood : 0;
  }
};

WidthPlan plan_for(const SweepConfig& c, SweepMode mode) {
  WidthPlan p;
  if (mode == SweepMode::ModelWise) {
    p.slices = {c.train.epochs};
    p.volume = true;
  } else {
    p.slices = c.epoch_slices();
    p.volume = c.volume_at_final;
  }
  p.volume_slice = p.slices.back();
  return p;
}

std::size_t expected_rows(const WidthPlan& plan, const ImageDataset& train, const SweepConfig& c) {
  std::size_t n = 0;
  for (std::size_t e : plan.slices) n += slice_row_count(train, plan.neighborhood(e, c));
  return n;
}

void write_records_atomic(const std::vector<SweepRecord>& rows, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
  if (!os) throw CsvError("cannot open " + tmp.string() + " for writing");
  os << kCsvHeader << '\n';
  write_csv_rows(os, rows);
  os.close();
  if (!os) throw CsvError("write to " + tmp.string() + " failed");
  fs::rename(tmp, path);
}

// Rejects resuming into a directory that holds a sweep of another config.
void check_or_write_config(const SweepConfig& config, SweepMode mode, const fs::path& path) {
  auto j = config_to_json(config);
  j["mode"] = mode == SweepMode::ModelWise ? "model" : "epoch";
  const std::string text = j.dump(2) + "\n";
  if (fs::exists(path)) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream old;
    old << is.rdbuf();
    if (old.str() != text) {
      throw ConfigError("output directory " + path.parent_path().string() +
                        " holds a sweep with a different configuration; choose another --out");
    }
    return;
  }
  std::ofstream(path, std::ios::binary) << text;
}

}  // namespace

SweepResult run_sweep(const SweepConfig& config, SweepMode mode, std::ostream* progress) {
  config.validate();
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  check_or_write_config(config, mode, out / "sweep_config.json");

  const PreparedData data = prepare_data(config);
  write_manifest(data.manifest, out / "manifest.json");
  const SweepSeeds seeds{config.seed};
  const WidthPlan plan = plan_for(config, mode);
  const std::size_t per_width = expected_rows(plan, data.train, config);
  say(progress, "data: " + std::to_string(data.train.size()) + " train (" + std::to_string(data.train.noisy_count()) +
                    " noisy), " + std::to_string(data.test.size()) + " test");

  // Rows of widths completed by an earlier run.
  const fs::path csv = out / "records.csv";
  std::map<std::size_t, std::vector<SweepRecord>> done;
  if (fs::exists(csv)) {
    std::map<std::size_t, std::vector<SweepRecord>> found;
    for (auto& r : read_csv_lenient(csv)) found[r.width].push_back(std::move(r));
    for (auto& [w, rows] : found) {
      if (rows.size() == per_width && std::find(config.widths.begin(), config.widths.end(), w) != config.widths.end()) {
        done[w] = std::move(rows);
      }
    }
  }

  SweepResult result;
  auto flush = [&] {
    std::vector<SweepRecord> all;
    for (std::size_t w : config.widths) {
      if (auto it = done.find(w); it != done.end()) all.insert(all.end(), it->second.begin(), it->second.end());
    }
    if (!all.empty()) write_records_atomic(all, csv);
    return all;
  };
  flush();

  for (std::size_t w : config.widths) {
    if (done.count(w)) {
      result.resumed_widths.push_back(w);
      say(progress, "k=" + std::to_string(w) + ": complete in " + csv.string() + ", skipping");
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
      return fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + "s";
    };
    try {
      say(progress, "k=" + std::to_string(w) + ": training " + std::to_string(config.train.epochs) + " epochs");
      Params params = build_convnet(ModelSpec::convnet(w, data.train.num_classes, data.train.image_shape), seeds.init(w));
      TrainConfig tc = config.train;
      tc.seed = seeds.batches(w);
      std::vector<SweepRecord> rows;
      TrainCallbacks cb;
      cb.measure_epochs = plan.slices;
      cb.diagnostics_dir = out / "diagnostics" / ("k" + std::to_string(w));
      cb.on_measure = [&](std::size_t epoch, const Params& p) {
        const std::size_t k = plan.neighborhood(epoch, config);
        auto r = measure_slice(p, data, epoch, k, config);
        say(progress, "k=" + std::to_string(w) + " epoch " + std::to_string(epoch) + ": measured K<=" +
                          std::to_string(k) + " (" + elapsed() + ")");
        rows.insert(rows.end(), r.begin(), r.end());
      };
      const std::size_t every = std::max<std::size_t>(1, config.train.epochs / 20);
      cb.on_epoch = [&](const EpochStats& s) {
        if (s.epoch % every == 0 || s.epoch == config.train.epochs) {
          say(progress, "k=" + std::to_string(w) + " epoch " + std::to_string(s.epoch) + " lr " + fmt(s.lr) + " loss " +
                            fmt(s.loss) + " err " + fmt(s.error) + " clean " + fmt(s.clean_error) + " noisy " +
                            fmt(s.noisy_error) + " (" + elapsed() + ")");
        }
      };
      TrainResult tr = train(std::move(params), data.train, tc, cb);
      if (config.save_checkpoints) {
        fs::create_directories(out / "checkpoints");
        save_checkpoint(tr.params, out / "checkpoints" / ("k" + std::to_string(w) + ".slns"));
      }
      fs::create_directories(out / "train_log");
      write_train_log(tr.log, out / "train_log" / ("k" + std::to_string(w) + ".csv"));
      done[w] = std::move(rows);
      flush();
      result.completed_widths.push_back(w);
      say(progress, "k=" + std::to_string(w) + ": done (" + elapsed() + ")");
    } catch (const std::exception& e) {
      result.failed_widths.emplace_back(w, e.what());
      std::ofstream(out / "failures.log", std::ios::app) << "k=" << w << ": " << e.what() << '\n';
      say(progress, "k=" + std::to_string(w) + ": FAILED: " + e.what());
    }
  }

  result.records = flush();
  result.thresholds = detect_interpolation_threshold(result.records);
  write_threshold_json(result.thresholds, out / "thresholds.json");
  return result;
}

SweepResult run_modelwise_sweep(const SweepConfig& config, std::ostream* progress) {
  return run_sweep(config, SweepMode::ModelWise, progress);
}

SweepResult run_epochwise_sweep(const SweepConfig& config, std::ostream* progress) {
  return run_sweep(config, SweepMode::EpochWise, progress);
}

void run_training(const SweepConfig& config, std::ostream* progress) {
  config.validate();
  const fs::path out = config.out_dir;
  fs::create_directories(out / "checkpoints");
  fs::create_directories(out / "train_log");
  const PreparedData data = prepare_data(config);
  write_manifest(data.manifest, out / "manifest.json");
  const SweepSeeds seeds{config.seed};
  for (std::size_t w : config.widths) {
    Params params = build_convnet(ModelSpec::convnet(w, data.train.num_classes, data.train.image_shape), seeds.init(w));
    TrainConfig tc = config.train;
    tc.seed = seeds.batches(w);
    TrainCallbacks cb;
    cb.diagnostics_dir = out / "diagnostics" / ("k" + std::to_string(w));
    cb.on_epoch = [&](const EpochStats& s) {
      say(progress, "k=" + std::to_string(w) + " epoch " + std::to_string(s.epoch) + " loss " + fmt(s.loss) + " err " +
                        fmt(s.error));
    };
    TrainResult tr = train(std::move(params), data.train, tc, cb);
    save_checkpoint(tr.params, out / "checkpoints" / ("k" + std::to_string(w) + ".slns"));
    write_train_log(tr.log, out / "train_log" / ("k" + std::to_string(w) + ".csv"));
  }
}

}  // namespace sharplens
