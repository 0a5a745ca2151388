#include "sharplens/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "sharplens/config.hpp"
#include "sharplens/parallel.hpp"
#include "sharplens/report.hpp"
#include "sharplens/sweep.hpp"

namespace sharplens {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Advisory lock held for the life of the process; the kernel drops it if the
// process dies.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    fs::create_directories(dir);
    const fs::path p = dir / ".lock";
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("another sharplens process is using " + dir.string());
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
};

SweepConfig effective_config(const GlobalFlags& g) {
  SweepConfig c;
  if (!g.config.empty()) {
    if (!fs::exists(g.config)) throw UsageError("config file not found: " + g.config);
    try {
      c = load_config(g.config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out_dir = g.out;
  if (g.threads) {
    c.threads = resolve_threads(g.threads);
  } else if (std::getenv("SHARPLENS_THREADS")) {
    try {
      c.threads = resolve_threads(std::nullopt);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  return c;
}

void print_thresholds(std::ostream& out, const ThresholdReport& t) {
  auto show = [](const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string("none"); };
  out << "interpolation threshold width: " << show(t.interpolation_threshold_width) << '\n'
      << "test error peak width: " << show(t.test_error_peak_width) << '\n'
      << "jacobian norm peak width: " << show(t.sharpness_peak_width) << '\n';
}

int finish_sweep(std::ostream& out, std::ostream& err, const SweepConfig& c, const SweepResult& r) {
  out << "records: " << (c.out_dir / "records.csv").string() << " (" << r.records.size() << " rows)\n";
  print_thresholds(out, r.thresholds);
  if (!r.failed_widths.empty()) {
    for (const auto& [w, msg] : r.failed_widths) err << "width " << w << " failed: " << msg << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

void write_points(const MeasurementTable& table, const ImageDataset& data, const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "sample,label,original_label,noisy";
  for (ScalarField f : kAllFields) os << ',' << to_string(f);
  os << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << i << ',' << data.labels[i] << ',' << data.original_labels[i] << ',' << int(data.noisy_mask[i]);
    for (ScalarField f : kAllFields) os << ',' << format_double(table.at(i, 0)[f]);
    os << '\n';
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Input-space sharpness measurements and double-descent sweeps", "sharplens"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Root seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_option("--threads", g.threads, "Measurement worker threads")->check(CLI::PositiveNumber);

  auto* train_cmd = app.add_subcommand("train", "Train every grid width and save checkpoints");
  auto* model_cmd = app.add_subcommand("sweep-model", "Model-wise sweep: final-epoch measurements per width");
  auto* epoch_cmd = app.add_subcommand("sweep-epoch", "Epoch-wise sweep: measurements at log-spaced epochs");
  auto* measure_cmd = app.add_subcommand("measure", "Measure one saved checkpoint");
  std::string checkpoint;
  std::size_t epoch_label = 0;
  measure_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  measure_cmd->add_option("--epoch", epoch_label, "Epoch value written to the records");
  std::size_t measure_k = 0;
  measure_cmd->add_option("--neighborhood", measure_k, "Largest K of the volume measures (0: point-wise only)");
  auto* report_cmd = app.add_subcommand("report", "Render SVG figures from a records CSV");
  std::string csv_in;
  report_cmd->add_option("--csv", csv_in, "Records CSV (default: <out>/records.csv)");
  for (auto* s : {train_cmd, model_cmd, epoch_cmd, measure_cmd, report_cmd}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const SweepConfig c = effective_config(g);
    const DirectoryLock lock(c.out_dir);
    if (train_cmd->parsed()) {
      run_training(c, &err);
      out << "checkpoints: " << (c.out_dir / "checkpoints").string() << '\n';
      return kExitOk;
    }
    if (model_cmd->parsed()) return finish_sweep(out, err, c, run_modelwise_sweep(c, &err));
    if (epoch_cmd->parsed()) return finish_sweep(out, err, c, run_epochwise_sweep(c, &err));
    if (measure_cmd->parsed()) {
      if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
      const Params params = load_checkpoint(checkpoint);
      const PreparedData data = prepare_data(c);
      MeasurementTable table(0, 0);
      if (measure_k > c.max_neighborhood) {
        throw UsageError("--neighborhood " + std::to_string(measure_k) + " exceeds max_neighborhood " +
                         std::to_string(c.max_neighborhood));
      }
      const auto rows = measure_slice(params, data, epoch_label, measure_k, c, &table);
      write_csv(rows, c.out_dir / "measure.csv");
      write_points(table, data.train, c.out_dir / "measure_points.csv");
      out << "records: " << (c.out_dir / "measure.csv").string() << '\n'
          << "points: " << (c.out_dir / "measure_points.csv").string() << '\n';
      return kExitOk;
    }
    if (report_cmd->parsed()) {
      const fs::path in = csv_in.empty() ? c.out_dir / "records.csv" : fs::path(csv_in);
      if (!fs::exists(in)) throw UsageError("records CSV not found: " + in.string());
      const auto records = read_csv(in);
      for (const auto& p : emit_report(records, c.out_dir / "figures")) out << p.string() << '\n';
      const auto t = detect_interpolation_threshold(records);
      write_threshold_json(t, c.out_dir / "thresholds.json");
      print_thresholds(out, t);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace sharplens
