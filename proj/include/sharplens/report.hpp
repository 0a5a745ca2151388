#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sharplens/data.hpp"

namespace sharplens {

/// One measurement row.
struct SweepRecord {
  std::size_t width = 0;
  std::size_t epoch = 0;
  Subset subset = Subset::All;
  std::size_t neighborhood_k = 0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const SweepRecord&, const SweepRecord&) = default;
};

inline constexpr std::string_view kCsvHeader = "width,epoch,subset,neighborhood_k,metric,value";

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

void write_csv_rows(std::ostream& os, std::span<const SweepRecord> records);
/// Header plus rows, LF line endings. Throws on an empty table or an
/// unwritable path.
void write_csv(std::span<const SweepRecord> records, const std::filesystem::path& path);

SweepRecord parse_csv_row(std::string_view line);
/// Strict reader; every line must parse.
std::vector<SweepRecord> read_csv(const std::filesystem::path& path);
/// Reader for a file that may end in a torn line; the partial row is dropped.
std::vector<SweepRecord> read_csv_lenient(const std::filesystem::path& path);

// ---- threshold ---------------------------------------------------------------

struct ThresholdReport {
  std::optional<std::size_t> interpolation_threshold_width;
  std::optional<std::size_t> test_error_peak_width;
  std::optional<std::size_t> sharpness_peak_width;
};

/// Uses each width's last epoch: the smallest width with train error 0, and
/// the argmax widths of test error and of the Jacobian norm (K=0, subset all).
/// Ties go to the smaller width. Row order does not matter.
ThresholdReport detect_interpolation_threshold(std::span<const SweepRecord> records);

/// Same rule over parallel arrays of widths and per-width values.
std::optional<std::size_t> first_zero_width(std::span<const std::size_t> widths, std::span<const double> values);
std::optional<std::size_t> argmax_width(std::span<const std::size_t> widths, std::span<const double> values);

void write_threshold_json(const ThresholdReport& report, const std::filesystem::path& path);

// ---- plots -------------------------------------------------------------------

enum class PlotAxis {
  /// x = width at each width's last epoch, one series per neighbourhood K.
  Width,
  /// x = epoch + 1 at a fixed K, one series per width.
  Epoch,
};

struct PlotSpec {
  std::string title;
  /// With several metrics, Width plots draw one series per (metric, K).
  std::vector<std::string> metrics;
  Subset subset = Subset::All;
  PlotAxis x = PlotAxis::Width;
  std::size_t neighborhood_k = 0;  // Epoch plots only
  bool log_y = false;
};

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::vector<Series> select_series(std::span<const SweepRecord> records, const PlotSpec& spec);

/// Line chart with a log-scaled x axis. Returns the number of series drawn.
std::size_t emit_svg(std::span<const SweepRecord> records, const PlotSpec& spec, const std::filesystem::path& path);

/// The standard figure set for whatever metrics the table contains.
std::vector<std::filesystem::path> emit_report(std::span<const SweepRecord> records,
                                               const std::filesystem::path& out_dir);

}  // namespace sharplens
