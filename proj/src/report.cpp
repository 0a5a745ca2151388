#include "sharplens/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <json.hpp>
#include <set>
#include <sstream>

namespace sharplens {

std::string format_double(double v) {
  if (!std::isfinite(v)) throw CsvError("cannot write non-finite value " + std::to_string(v));
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_csv_rows(std::ostream& os, std::span<const SweepRecord> records) {
  for (const auto& r : records) {
    os << r.width << ',' << r.epoch << ',' << to_string(r.subset) << ',' << r.neighborhood_k << ',' << r.metric << ','
       << format_double(r.value) << '\n';
  }
}

void write_csv(std::span<const SweepRecord> records, const std::filesystem::path& path) {
  if (records.empty()) throw CsvError("refusing to write an empty table to " + path.string());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CsvError("cannot open " + path.string() + " for writing");
  os << kCsvHeader << '\n';
  write_csv_rows(os, records);
  os.flush();
  if (!os) throw CsvError("write to " + path.string() + " failed");
}

namespace {

template <class T>
T parse_number(std::string_view s, std::string_view line) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw CsvError("bad number '" + std::string(s) + "' in row '" + std::string(line) + "'");
  }
  return v;
}

std::vector<SweepRecord> read_rows(const std::filesystem::path& path, bool lenient) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CsvError("cannot open " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string text = buf.str();
  std::vector<SweepRecord> out;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      if (lenient) break;
      throw CsvError(path.string() + ": last line lacks a newline");
    }
    const std::string_view line(text.data() + pos, nl - pos);
    pos = nl + 1;
    if (header) {
      if (line != kCsvHeader) throw CsvError(path.string() + ": unexpected header '" + std::string(line) + "'");
      header = false;
      continue;
    }
    out.push_back(parse_csv_row(line));
  }
  if (header && !lenient) throw CsvError(path.string() + ": missing header");
  return out;
}

}  // namespace

SweepRecord parse_csv_row(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      f.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  if (f.size() != 6) throw CsvError("expected 6 fields in row '" + std::string(line) + "'");
  SweepRecord r;
  r.width = parse_number<std::size_t>(f[0], line);
  r.epoch = parse_number<std::size_t>(f[1], line);
  try {
    r.subset = subset_from_string(std::string(f[2]));
  } catch (const std::invalid_argument& e) {
    throw CsvError(e.what());
  }
  r.neighborhood_k = parse_number<std::size_t>(f[3], line);
  if (f[4].empty()) throw CsvError("empty metric in row '" + std::string(line) + "'");
  r.metric = std::string(f[4]);
  r.value = parse_number<double>(f[5], line);
  return r;
}

std::vector<SweepRecord> read_csv(const std::filesystem::path& path) { return read_rows(path, false); }

std::vector<SweepRecord> read_csv_lenient(const std::filesystem::path& path) { return read_rows(path, true); }

// ---- threshold ---------------------------------------------------------------

std::optional<std::size_t> first_zero_width(std::span<const std::size_t> widths, std::span<const double> values) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (values[i] == 0.0 && (!best || widths[i] < *best)) best = widths[i];
  }
  return best;
}

std::optional<std::size_t> argmax_width(std::span<const std::size_t> widths, std::span<const double> values) {
  std::optional<std::size_t> best;
  double best_v = 0.0;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (!best || values[i] > best_v || (values[i] == best_v && widths[i] < *best)) {
      best = widths[i];
      best_v = values[i];
    }
  }
  return best;
}

namespace {

// metric value per width at that width's last epoch, K=0, subset all.
std::map<std::size_t, double> final_values(std::span<const SweepRecord> records, std::string_view metric) {
  std::map<std::size_t, std::pair<std::size_t, double>> best;
  for (const auto& r : records) {
    if (r.metric != metric || r.subset != Subset::All || r.neighborhood_k != 0) continue;
    auto it = best.find(r.width);
    if (it == best.end() || r.epoch > it->second.first) best[r.width] = {r.epoch, r.value};
  }
  std::map<std::size_t, double> out;
  for (const auto& [w, ev] : best) out[w] = ev.second;
  return out;
}

std::optional<std::size_t> reduce(const std::map<std::size_t, double>& m, bool zero) {
  std::vector<std::size_t> w;
  std::vector<double> v;
  for (const auto& [k, x] : m) {
    w.push_back(k);
    v.push_back(x);
  }
  return zero ? first_zero_width(w, v) : argmax_width(w, v);
}

}  // namespace

ThresholdReport detect_interpolation_threshold(std::span<const SweepRecord> records) {
  ThresholdReport t;
  t.interpolation_threshold_width = reduce(final_values(records, "train_error"), true);
  t.test_error_peak_width = reduce(final_values(records, "test_error"), false);
  t.sharpness_peak_width = reduce(final_values(records, "jacobian_norm"), false);
  return t;
}

void write_threshold_json(const ThresholdReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  auto put = [&](const char* key, const std::optional<std::size_t>& v) {
    j[key] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  put("interpolation_threshold_width", report.interpolation_threshold_width);
  put("test_error_peak_width", report.test_error_peak_width);
  put("sharpness_peak_width", report.sharpness_peak_width);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// ---- plots -------------------------------------------------------------------

std::vector<Series> select_series(std::span<const SweepRecord> records, const PlotSpec& spec) {
  std::vector<Series> out;
  const bool multi = spec.metrics.size() > 1;
  for (const auto& metric : spec.metrics) {
    if (spec.x == PlotAxis::Width) {
      std::map<std::size_t, std::size_t> last_epoch;
      for (const auto& r : records) {
        if (r.metric == metric && r.subset == spec.subset) {
          auto& e = last_epoch[r.width];
          e = std::max(e, r.epoch);
        }
      }
      std::map<std::size_t, std::map<std::size_t, double>> by_k;  // K -> width -> value
      for (const auto& r : records) {
        if (r.metric == metric && r.subset == spec.subset && r.epoch == last_epoch[r.width]) {
          by_k[r.neighborhood_k][r.width] = r.value;
        }
      }
      for (const auto& [k, pts] : by_k) {
        Series s;
        s.label = (multi ? metric + " " : std::string()) + "K=" + std::to_string(k);
        for (const auto& [w, v] : pts) {
          s.x.push_back(static_cast<double>(w));
          s.y.push_back(v);
        }
        out.push_back(std::move(s));
      }
    } else {
      std::map<std::size_t, std::map<std::size_t, double>> by_w;  // width -> epoch -> value
      for (const auto& r : records) {
        if (r.metric == metric && r.subset == spec.subset && r.neighborhood_k == spec.neighborhood_k) {
          by_w[r.width][r.epoch] = r.value;
        }
      }
      for (const auto& [w, pts] : by_w) {
        Series s;
        s.label = (multi ? metric + " " : std::string()) + "k=" + std::to_string(w);
        for (const auto& [e, v] : pts) {
          s.x.push_back(static_cast<double>(e + 1));
          s.y.push_back(v);
        }
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};

struct Axis {
  double lo, hi;
  bool log;
  double px0, px1;

  double map(double v) const {
    const double a = log ? std::log10(v) : v;
    const double l = log ? std::log10(lo) : lo;
    const double h = log ? std::log10(hi) : hi;
    const double t = h > l ? (a - l) / (h - l) : 0.5;
    return px0 + t * (px1 - px0);
  }
};

std::vector<double> linear_ticks(double lo, double hi) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + step * 1e-9; v += step) t.push_back(std::abs(v) < step * 1e-9 ? 0.0 : v);
  return t;
}

std::vector<double> log_ticks(double lo, double hi, std::span<const double> data_x) {
  std::set<double> xs(data_x.begin(), data_x.end());
  if (xs.size() <= 16) return {xs.begin(), xs.end()};
  std::vector<double> t;
  for (double d = std::pow(10.0, std::floor(std::log10(lo))); d <= hi; d *= 10.0) {
    for (double m : {1.0, 2.0, 5.0}) {
      if (d * m >= lo && d * m <= hi) t.push_back(d * m);
    }
  }
  return t;
}

}  // namespace

std::size_t emit_svg(std::span<const SweepRecord> records, const PlotSpec& spec, const std::filesystem::path& path) {
  const auto series = select_series(records, spec);
  if (series.empty()) throw std::invalid_argument("plot '" + spec.title + "' has no data");

  std::vector<double> all_x;
  double ylo = INFINITY, yhi = -INFINITY;
  for (const auto& s : series) {
    all_x.insert(all_x.end(), s.x.begin(), s.x.end());
    for (double y : s.y) {
      if (spec.log_y && !(y > 0.0)) continue;
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  }
  const double xlo = *std::min_element(all_x.begin(), all_x.end());
  const double xhi = *std::max_element(all_x.begin(), all_x.end());
  if (!std::isfinite(ylo)) ylo = yhi = 1.0;
  if (!spec.log_y) {
    const double pad = yhi > ylo ? 0.05 * (yhi - ylo) : std::max(1e-3, std::abs(yhi) * 0.1);
    ylo -= pad;
    yhi += pad;
  }

  const double W = 720, H = 440, left = 70, right = 170, top = 40, bottom = 60;
  const Axis ax{xlo, xhi, true, left, W - right};
  const Axis ay{ylo, yhi, spec.log_y, H - bottom, top};

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(spec.title)
     << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << (W - right - left) << "\" height=\""
     << (H - bottom - top) << "\" fill=\"none\" stroke=\"#333\"/>\n";

  for (double t : log_ticks(xlo, xhi, all_x)) {
    const double px = ax.map(t);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << (H - bottom) << "\" x2=\"" << num(px) << "\" y2=\"" << top
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << num(px) << "\" y=\"" << (H - bottom + 16) << "\" text-anchor=\"middle\">" << tick_label(t)
       << "</text>\n";
  }
  std::vector<double> yt;
  if (spec.log_y) {
    for (double d = std::pow(10.0, std::floor(std::log10(ylo))); d <= yhi * 1.0000001; d *= 10.0) {
      if (d >= ylo) yt.push_back(d);
    }
  } else {
    yt = linear_ticks(ylo, yhi);
  }
  for (double t : yt) {
    const double py = ay.map(t);
    os << "<line x1=\"" << left << "\" y1=\"" << num(py) << "\" x2=\"" << (W - right) << "\" y2=\"" << num(py)
       << "\" stroke=\"#eee\"/>\n";
    os << "<text x=\"" << (left - 6) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << tick_label(t)
       << "</text>\n";
  }
  const char* xlabel = spec.x == PlotAxis::Width ? "base width k" : "epoch + 1";
  os << "<text x=\"" << num((left + W - right) / 2) << "\" y=\"" << (H - 18) << "\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  std::string ylabel = spec.metrics.size() == 1 ? spec.metrics[0] : std::string("value");
  ylabel += std::string(" (") + to_string(spec.subset) + ")";
  os << "<text transform=\"translate(18," << num((top + H - bottom) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(ylabel) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    bool first = true;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (spec.log_y && !(s.y[j] > 0.0)) continue;
      if (!first) os << ' ';
      os << num(ax.map(s.x[j])) << ',' << num(ay.map(s.y[j]));
      first = false;
    }
    os << "\"/>\n";
    const double ly = top + 14.0 + 16.0 * static_cast<double>(i);
    os << "<line x1=\"" << (W - right + 12) << "\" y1=\"" << num(ly - 4) << "\" x2=\"" << (W - right + 32) << "\" y2=\""
       << num(ly - 4) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << (W - right + 38) << "\" y=\"" << num(ly) << "\">" << xml_escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << os.str();
  if (!f) throw std::runtime_error("write to " + path.string() + " failed");
  return series.size();
}

std::vector<std::filesystem::path> emit_report(std::span<const SweepRecord> records,
                                               const std::filesystem::path& out_dir) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::filesystem::create_directories(out_dir);
  std::set<std::string> metrics;
  std::set<Subset> subsets;
  std::map<std::size_t, std::set<std::size_t>> epochs;
  for (const auto& r : records) {
    metrics.insert(r.metric);
    subsets.insert(r.subset);
    epochs[r.width].insert(r.epoch);
  }
  const bool epochwise = std::any_of(epochs.begin(), epochs.end(), [](const auto& e) { return e.second.size() > 1; });

  std::vector<std::filesystem::path> written;
  auto plot = [&](PlotSpec spec, const std::string& file) {
    if (select_series(records, spec).empty()) return;
    const auto p = out_dir / file;
    emit_svg(records, spec, p);
    written.push_back(p);
  };
  std::vector<std::string> errs;
  for (const char* m : {"train_error", "test_error"}) {
    if (metrics.count(m)) errs.push_back(m);
  }
  if (!errs.empty()) plot({"Train and test error (0/1)", errs, Subset::All, PlotAxis::Width, 0, false}, "width_errors.svg");

  for (const char* m : {"jacobian_norm", "hessian_norm", "crossentropy", "accuracy01"}) {
    if (!metrics.count(m)) continue;
    for (Subset s : subsets) {
      const bool logy = std::string_view(m) != "accuracy01";
      plot({std::string(m) + " vs width (" + to_string(s) + ")", {m}, s, PlotAxis::Width, 0, logy},
           std::string("width_") + m + "_" + to_string(s) + ".svg");
      if (epochwise) {
        plot({std::string(m) + " vs epoch (" + to_string(s) + ", K=0)", {m}, s, PlotAxis::Epoch, 0, logy},
             std::string("epoch_") + m + "_" + to_string(s) + ".svg");
      }
    }
  }
  if (epochwise && metrics.count("test_error")) {
    plot({"test error vs epoch", {"test_error"}, Subset::All, PlotAxis::Epoch, 0, false}, "epoch_test_error.svg");
  }
  return written;
}

}  // namespace sharplens
