#pragma once

// Aggregation of finished runs: reload metric logs, merge them, compute the
// stability table, and render SVG line charts. The merged CSV is the
// canonical artifact; charts are a convenience rendering of the same data.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradflow/experiments.hpp"
#include "gradflow/metrics.hpp"

namespace gradflow {

struct LoadedMetrics {
  std::vector<EvalRow> rows;
  bool has_kl = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline LoadedMetrics read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": empty metrics file");
  const std::vector<std::string> header = detail::split_csv_line(line);
  LoadedMetrics out;
  out.has_kl = std::find(header.begin(), header.end(), "kl_to_base") !=
               header.end();
  const std::size_t expected = out.has_kl ? 8 : 7;
  if (header.size() != expected || header[0] != "epoch" || header[1] != "fd")
    throw std::runtime_error(path + ": unexpected metrics header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != expected)
      throw std::runtime_error(path + ": ragged metrics row");
    EvalRow row;
    std::size_t c = 0;
    row.epoch = std::strtol(cells[c++].c_str(), nullptr, 10);
    row.fd = std::strtod(cells[c++].c_str(), nullptr);
    row.path_len_mean = std::strtod(cells[c++].c_str(), nullptr);
    row.path_len_std = std::strtod(cells[c++].c_str(), nullptr);
    row.beta = std::strtod(cells[c++].c_str(), nullptr);
    row.loss = std::strtod(cells[c++].c_str(), nullptr);
    if (out.has_kl) row.kl_to_base = std::strtod(cells[c++].c_str(), nullptr);
    row.wall_ms = std::strtol(cells[c++].c_str(), nullptr, 10);
    out.rows.push_back(row);
  }
  return out;
}

struct LoadedRun {
  std::string label;
  std::string dir;
  LoadedMetrics metrics;
};

inline LoadedRun load_run(const std::string& run_dir) {
  LoadedRun run;
  run.dir = run_dir;
  run.label = detail::dir_basename(run_dir);
  run.metrics = read_metrics_csv(run_dir + "/metrics.csv");
  return run;
}

// Fixed schema: run,epoch,fd,path_len_mean,path_len_std,beta,loss,wall_ms.
inline void write_merged_csv(const std::string& path,
                             const std::vector<LoadedRun>& runs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "run,epoch,fd,path_len_mean,path_len_std,beta,loss,wall_ms\n";
  for (const LoadedRun& run : runs)
    for (const EvalRow& r : run.metrics.rows)
      out << run.label << ',' << r.epoch << ',' << detail::format_g17(r.fd)
          << ',' << detail::format_g17(r.path_len_mean) << ','
          << detail::format_g17(r.path_len_std) << ','
          << detail::format_g17(r.beta) << ',' << detail::format_g17(r.loss)
          << ',' << r.wall_ms << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

struct StabilityRow {
  std::string label;
  double instantaneous_variance = std::numeric_limits<double>::quiet_NaN();
  double convergence_rate = std::numeric_limits<double>::quiet_NaN();
  double spearman_rho = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
};

// Stability statistics of each run's FD-versus-epoch curve. The window
// shrinks to the series length when runs are short; runs with fewer than
// three evaluations get a NaN row.
inline std::vector<StabilityRow> stability_table(
    const std::vector<LoadedRun>& runs, int window = 10) {
  std::vector<StabilityRow> out;
  for (const LoadedRun& run : runs) {
    StabilityRow row;
    row.label = run.label;
    const std::size_t n = run.metrics.rows.size();
    if (n >= 3) {
      MetricsSeries series;
      for (const EvalRow& r : run.metrics.rows) {
        series.epochs.push_back(r.epoch);
        series.values.push_back(r.fd);
      }
      const int w = std::min<int>(window, static_cast<int>(n));
      row.instantaneous_variance = instantaneous_variance(series, w);
      row.convergence_rate = convergence_rate(series, w);
      row.spearman_rho = spearman_rho(series);
      row.ok = true;
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_stability_csv(const std::string& path,
                                const std::vector<StabilityRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "run,instantaneous_variance,convergence_rate,spearman_rho\n";
  for (const StabilityRow& r : rows)
    out << r.label << ',' << detail::format_g17(r.instantaneous_variance)
        << ',' << detail::format_g17(r.convergence_rate) << ','
        << detail::format_g17(r.spearman_rho) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// SVG line charts
// ---------------------------------------------------------------------------

struct ChartSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  // Optional shaded band around the line (same length as x when present).
  std::vector<double> band_lo;
  std::vector<double> band_hi;
};

namespace detail {

inline const char* chart_color(std::size_t i) {
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#8c564b",
                                   "#17becf", "#7f7f7f"};
  return kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
}

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

inline void write_line_chart_svg(const std::string& path,
                                 const std::string& title,
                                 const std::string& x_label,
                                 const std::string& y_label,
                                 const std::vector<ChartSeries>& series) {
  if (series.empty())
    throw std::invalid_argument("chart: no series");
  constexpr double kW = 640, kH = 420;
  constexpr double kLeft = 70, kRight = 150, kTop = 46, kBottom = 52;
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;

  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  for (const ChartSeries& s : series) {
    if (s.x.size() != s.y.size())
      throw std::invalid_argument("chart: x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x_min = std::min(x_min, s.x[i]);
      x_max = std::max(x_max, s.x[i]);
      y_min = std::min(y_min, s.y[i]);
      y_max = std::max(y_max, s.y[i]);
      if (!s.band_lo.empty()) {
        y_min = std::min(y_min, s.band_lo[i]);
        y_max = std::max(y_max, s.band_hi[i]);
      }
    }
  }
  if (!std::isfinite(x_min) || !std::isfinite(y_min))
    throw std::invalid_argument("chart: empty series");
  if (x_max == x_min) { x_max += 1.0; x_min -= 1.0; }
  if (y_max == y_min) { y_max += 1.0; y_min -= 1.0; }
  const double y_pad = 0.05 * (y_max - y_min);
  y_min -= y_pad;
  y_max += y_pad;

  const auto sx = [&](double v) {
    return kLeft + plot_w * (v - x_min) / (x_max - x_min);
  };
  const auto sy = [&](double v) {
    return kTop + plot_h * (1.0 - (v - y_min) / (y_max - y_min));
  };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
      << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW << ' ' << kH
      << "\">\n";
  out << "<rect width=\"" << kW << "\" height=\"" << kH
      << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">" << title
      << "</text>\n";

  // Axes and ticks.
  out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\""
      << kLeft + plot_w << "\" y2=\"" << kTop + plot_h
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft
      << "\" y2=\"" << kTop + plot_h << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x_min + (x_max - x_min) * i / 4.0;
    const double fy = y_min + (y_max - y_min) * i / 4.0;
    out << "<line x1=\"" << sx(fx) << "\" y1=\"" << kTop + plot_h
        << "\" x2=\"" << sx(fx) << "\" y2=\"" << kTop + plot_h + 5
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << sx(fx) << "\" y=\"" << kTop + plot_h + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << detail::svg_num(fx) << "</text>\n";
    out << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << sy(fy) << "\" x2=\""
        << kLeft << "\" y2=\"" << sy(fy) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << kLeft - 8 << "\" y=\"" << sy(fy) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
        << "font-size=\"11\">" << detail::svg_num(fy) << "</text>\n";
  }
  out << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"12\">" << x_label << "</text>\n";
  out << "<text x=\"18\" y=\"" << kTop + plot_h / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"12\" transform=\"rotate(-90 18 " << kTop + plot_h / 2
      << ")\">" << y_label << "</text>\n";

  // Bands first so lines draw on top of them.
  for (std::size_t si = 0; si < series.size(); ++si) {
    const ChartSeries& s = series[si];
    if (s.band_lo.empty()) continue;
    out << "<polygon fill=\"" << detail::chart_color(si)
        << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out << detail::svg_num(sx(s.x[i])) << ','
          << detail::svg_num(sy(s.band_hi[i])) << ' ';
    for (std::size_t i = s.x.size(); i-- > 0;)
      out << detail::svg_num(sx(s.x[i])) << ','
          << detail::svg_num(sy(s.band_lo[i])) << ' ';
    out << "\"/>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const ChartSeries& s = series[si];
    out << "<polyline fill=\"none\" stroke=\"" << detail::chart_color(si)
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out << detail::svg_num(sx(s.x[i])) << ',' << detail::svg_num(sy(s.y[i]))
          << ' ';
    out << "\"/>\n";
    const double ly = kTop + 14 + 16 * static_cast<double>(si);
    out << "<line x1=\"" << kLeft + plot_w + 10 << "\" y1=\"" << ly
        << "\" x2=\"" << kLeft + plot_w + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << detail::chart_color(si)
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << kLeft + plot_w + 34 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label
        << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Loads each run directory's metric log and writes the comparison bundle:
// a copy of every per-run CSV, the merged CSV, FD and path-length charts
// (the latter with a one-standard-deviation band), and the stability table.
// Returns the paths written.
inline std::vector<std::string> emit_report(
    const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (run_dirs.empty()) throw std::invalid_argument("report: no run dirs");
  std::vector<LoadedRun> runs;
  for (const std::string& dir : run_dirs) runs.push_back(load_run(dir));
  // Disambiguate repeated directory basenames.
  for (std::size_t i = 0; i < runs.size(); ++i) {
    int clash = 0;
    for (std::size_t j = 0; j < i; ++j)
      if (runs[j].label == runs[i].label) ++clash;
    if (clash > 0) runs[i].label += "_" + std::to_string(clash + 1);
  }

  fs::create_directories(out_dir);
  std::vector<std::string> written;

  for (const LoadedRun& run : runs) {
    const std::string copy = out_dir + "/" + run.label + "_metrics.csv";
    fs::copy_file(run.dir + "/metrics.csv", copy,
                  fs::copy_options::overwrite_existing);
    written.push_back(copy);
  }

  const std::string merged = out_dir + "/merged.csv";
  write_merged_csv(merged, runs);
  written.push_back(merged);

  std::vector<ChartSeries> fd_series, pl_series;
  for (const LoadedRun& run : runs) {
    ChartSeries fd, pl;
    fd.label = run.label;
    pl.label = run.label;
    for (const EvalRow& r : run.metrics.rows) {
      fd.x.push_back(static_cast<double>(r.epoch));
      fd.y.push_back(r.fd);
      pl.x.push_back(static_cast<double>(r.epoch));
      pl.y.push_back(r.path_len_mean);
      pl.band_lo.push_back(r.path_len_mean - r.path_len_std);
      pl.band_hi.push_back(r.path_len_mean + r.path_len_std);
    }
    fd_series.push_back(std::move(fd));
    pl_series.push_back(std::move(pl));
  }
  const std::string fd_svg = out_dir + "/fd_vs_epoch.svg";
  write_line_chart_svg(fd_svg, "Frechet distance over training", "epoch",
                       "Frechet distance", fd_series);
  written.push_back(fd_svg);
  const std::string pl_svg = out_dir + "/path_length_vs_epoch.svg";
  write_line_chart_svg(pl_svg, "Path length over training (mean +- 1 std)",
                       "epoch", "path length", pl_series);
  written.push_back(pl_svg);

  const std::string stability = out_dir + "/stability.csv";
  write_stability_csv(stability, stability_table(runs));
  written.push_back(stability);
  return written;
}

}  // namespace gradflow
