#pragma once

// Minimal SVG line charts for metrics CSVs (eval vs steps, eval vs FLOPs,
// selected score vs steps) and sampler traces (joint score vs chunks).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "jest/harness/csv.hpp"

namespace jest::harness {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Figure {
  std::string name;  // file stem
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

namespace plot_detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace plot_detail

inline std::string render_svg(const Figure& fig) {
  constexpr double W = 720, H = 440, left = 80, right = 190, top = 40, bottom = 60;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : fig.series) {
    for (double v : s.x) xmin = std::min(xmin, v), xmax = std::max(xmax, v);
    for (double v : s.y) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pw = W - left - right, ph = H - top - bottom;
  auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return top + ph - (y - ymin) / (ymax - ymin) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << plot_detail::escape(fig.title) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0, yv = ymin + (ymax - ymin) * k / 4.0;
    os << "<text x=\"" << sx(xv) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << format_number(xv) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << format_number(yv) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << plot_detail::escape(fig.x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << plot_detail::escape(fig.y_label) << "</text>\n";
  for (std::size_t i = 0; i < fig.series.size(); ++i) {
    const auto& s = fig.series[i];
    const char* color = plot_detail::kPalette[i % std::size(plot_detail::kPalette)];
    os << "<polyline class=\"series\" data-label=\"" << plot_detail::escape(s.label) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) os << (k ? " " : "") << sx(s.x[k]) << ',' << sy(s.y[k]);
    os << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    os << "<line x1=\"" << W - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 32 << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - right + 38 << "\" y=\"" << ly + 4 << "\">" << plot_detail::escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Builds figures from a metrics CSV (has `cumulative_flops`) or a sampler
/// trace CSV (has `chunk`).
inline std::vector<Figure> figures_from_csv(const CsvTable& t) {
  auto series_for = [&](const std::vector<std::string>& key_cols, const std::string& xcol, const std::string& ycol) {
    std::vector<std::size_t> keys;
    for (const auto& k : key_cols) keys.push_back(t.column(k));
    const std::size_t xi = t.column(xcol), yi = t.column(ycol);
    std::vector<Series> out;
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const auto& row = t.rows[r];
      std::string label;
      for (std::size_t k = 0; k < keys.size(); ++k) label += (k ? "/" : "") + row[keys[k]];
      auto [it, inserted] = index.try_emplace(label, out.size());
      if (inserted) out.push_back({label, {}, {}});
      out[it->second].x.push_back(parse_csv_number(row[xi], r + 2));
      out[it->second].y.push_back(parse_csv_number(row[yi], r + 2));
    }
    return out;
  };

  if (t.has_column("cumulative_flops")) {
    const std::vector<std::string> key{"scenario", "run", "seed"};
    return {
        {"eval_vs_steps", "Retrieval top-1 vs training steps", "step", "eval_i2t_top1", series_for(key, "step", "eval_i2t_top1")},
        {"eval_vs_flops", "Retrieval top-1 vs cumulative FLOPs", "cumulative_flops", "eval_i2t_top1",
         series_for(key, "cumulative_flops", "eval_i2t_top1")},
        {"selected_score_vs_steps", "Selected sub-batch score vs steps", "step", "mean_selected_score",
         series_for(key, "step", "mean_selected_score")},
    };
  }
  if (t.has_column("chunk")) {
    return {{"joint_score_vs_chunks", "Joint score of the selected prefix vs chunks", "chunk", "joint_score",
             series_for({"sampler"}, "chunk", "joint_score")}};
  }
  throw CsvError("unrecognised CSV schema", 1);
}

/// Writes one SVG per figure family into `out_dir`; returns the paths.
inline std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& csv_path,
                                                     const std::filesystem::path& out_dir) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + csv_path.string());
  const CsvTable table = read_csv(in);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& fig : figures_from_csv(table)) {
    const auto path = out_dir / (fig.name + ".svg");
    std::ofstream(path, std::ios::binary) << render_svg(fig);
    written.push_back(path);
  }
  return written;
}

}  // namespace jest::harness
