// Minimal static SVG line charts: axes, ticks, polylines, legend.
// Output is fully deterministic (fixed palette, %.6g numbers, no
// timestamps or random ids), so rendered files can be byte-compared.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "bsdg/common.hpp"
#include "bsdg/dataset.hpp"
#include "bsdg/metrics.hpp"

namespace bsdg {

struct SvgSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct SvgChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<SvgSeries> series;
  int width = 720;
  int height = 440;
};

namespace detail_svg {

inline std::string f6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return std::string(buf);
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c; break;
    }
  }
  return out;
}

// Round a positive span to a "nice" value (1/2/5 times a power of ten).
inline double nice_num(double x, bool round_nearest) {
  const int expv = static_cast<int>(std::floor(std::log10(x)));
  const double base = std::pow(10.0, expv);
  const double f = x / base;
  double nf;
  if (round_nearest) {
    nf = f < 1.5 ? 1.0 : f < 3.0 ? 2.0 : f < 7.0 ? 5.0 : 10.0;
  } else {
    nf = f <= 1.0 ? 1.0 : f <= 2.0 ? 2.0 : f <= 5.0 ? 5.0 : 10.0;
  }
  return nf * base;
}

struct Ticks {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> at;
};

inline Ticks make_ticks(double lo, double hi, int target_count) {
  Ticks t;
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (lo > hi) std::swap(lo, hi);
  if (hi - lo < 1e-300) {
    // Degenerate range: widen around the value.
    const double pad = (std::abs(lo) > 0.0) ? std::abs(lo) * 0.1 : 1.0;
    lo -= pad;
    hi += pad;
  }
  const double range = nice_num(hi - lo, false);
  const double step = nice_num(range / std::max(1, target_count - 1), true);
  const double start = std::floor(lo / step) * step;
  const double end = std::ceil(hi / step) * step;
  t.lo = start;
  t.hi = end;
  for (double v = start; v <= end + step * 0.5; v += step) {
    // Snap values that should be zero (avoids "-1.11022e-16" labels).
    t.at.push_back(std::abs(v) < step * 1e-9 ? 0.0 : v);
  }
  return t;
}

inline const char* palette(std::size_t i) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return kColors[i % (sizeof(kColors) / sizeof(kColors[0]))];
}

}  // namespace detail_svg

// Render the chart to a standalone SVG document string.
inline std::string render_line_chart(const SvgChart& chart) {
  using detail_svg::f6;
  using detail_svg::xml_escape;

  const double w = chart.width;
  const double h = chart.height;
  const double ml = 64.0, mr = 18.0, mt = 34.0, mb = 46.0;
  const double pw = w - ml - mr;
  const double ph = h - mt - mb;
  detail::require(pw > 10.0 && ph > 10.0, "svg: chart dimensions too small");

  // Data ranges over all finite points.
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
  double y0 = x0, y1 = -x0;
  for (const auto& s : chart.series) {
    detail::require(s.x.size() == s.y.size(), "svg: series x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!(x0 <= x1)) {  // no finite data at all
    x0 = 0.0;
    x1 = 1.0;
    y0 = 0.0;
    y1 = 1.0;
  }
  const auto tx = detail_svg::make_ticks(x0, x1, 6);
  const auto ty = detail_svg::make_ticks(y0, y1, 6);

  const auto px = [&](double x) { return ml + (x - tx.lo) / (tx.hi - tx.lo) * pw; };
  const auto py = [&](double y) { return mt + ph - (y - ty.lo) / (ty.hi - ty.lo) * ph; };

  std::string out;
  out.reserve(4096);
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f6(w) + "\" height=\"" +
         f6(h) + "\" viewBox=\"0 0 " + f6(w) + " " + f6(h) + "\">\n";
  out += "<rect x=\"0\" y=\"0\" width=\"" + f6(w) + "\" height=\"" + f6(h) +
         "\" fill=\"#ffffff\"/>\n";
  if (!chart.title.empty()) {
    out += "<text x=\"" + f6(w / 2) +
           "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\" font-weight=\"bold\" "
           "text-anchor=\"middle\" fill=\"#222222\">" +
           xml_escape(chart.title) + "</text>\n";
  }

  // Gridlines + tick labels.
  for (double v : ty.at) {
    const double y = py(v);
    out += "<line x1=\"" + f6(ml) + "\" y1=\"" + f6(y) + "\" x2=\"" + f6(ml + pw) +
           "\" y2=\"" + f6(y) + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
    out += "<text x=\"" + f6(ml - 6) + "\" y=\"" + f6(y + 3.5) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\" "
           "fill=\"#444444\">" +
           f6(v) + "</text>\n";
  }
  for (double v : tx.at) {
    const double x = px(v);
    out += "<line x1=\"" + f6(x) + "\" y1=\"" + f6(mt) + "\" x2=\"" + f6(x) + "\" y2=\"" +
           f6(mt + ph) + "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
    out += "<text x=\"" + f6(x) + "\" y=\"" + f6(mt + ph + 14) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" "
           "fill=\"#444444\">" +
           f6(v) + "</text>\n";
  }

  // Axes on top of the grid.
  out += "<line x1=\"" + f6(ml) + "\" y1=\"" + f6(mt) + "\" x2=\"" + f6(ml) + "\" y2=\"" +
         f6(mt + ph) + "\" stroke=\"#222222\" stroke-width=\"1\"/>\n";
  out += "<line x1=\"" + f6(ml) + "\" y1=\"" + f6(mt + ph) + "\" x2=\"" + f6(ml + pw) +
         "\" y2=\"" + f6(mt + ph) + "\" stroke=\"#222222\" stroke-width=\"1\"/>\n";
  if (!chart.x_label.empty()) {
    out += "<text x=\"" + f6(ml + pw / 2) + "\" y=\"" + f6(h - 10) +
           "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" "
           "fill=\"#222222\">" +
           xml_escape(chart.x_label) + "</text>\n";
  }
  if (!chart.y_label.empty()) {
    out += "<text x=\"14\" y=\"" + f6(mt + ph / 2) +
           "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" "
           "transform=\"rotate(-90 14 " +
           f6(mt + ph / 2) + ")\" fill=\"#222222\">" + xml_escape(chart.y_label) +
           "</text>\n";
  }

  // Series polylines; non-finite points split a series into separate runs.
  for (std::size_t si = 0; si < chart.series.size(); ++si) {
    const auto& s = chart.series[si];
    const char* color = detail_svg::palette(si);
    std::string pts;
    const auto flush = [&]() {
      if (pts.empty()) return;
      out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        flush();
        continue;
      }
      if (!pts.empty()) pts += " ";
      pts += f6(px(s.x[i])) + "," + f6(py(s.y[i]));
    }
    flush();
    // Point markers make single-sample series visible.
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      out += "<circle cx=\"" + f6(px(s.x[i])) + "\" cy=\"" + f6(py(s.y[i])) +
             "\" r=\"2\" fill=\"" + std::string(color) + "\"/>\n";
    }
  }

  // Legend, top-right inside the plot area.
  if (!chart.series.empty()) {
    const double lx = ml + pw - 8;
    double ly = mt + 8;
    for (std::size_t si = 0; si < chart.series.size(); ++si) {
      const auto& s = chart.series[si];
      out += "<rect x=\"" + f6(lx - 10) + "\" y=\"" + f6(ly) +
             "\" width=\"10\" height=\"10\" fill=\"" + std::string(detail_svg::palette(si)) +
             "\"/>\n";
      out += "<text x=\"" + f6(lx - 14) + "\" y=\"" + f6(ly + 9) +
             "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\" "
             "fill=\"#222222\">" +
             xml_escape(s.label) + "</text>\n";
      ly += 15;
    }
  }

  out += "</svg>\n";
  return out;
}

inline void write_line_chart(const std::string& path, const SvgChart& chart) {
  detail_ds::spew(path, render_line_chart(chart));
}

// Build a chart from parsed run metrics: one series per requested column,
// epoch on the horizontal axis. Column names match the CSV header.
inline SvgChart chart_from_metrics(const ParsedMetrics& pm,
                                   const std::vector<std::string>& columns,
                                   const std::string& title) {
  detail::require(!columns.empty(), "svg: at least one column required");
  SvgChart chart;
  chart.title = title;
  chart.x_label = "epoch";
  chart.y_label = columns.size() == 1 ? columns[0] : "value";
  for (const auto& col : columns) {
    SvgSeries s;
    s.label = col;
    for (const auto& r : pm.records) {
      double v;
      if (col == "inner_cl") {
        v = r.inner_cl;
      } else if (col == "inner_adv") {
        v = r.inner_adv;
      } else if (col == "outer_loss") {
        v = r.outer_loss;
      } else if (col == "grad_norm_theta") {
        v = r.grad_norm_theta;
      } else if (col == "grad_norm_omega") {
        v = r.grad_norm_omega;
      } else if (col == "lr_theta") {
        v = r.lr_theta;
      } else if (col == "lr_omega") {
        v = r.lr_omega;
      } else if (col == "avg_shifted") {
        v = r.avg_shifted;
      } else if (col == "wall_clock_ms") {
        v = r.wall_clock_ms;
      } else if (col.rfind("acc_", 0) == 0) {
        const std::string dom = col.substr(4);
        std::size_t di = pm.domains.size();
        for (std::size_t i = 0; i < pm.domains.size(); ++i) {
          if (pm.domains[i] == dom) {
            di = i;
            break;
          }
        }
        if (di == pm.domains.size()) {
          throw config_error("svg: unknown accuracy column '" + col + "'");
        }
        v = r.domain_acc.at(di);
      } else {
        throw config_error("svg: unknown metrics column '" + col + "'");
      }
      s.x.push_back(static_cast<double>(r.epoch));
      s.y.push_back(v);
    }
    chart.series.push_back(std::move(s));
  }
  return chart;
}

}  // namespace bsdg
