#pragma once

// Plain SVG figures from a run record: stacked panels sharing a time axis.

#include "mgchil/metrics.hpp"
#include "mgchil/record.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace mgchil {

struct Series {
  std::string label;
  std::string color;
  std::function<double(const RunRow&)> value;
  bool dashed = false;
};

struct Guide {
  double y = 0.0;
  std::string color = "#999";
};

struct Panel {
  std::string title;
  std::string y_label;
  std::vector<Series> series;
  std::vector<Guide> guides;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline double nice_step(double span, int target_ticks) {
  if (!(span > 0.0)) return 1.0;
  const double raw = span / target_ticks;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

}  // namespace detail

// Rows outside [t_lo, t_hi] are skipped; a record with no rows still yields
// the axes.
inline std::string render_figure(const std::string& title, const std::vector<Panel>& panels,
                                 const std::vector<RunRow>& rows, double t_lo, double t_hi) {
  const double width = 900, panel_h = 220, top = 40, gap = 50, left = 80, right = 160;
  const double height = top + panels.size() * (panel_h + gap);
  const double plot_w = width - left - right;
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << detail::svg_escape(title) << "</text>\n";

  if (!(t_hi > t_lo)) t_hi = t_lo + 1.0;
  std::vector<const RunRow*> sel;
  for (const RunRow& r : rows)
    if (r.t >= t_lo && r.t <= t_hi) sel.push_back(&r);

  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const Panel& p = panels[pi];
    const double y0 = top + pi * (panel_h + gap);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : p.series)
      for (const RunRow* r : sel) {
        const double v = s.value(*r);
        if (std::isfinite(v)) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
    for (const auto& g : p.guides) {
      lo = std::min(lo, g.y);
      hi = std::max(hi, g.y);
    }
    if (!std::isfinite(lo)) {
      lo = 0.0;
      hi = 1.0;
    }
    if (hi - lo < 1e-9) {
      lo -= 1.0;
      hi += 1.0;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto X = [&](double t) { return left + (t - t_lo) / (t_hi - t_lo) * plot_w; };
    auto Y = [&](double v) { return y0 + panel_h - (v - lo) / (hi - lo) * panel_h; };

    os << "<g>\n<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << plot_w << "\" height=\""
       << panel_h << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<text x=\"" << left << "\" y=\"" << y0 - 6 << "\" font-size=\"12\">"
       << detail::svg_escape(p.title) << "</text>\n";
    os << "<text transform=\"translate(" << 18 << "," << y0 + panel_h / 2
       << ") rotate(-90)\" text-anchor=\"middle\">" << detail::svg_escape(p.y_label) << "</text>\n";
    const double ys = detail::nice_step(hi - lo, 5);
    for (double v = std::ceil(lo / ys) * ys; v <= hi; v += ys) {
      os << "<line x1=\"" << left - 4 << "\" x2=\"" << left << "\" y1=\"" << Y(v) << "\" y2=\""
         << Y(v) << "\" stroke=\"black\"/><text x=\"" << left - 6 << "\" y=\"" << Y(v) + 4
         << "\" text-anchor=\"end\">" << v << "</text>\n";
    }
    const double xs = detail::nice_step(t_hi - t_lo, 8);
    for (double t = std::ceil(t_lo / xs) * xs; t <= t_hi; t += xs) {
      os << "<line x1=\"" << X(t) << "\" x2=\"" << X(t) << "\" y1=\"" << y0 + panel_h
         << "\" y2=\"" << y0 + panel_h + 4 << "\" stroke=\"black\"/><text x=\"" << X(t)
         << "\" y=\"" << y0 + panel_h + 16 << "\" text-anchor=\"middle\">" << t << "</text>\n";
    }
    if (pi + 1 == panels.size())
      os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << y0 + panel_h + 34
         << "\" text-anchor=\"middle\">time (s)</text>\n";
    for (const auto& g : p.guides)
      os << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << Y(g.y)
         << "\" y2=\"" << Y(g.y) << "\" stroke=\"" << g.color << "\" stroke-dasharray=\"2,3\"/>\n";

    for (std::size_t si = 0; si < p.series.size(); ++si) {
      const Series& s = p.series[si];
      // Break the polyline at NaN gaps.
      std::ostringstream pts;
      pts << std::setprecision(6);
      auto flush = [&] {
        const std::string v = pts.str();
        if (!v.empty())
          os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.2\""
             << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"" << v << "\"/>\n";
        pts.str("");
      };
      // Decimate very long records to keep files small.
      const std::size_t stride = std::max<std::size_t>(1, sel.size() / 4000);
      for (std::size_t i = 0; i < sel.size(); i += stride) {
        const double v = s.value(*sel[i]);
        if (!std::isfinite(v)) {
          flush();
          continue;
        }
        pts << X(sel[i]->t) << ',' << Y(v) << ' ';
      }
      flush();
      const double ly = y0 + 14 + 16 * si;
      os << "<line x1=\"" << left + plot_w + 10 << "\" x2=\"" << left + plot_w + 30 << "\" y1=\""
         << ly - 4 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << s.color << "\""
         << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << "/><text x=\"" << left + plot_w + 34
         << "\" y=\"" << ly << "\">" << detail::svg_escape(s.label) << "</text>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::vector<Panel> active_power_panels(double p_max) {
  return {
      {"Active power at PCC",
       "kW",
       {{"P_PCC", "#1f77b4", [](const RunRow& r) { return r.p_pcc; }},
        {"P_ref", "#d62728", [](const RunRow& r) { return r.p_ref; }, true},
        {"P_dem", "#7f7f7f", [](const RunRow& r) { return r.p_dem; }}},
       {}},
      {"Inverter input",
       "kW",
       {{"P_inv applied", "#2ca02c", [](const RunRow& r) { return r.p_inv; }},
        {"P command", "#ff7f0e", [](const RunRow& r) { return r.cmd_p; }, true}},
       {{p_max, "#d62728"}, {-p_max, "#d62728"}}},
      {"Battery state of charge",
       "%",
       {{"SoC", "#9467bd", [](const RunRow& r) { return r.soc; }}},
       {{20, "#d62728"}, {30, "#2ca02c"}, {80, "#2ca02c"}, {90, "#d62728"}}},
  };
}

inline std::vector<Panel> reactive_power_panels(double q_max) {
  return {
      {"Reactive power at PCC",
       "kvar",
       {{"Q_PCC", "#1f77b4", [](const RunRow& r) { return r.q_pcc; }},
        {"Q_ref", "#d62728", [](const RunRow& r) { return r.q_ref; }, true}},
       {}},
      {"Inverter reactive input",
       "kvar",
       {{"Q_inv applied", "#2ca02c", [](const RunRow& r) { return r.q_inv; }},
        {"Q command", "#ff7f0e", [](const RunRow& r) { return r.cmd_q; }, true}},
       {{q_max, "#d62728"}, {-q_max, "#d62728"}}},
  };
}

// Writes <stem>_p.svg, <stem>_q.svg and <stem>_event<N>.svg for each
// switch-in event. Returns the paths written.
inline std::vector<std::string> emit_plots(const RunRecord& rec, const std::string& out_dir,
                                           const std::string& stem) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  auto write = [&](const std::string& name, const std::string& svg) {
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    std::ofstream os(path);
    if (!os) throw RecordError("cannot write " + path);
    os << svg;
    written.push_back(path);
  };
  const double p_max = rec.meta.number("p_max", 250.0);
  const double q_max = rec.meta.number("q_max", 250.0);
  const double t_lo = rec.rows.empty() ? 0.0 : rec.rows.front().t;
  const double t_hi = rec.rows.empty() ? 1.0 : rec.rows.back().t;
  const std::string name = rec.meta.values.count("scenario") ? rec.meta.values.at("scenario") : stem;

  write(stem + "_p.svg", render_figure(name + ": active power", active_power_panels(p_max), rec.rows, t_lo, t_hi));
  write(stem + "_q.svg", render_figure(name + ": reactive power", reactive_power_panels(q_max), rec.rows, t_lo, t_hi));

  const MetricsReport m = compute_metrics(rec);
  int n = 0;
  for (const auto& e : m.events) {
    if (e.magnitude <= 0.0) continue;
    ++n;
    std::ostringstream title;
    title << name << ": " << e.magnitude << " kW switch-in at t=" << e.t_event << " s";
    if (e.recovery_time) title << ", recovery " << *e.recovery_time << " s";
    auto panels = active_power_panels(p_max);
    panels.pop_back();
    const double ref = e.pre_ref;
    panels[0].series.push_back({"pre-event ref", "#000000", [ref](const RunRow&) { return ref; }, true});
    write(stem + "_event" + std::to_string(n) + ".svg",
          render_figure(title.str(), panels, rec.rows, e.t_event - 10.0, e.t_event + 40.0));
  }
  return written;
}

}  // namespace mgchil
