#pragma once

// Summary metrics computed from a run record alone.

#include "mgchil/record.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mgchil {

struct MetricsOptions {
  double recovery_band = 0.05;   // fraction of the event magnitude
  double recovery_sustain = 2.0; // s
  double settle_time = 30.0;     // s excluded at the start of a segment
};

struct EventMetrics {
  double t_event = 0.0;
  double magnitude = 0.0;   // kW, signed (negative = switch-out)
  double pre_ref = 0.0;     // P reference just before the event
  std::optional<double> recovery_time;
  double peak_excursion = 0.0;  // max |P_PCC - pre_ref| until recovery or the next event
};

struct SegmentMetrics {
  std::string mode;
  bool recovery = false;
  double t_start = 0.0, t_end = 0.0;
  long samples = 0;
  double rmse = 0.0;          // over the whole segment
  double rmse_settled = kNaN; // after settle_time
};

struct MetricsReport {
  std::vector<EventMetrics> events;
  std::vector<SegmentMetrics> segments;
  double soc_min = kNaN, soc_max = kNaN;
  long limit_violations = 0;
  double peak_excursion = 0.0;
  long rows = 0;
};

inline constexpr std::uint32_t kRecoveryFlagBit = 1u;  // ControllerFlag kFlagRecovery

inline MetricsReport compute_metrics(const RunRecord& rec, const MetricsOptions& opt = {}) {
  MetricsReport rep;
  const auto& rows = rec.rows;
  rep.rows = static_cast<long>(rows.size());
  const double ts = rec.meta.number("Ts", 0.1);
  const double p_max = rec.meta.number("p_max", 250.0);
  const double q_max = rec.meta.number("q_max", 250.0);
  const double ramp = rec.meta.number("ramp", 80.0);
  if (!(ts > 0.0)) throw RecordError("run record metadata: Ts must be positive");

  // Limits on what the inverter actually applied.
  const double step = ramp * ts;
  const double tol = 1e-9;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const RunRow& r = rows[k];
    if (std::abs(r.p_inv) > p_max + tol || std::abs(r.q_inv) > q_max + tol) ++rep.limit_violations;
    if (k > 0) {
      const RunRow& prev = rows[k - 1];
      if (std::abs(r.p_inv - prev.p_inv) > step * (1 + 1e-12) + tol ||
          std::abs(r.q_inv - prev.q_inv) > step * (1 + 1e-12) + tol)
        ++rep.limit_violations;
    }
    rep.soc_min = k == 0 ? r.soc : std::min(rep.soc_min, r.soc);
    rep.soc_max = k == 0 ? r.soc : std::max(rep.soc_max, r.soc);
  }

  // Load events: steps in the switched-in event load.
  const auto sustain = static_cast<std::size_t>(std::lround(opt.recovery_sustain / ts));
  std::vector<std::size_t> event_rows;
  for (std::size_t k = 1; k < rows.size(); ++k)
    if (rows[k].event_kw != rows[k - 1].event_kw) event_rows.push_back(k);
  for (std::size_t i = 0; i < event_rows.size(); ++i) {
    const std::size_t k = event_rows[i];
    const std::size_t end = i + 1 < event_rows.size() ? event_rows[i + 1] : rows.size();
    EventMetrics ev;
    ev.t_event = rows[k].t;
    ev.magnitude = rows[k].event_kw - rows[k - 1].event_kw;
    ev.pre_ref = std::isnan(rows[k - 1].p_ref) ? rows[k - 1].p_pcc : rows[k - 1].p_ref;
    const double band = opt.recovery_band * std::abs(ev.magnitude);
    auto inside = [&](std::size_t j) { return std::abs(rows[j].p_pcc - ev.pre_ref) < band; };
    std::size_t j = k;
    std::optional<std::size_t> hit;
    while (j < end) {
      if (!inside(j)) {
        ++j;
        continue;
      }
      std::size_t m = j;
      while (m < end && m <= j + sustain && inside(m)) ++m;
      if (m > j + sustain) {
        hit = j;
        break;
      }
      j = m;
    }
    const std::size_t until = hit ? *hit : end;
    for (std::size_t m = k; m < until; ++m)
      ev.peak_excursion = std::max(ev.peak_excursion, std::abs(rows[m].p_pcc - ev.pre_ref));
    if (hit) ev.recovery_time = rows[*hit].t - ev.t_event;
    rep.peak_excursion = std::max(rep.peak_excursion, ev.peak_excursion);
    rep.events.push_back(ev);
  }

  // Tracking segments: runs of equal (mode, recovery) where the loops ran.
  std::optional<SegmentMetrics> cur;
  double sum = 0.0, sum_settled = 0.0;
  long n_settled = 0;
  auto close = [&] {
    if (!cur) return;
    cur->rmse = cur->samples ? std::sqrt(sum / cur->samples) : 0.0;
    if (n_settled > 0) cur->rmse_settled = std::sqrt(sum_settled / n_settled);
    rep.segments.push_back(*cur);
    cur.reset();
  };
  for (const RunRow& r : rows) {
    const bool recovery = (r.flags & kRecoveryFlagBit) != 0;
    const bool tracking = !std::isnan(r.err_p) && (r.mode == "adaptive" || r.mode == "manual");
    if (!tracking && !recovery) {
      close();
      continue;
    }
    if (!cur || cur->mode != r.mode || cur->recovery != recovery) {
      close();
      cur = SegmentMetrics{r.mode, recovery, r.t, r.t};
      sum = sum_settled = 0.0;
      n_settled = 0;
    }
    cur->t_end = r.t;
    if (tracking) {
      ++cur->samples;
      sum += r.err_p * r.err_p;
      if (r.t - cur->t_start >= opt.settle_time) {
        sum_settled += r.err_p * r.err_p;
        ++n_settled;
      }
    }
  }
  close();
  return rep;
}

inline nlohmann::json metrics_json(const MetricsReport& m) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isnan(v)) return nullptr;
    return v;
  };
  nlohmann::json j;
  j["rows"] = m.rows;
  j["soc_min"] = num(m.soc_min);
  j["soc_max"] = num(m.soc_max);
  j["limit_violations"] = m.limit_violations;
  j["peak_excursion_kw"] = m.peak_excursion;
  j["events"] = nlohmann::json::array();
  for (const auto& e : m.events) {
    j["events"].push_back({{"t", e.t_event},
                           {"magnitude_kw", e.magnitude},
                           {"pre_ref_kw", e.pre_ref},
                           {"recovery_s", e.recovery_time ? nlohmann::json(*e.recovery_time) : nlohmann::json()},
                           {"peak_excursion_kw", e.peak_excursion}});
  }
  j["segments"] = nlohmann::json::array();
  for (const auto& s : m.segments) {
    j["segments"].push_back({{"mode", s.mode},
                             {"recovery", s.recovery},
                             {"t_start", s.t_start},
                             {"t_end", s.t_end},
                             {"samples", s.samples},
                             {"rmse_kw", num(s.rmse)},
                             {"rmse_settled_kw", num(s.rmse_settled)}});
  }
  return j;
}

}  // namespace mgchil
