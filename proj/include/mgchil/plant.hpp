#pragma once

// Behavioral microgrid simulator: demand process, PV, battery/inverter and
// the LTI coupling from inverter injection to the PCC power flow.
//
// Sign convention: positive inverter injection reduces PCC import,
//   P_PCC = P_dem - y1,  Q_PCC = Q_dem - y2,  y = G(q) [P_inv; Q_inv].

#include "mgchil/lti.hpp"
#include "mgchil/phasor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace mgchil {

enum PlantFault : std::uint16_t {
  kFaultNone = 0,
  kFaultNonFiniteInput = 1u << 0,
  kFaultSocSaturated = 1u << 1,
};

// Inverter input channel: active or reactive power.
enum class Channel { kP = 0, kQ = 1 };

struct InverterModel {
  double p_max = 250.0;       // kW
  double q_max = 250.0;       // kvar
  double ramp_limit = 80.0;   // kW/s (and kvar/s)
  int input_delay_steps = 0;

  void validate() const {
    if (!(p_max > 0 && q_max > 0 && ramp_limit > 0))
      throw std::invalid_argument("inverter limits must be positive");
    if (input_delay_steps < 0) throw std::invalid_argument("inverter delay must be >= 0");
  }
};

struct BatteryModel {
  double capacity_kwh = 1000.0;
  double soc = 50.0;  // percent
  double soc_init = 50.0;
  bool saturated = false;  // set on the step where the clamp engaged
};

struct LoadEvent {
  double t_on = 0.0;
  double t_off = 0.0;
  double magnitude = 0.0;        // kW
  double transient_spike = 0.0;  // kW added for spike_duration after t_on
  double spike_duration = 0.0;   // s

  bool operator==(const LoadEvent&) const = default;
};

struct PlantConfig {
  LtiModel model = default_plant_model();
  InverterModel inverter;
  double battery_capacity_kwh = 1000.0;
};

struct PlantState {
  double t = 0.0;
  Eigen::VectorXd lti_state;
  double p_pcc = 0.0, q_pcc = 0.0;
  double p_dem = 0.0, q_dem = 0.0;
  double p_pv = 0.0;
  double p_inv_applied = 0.0, q_inv_applied = 0.0;
  BatteryModel battery;
  std::deque<std::array<double, 2>> pending;  // commands waiting out input_delay_steps
  std::uint16_t faults = kFaultNone;
};

// soc' = clamp(soc - 100 (p_inv - p_pv) T_s / 3600 / capacity, 0, 100)
inline BatteryModel battery_update(BatteryModel battery, double p_inv, double p_pv,
                                   double sample_time) {
  const double delta = 100.0 * (p_inv - p_pv) * (sample_time / 3600.0) / battery.capacity_kwh;
  const double raw = battery.soc - delta;
  battery.soc = std::clamp(raw, 0.0, 100.0);
  battery.saturated = raw != battery.soc;
  return battery;
}

inline PlantState initial_plant_state(const PlantConfig& cfg, double soc_init, double demand_p,
                                      double demand_q, double pv) {
  PlantState s;
  s.lti_state = Eigen::VectorXd::Zero(cfg.model.n_states());
  s.battery.capacity_kwh = cfg.battery_capacity_kwh;
  s.battery.soc = s.battery.soc_init = std::clamp(soc_init, 0.0, 100.0);
  s.p_dem = s.p_pcc = demand_p;
  s.q_dem = s.q_pcc = demand_q;
  s.p_pv = pv;
  return s;
}

inline double clamp_symmetric(double v, double limit) { return std::clamp(v, -limit, limit); }

// Amplitude limit first, then rate limit against the previously applied value.
inline double limit_amplitude_and_rate(double cmd, double prev, double amplitude_limit,
                                       double max_step) {
  const double amp = clamp_symmetric(cmd, amplitude_limit);
  return std::clamp(amp, prev - max_step, prev + max_step);
}

// Advances the plant one sample: the (delayed, limited) command is held over
// [t, t + T_s) and the returned state carries the PCC measurement at t + T_s.
// demand_* and pv are the values at t + T_s.
inline PlantState step_plant(const PlantState& state, const PlantConfig& cfg, double cmd_p,
                             double cmd_q, double demand_p, double demand_q, double pv) {
  if (!std::isfinite(cmd_p) || !std::isfinite(cmd_q) || !std::isfinite(demand_p) ||
      !std::isfinite(demand_q) || !std::isfinite(pv)) {
    PlantState rejected = state;
    rejected.faults |= kFaultNonFiniteInput;
    return rejected;
  }
  const LtiModel& m = cfg.model;
  const double ts = m.sample_time;
  PlantState next = state;
  next.faults = kFaultNone;

  if (cfg.inverter.input_delay_steps > 0) {
    next.pending.push_back({cmd_p, cmd_q});
    if (static_cast<int>(next.pending.size()) > cfg.inverter.input_delay_steps) {
      cmd_p = next.pending.front()[0];
      cmd_q = next.pending.front()[1];
      next.pending.pop_front();
    } else {
      cmd_p = state.p_inv_applied;
      cmd_q = state.q_inv_applied;
    }
  }

  const double max_step = cfg.inverter.ramp_limit * ts;
  next.p_inv_applied =
      limit_amplitude_and_rate(cmd_p, state.p_inv_applied, cfg.inverter.p_max, max_step);
  next.q_inv_applied =
      limit_amplitude_and_rate(cmd_q, state.q_inv_applied, cfg.inverter.q_max, max_step);

  const Eigen::Vector2d u(next.p_inv_applied, next.q_inv_applied);
  next.lti_state = m.a * state.lti_state + m.b * u;
  const Eigen::VectorXd y = m.c * next.lti_state + m.d * u;

  next.t = state.t + ts;
  next.p_dem = demand_p;
  next.q_dem = demand_q;
  next.p_pv = pv;
  next.p_pcc = demand_p - y(0);
  next.q_pcc = demand_q - y(1);

  next.battery = battery_update(state.battery, next.p_inv_applied, pv, ts);
  if (next.battery.saturated) next.faults |= kFaultSocSaturated;
  return next;
}

// --- demand ---------------------------------------------------------------

struct DemandProfile {
  double base = 200.0;            // kW
  double sine_amplitude = 0.0;    // kW
  double sine_period = 1800.0;    // s
  double noise_std = 0.0;         // kW, band-limited
  std::uint64_t noise_seed = 1;
  double reactive_ratio = 0.3;    // Q_dem = ratio * P_dem
  std::vector<LoadEvent> events;

  bool operator==(const DemandProfile&) const = default;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline double unit_uniform(std::uint64_t& s) {
  return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Base + slow sinusoid + band-limited noise (a seeded sum of sinusoids in
// [2 mHz, 50 mHz]) + active load events. Pure in (t, profile).
class DemandProcess {
 public:
  static constexpr int kNoiseTones = 16;
  static constexpr double kNoiseLowHz = 0.002;
  static constexpr double kNoiseHighHz = 0.05;

  explicit DemandProcess(DemandProfile profile) : profile_(std::move(profile)) {
    std::uint64_t s = profile_.noise_seed;
    const double tone_amplitude = profile_.noise_std * std::sqrt(2.0 / kNoiseTones);
    for (auto& tone : tones_) {
      tone.freq = kNoiseLowHz + (kNoiseHighHz - kNoiseLowHz) * detail::unit_uniform(s);
      tone.phase = 2.0 * std::numbers::pi * detail::unit_uniform(s);
      tone.amplitude = tone_amplitude;
    }
  }

  const DemandProfile& profile() const { return profile_; }

  double baseline(double t) const {
    double v = profile_.base;
    if (profile_.sine_amplitude != 0.0 && profile_.sine_period > 0.0)
      v += profile_.sine_amplitude * std::sin(2.0 * std::numbers::pi * t / profile_.sine_period);
    if (profile_.noise_std != 0.0)
      for (const auto& tone : tones_)
        v += tone.amplitude * std::sin(2.0 * std::numbers::pi * tone.freq * t + tone.phase);
    return v;
  }

  // Sum of switched-in event magnitudes (no inrush spikes).
  double event_load(double t) const {
    double v = 0.0;
    for (const auto& e : profile_.events)
      if (t >= e.t_on && t < e.t_off) v += e.magnitude;
    return v;
  }

  double active(double t) const {
    double v = baseline(t);
    for (const auto& e : profile_.events) {
      if (t >= e.t_on && t < e.t_off) {
        v += e.magnitude;
        if (t < e.t_on + e.spike_duration) v += e.transient_spike;
      }
    }
    return std::max(v, 0.0);
  }

  // Load events are purely active.
  double reactive(double t) const {
    return profile_.reactive_ratio * std::max(baseline(t), 0.0);
  }

 private:
  struct Tone {
    double freq = 0, phase = 0, amplitude = 0;
  };
  DemandProfile profile_;
  std::array<Tone, kNoiseTones> tones_{};
};

inline double demand_profile(double t, const DemandProfile& profile) {
  if (t < 0) throw std::invalid_argument("demand_profile: t must be >= 0");
  return DemandProcess(profile).active(t);
}

// --- PMUs -----------------------------------------------------------------

// Bus assignment for the six PMUs.
enum class PmuBus : int {
  kPcc = 1,
  kNonEmergencyLoad = 2,
  kEmergencyLoad = 3,
  kInverter = 4,
  kPv = 5,
  kBattery = 6,
};

inline constexpr int kPmuCount = 6;

struct PmuConfig {
  double nominal_voltage = 480.0 / std::numbers::sqrt3;  // phase-neutral volts
  double emergency_share = 0.15;  // fraction of demand on the emergency bus
  double frequency_jitter = 0.0;  // Hz, peak
  double voltage_jitter = 0.0;    // fraction of nominal, peak
};

inline PhasorSample sample_pmu(const PlantState& s, int pmu_id, const PmuConfig& cfg = {}) {
  if (pmu_id < 1 || pmu_id > kPmuCount) throw std::out_of_range("unknown PMU id");
  double p = 0.0, q = 0.0;
  switch (static_cast<PmuBus>(pmu_id)) {
    case PmuBus::kPcc:
      p = s.p_pcc;
      q = s.q_pcc;
      break;
    case PmuBus::kNonEmergencyLoad:
      p = (1.0 - cfg.emergency_share) * s.p_dem;
      q = (1.0 - cfg.emergency_share) * s.q_dem;
      break;
    case PmuBus::kEmergencyLoad:
      p = cfg.emergency_share * s.p_dem;
      q = cfg.emergency_share * s.q_dem;
      break;
    case PmuBus::kInverter:
      p = s.p_inv_applied;
      q = s.q_inv_applied;
      break;
    case PmuBus::kPv:
      p = s.p_pv;
      break;
    case PmuBus::kBattery:
      p = s.p_inv_applied - s.p_pv;
      q = s.q_inv_applied;
      break;
  }

  // Deterministic per (time, pmu) jitter.
  std::uint64_t seed = static_cast<std::uint64_t>(std::llround(s.t * 1000.0)) * 8 +
                       static_cast<std::uint64_t>(pmu_id);
  const double jf = 2.0 * detail::unit_uniform(seed) - 1.0;
  const double jv = 2.0 * detail::unit_uniform(seed) - 1.0;

  PhasorSample out;
  out.voltage = std::complex<double>(cfg.nominal_voltage * (1.0 + cfg.voltage_jitter * jv), 0.0);
  const std::complex<double> power(p * 1000.0, q * 1000.0);
  out.current = std::conj(power / (3.0 * out.voltage));
  out.frequency = kNominalFrequency + cfg.frequency_jitter * jf;
  out.p_kw = p;
  out.q_kvar = q;
  return out;
}

// Owns the plant state and the demand/PV drivers for a run.
class Plant {
 public:
  Plant(PlantConfig cfg, DemandProfile demand, std::vector<std::array<double, 2>> pv_profile,
        double soc_init)
      : cfg_(std::move(cfg)), demand_(std::move(demand)), pv_profile_(std::move(pv_profile)) {
    check_two_by_two(cfg_.model);
    cfg_.inverter.validate();
    state_ = initial_plant_state(cfg_, soc_init, demand_.active(0.0), demand_.reactive(0.0),
                                 pv_at(0.0));
  }

  const PlantConfig& config() const { return cfg_; }
  const PlantState& state() const { return state_; }
  const DemandProcess& demand() const { return demand_; }
  double sample_time() const { return cfg_.model.sample_time; }

  // Piecewise-linear PV profile, held flat outside its span.
  double pv_at(double t) const {
    if (pv_profile_.empty()) return 0.0;
    if (t <= pv_profile_.front()[0]) return pv_profile_.front()[1];
    if (t >= pv_profile_.back()[0]) return pv_profile_.back()[1];
    auto hi = std::upper_bound(pv_profile_.begin(), pv_profile_.end(), t,
                               [](double v, const auto& pt) { return v < pt[0]; });
    auto lo = hi - 1;
    const double w = ((*hi)[0] == (*lo)[0]) ? 1.0 : (t - (*lo)[0]) / ((*hi)[0] - (*lo)[0]);
    return (*lo)[1] + w * ((*hi)[1] - (*lo)[1]);
  }

  const PlantState& step(double cmd_p, double cmd_q) {
    // Advance time by integer ticks so long runs do not accumulate drift.
    ++tick_;
    const double t_next = static_cast<double>(tick_) * sample_time();
    state_ = step_plant(state_, cfg_, cmd_p, cmd_q, demand_.active(t_next),
                        demand_.reactive(t_next), pv_at(t_next));
    if (state_.faults & kFaultNonFiniteInput) --tick_;
    else state_.t = t_next;
    return state_;
  }

  long tick() const { return tick_; }

 private:
  PlantConfig cfg_;
  DemandProcess demand_;
  std::vector<std::array<double, 2>> pv_profile_;
  PlantState state_;
  long tick_ = 0;
};

}  // namespace mgchil
