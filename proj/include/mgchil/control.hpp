#pragma once

// Centralized cascaded controller: fast P/Q power loops with anti-windup,
// event-triggered SoC loop with full-power recovery override, demand
// estimation through the identified model, rate-limited adaptive reference
// and static P/Q decoupling.

#include "mgchil/lti.hpp"
#include "mgchil/plant.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mgchil {

// --- power loop -----------------------------------------------------------

struct PidGains {
  double k_p = 0.8;
  double k_i = 2.0;   // 1/s
  double k_d = 0.0;   // s
  double p_pb = 0.0;  // proportional bias, kW
  double p_db = 0.0;  // derivative bias, kW/s
  double sample_time = 0.1;
  double derivative_filter_pole = 0.8;

  void validate() const {
    if (k_i < 0.0) throw std::invalid_argument("k_i must be >= 0");
    if (!(sample_time > 0.0)) throw std::invalid_argument("sample time must be positive");
    if (derivative_filter_pole < 0.0 || derivative_filter_pole >= 1.0)
      throw std::invalid_argument("derivative filter pole must be in [0, 1)");
  }
};

struct PidState {
  double x_i = 0.0;         // kW*s
  double x_d = 0.0;         // kW/s, filtered derivative of the error
  double last_error = 0.0;  // kW
  double last_output = 0.0; // kW
};

// K_P (e - P_PB) + K_I x_I + K_D (x_D - P_DB)
inline double pid_law(const PidGains& g, double err, double x_i, double x_d) {
  return g.k_p * (err - g.p_pb) + g.k_i * x_i + g.k_d * (x_d - g.p_db);
}

struct PidStep {
  double raw = 0.0;
  PidState state;
};

inline PidStep pid_step(const PidState& s, const PidGains& g, double err) {
  PidStep out;
  out.state.x_i = g.sample_time * err + s.x_i;
  const double alpha = g.derivative_filter_pole;
  out.state.x_d = alpha * s.x_d + (1.0 - alpha) * (err - s.last_error) / g.sample_time;
  out.state.last_error = err;
  out.raw = pid_law(g, err, out.state.x_i, out.state.x_d);
  out.state.last_output = out.raw;
  return out;
}

// Integrator value for which pid_law(g, err, x_i, x_d) == target.
inline double back_calculate_integrator(const PidGains& g, double err, double x_d, double target) {
  return (target - g.k_p * (err - g.p_pb) - g.k_d * (x_d - g.p_db)) / g.k_i;
}

struct ChannelLimits {
  double amplitude = 250.0;
  double ramp = 80.0;  // per second
};

struct Saturation {
  double cmd = 0.0;
  PidState state;
  bool saturated = false;
  bool unprotected = false;  // saturated with k_i == 0: clamp only
};

// Amplitude then rate clamp. On saturation the integrator is reset so the
// control law re-evaluates exactly to the emitted command.
inline Saturation saturate_and_antiwindup(double raw, const PidState& s, const PidGains& g,
                                          const ChannelLimits& lim, double prev_cmd) {
  Saturation out;
  out.state = s;
  out.cmd = limit_amplitude_and_rate(raw, prev_cmd, lim.amplitude, lim.ramp * g.sample_time);
  if (out.cmd == raw) return out;
  out.saturated = true;
  if (g.k_i > 0.0) {
    out.state.x_i = back_calculate_integrator(g, s.last_error, s.x_d, out.cmd);
    out.state.last_output = out.cmd;
  } else {
    out.unprotected = true;
  }
  return out;
}

// --- SoC loop -------------------------------------------------------------

struct SocPolicy {
  double abs_low = 20.0;
  double dead_low = 30.0;
  double dead_high = 80.0;
  double abs_high = 90.0;
  double k_p = 5.0;             // kW per percent
  double k_i = 0.5;             // kW per percent-second
  double windup_limit = 50.0;   // kW; bounds both integrator and output
  double pv_gain = 0.0;         // optional PV feedforward, off by default
  double pv_cap = 250.0;        // kW
  double sample_time = 0.1;
  double x_i = 0.0;

  void validate() const {
    if (!(0.0 <= abs_low && abs_low < dead_low && dead_low < dead_high && dead_high < abs_high &&
          abs_high <= 100.0))
      throw std::invalid_argument("SoC bands must satisfy 0 <= abs_low < dead_low < "
                                  "dead_high < abs_high <= 100");
    if (windup_limit < 0.0) throw std::invalid_argument("SoC windup limit must be >= 0");
  }
};

struct SocCompensation {
  double p_soc_bar = 0.0;  // kW added to the P reference
  SocPolicy policy;
};

// Zero (integrator frozen) inside the dead zone; PI toward the nearest
// dead-zone edge outside it. Negative output lowers the PCC reference so
// the inverter discharges; positive raises it so the inverter charges.
inline SocCompensation soc_compensation(double soc, double p_pv, const SocPolicy& policy) {
  SocCompensation out{0.0, policy};
  if (soc >= policy.dead_low && soc <= policy.dead_high) return out;
  const double e = soc < policy.dead_low ? policy.dead_low - soc : policy.dead_high - soc;
  SocPolicy& p = out.policy;
  p.x_i = std::clamp(p.x_i + p.sample_time * e, -p.windup_limit, p.windup_limit);
  double f = p.k_p * e + p.k_i * p.x_i;
  if (p.pv_gain != 0.0) f -= p.pv_gain * std::min(p_pv, p.pv_cap);
  out.p_soc_bar = std::clamp(f, -p.windup_limit, p.windup_limit);
  return out;
}

struct Recovery {
  bool active = false;
  double direction = 0.0;  // +1 full discharge, -1 full charge
};

// Beyond the absolute limits the only goal is bringing SoC back: full
// inverter power until SoC re-enters the dead zone.
inline Recovery soc_recovery_override(double soc, const SocPolicy& policy, Recovery current) {
  if (current.active) {
    if (soc >= policy.dead_low && soc <= policy.dead_high) return {};
    return current;
  }
  if (soc > policy.abs_high) return {true, +1.0};
  if (soc < policy.abs_low) return {true, -1.0};
  return {};
}

// --- reference scheduling -------------------------------------------------

enum class Mode { kOff, kAdaptive, kManual };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kOff: return "off";
    case Mode::kAdaptive: return "adaptive";
    case Mode::kManual: return "manual";
  }
  return "off";
}

inline std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "off") return Mode::kOff;
  if (s == "adaptive") return Mode::kAdaptive;
  if (s == "manual") return Mode::kManual;
  return std::nullopt;
}

struct ReferenceState {
  Mode mode = Mode::kOff;
  double manual_p = 0.0;    // kW
  double manual_q = 0.0;    // kvar
  double rate_limit = 0.5;  // R, kW/s (kvar/s for Q)
  double p_dem_bar = 0.0;
  double q_dem_bar = 0.0;
  bool primed = false;      // rate limiter memory holds a real estimate
};

// P_err = P_ref - P_PCC, P_ref = P_ref_manual + P_dem_bar + P_soc_bar with
// the manual term active in manual mode and the demand term in adaptive mode.
inline std::optional<double> compute_power_error(double p_pcc, const ReferenceState& ref,
                                                 double p_soc_bar) {
  switch (ref.mode) {
    case Mode::kOff: return std::nullopt;
    case Mode::kAdaptive: return ref.p_dem_bar + p_soc_bar - p_pcc;
    case Mode::kManual: return ref.manual_p + p_soc_bar - p_pcc;
  }
  return std::nullopt;
}

inline std::optional<double> compute_reactive_error(double q_pcc, const ReferenceState& ref) {
  switch (ref.mode) {
    case Mode::kOff: return std::nullopt;
    case Mode::kAdaptive: return ref.q_dem_bar - q_pcc;
    case Mode::kManual: return ref.manual_q - q_pcc;
  }
  return std::nullopt;
}

inline double rate_limit_reference(double estimate, double prev, double rate_limit,
                                   double sample_time) {
  if (!(rate_limit > 0.0)) throw std::invalid_argument("rate limit must be positive");
  const double r = (estimate - prev) / sample_time;
  if (r > rate_limit) return prev + sample_time * rate_limit;
  if (r < -rate_limit) return prev - sample_time * rate_limit;
  return estimate;
}

// Runs the controller's copy of the model on the command history so that
// P_dem_hat = P_PCC + [G11 P_inv + G12 Q_inv](k-1), and likewise for Q.
// loop_delay_steps aligns commands with the (delayed) measurement they
// affected: a measurement seen at controller tick k reflects commands up to
// k - 1 - loop_delay_steps.
class DemandEstimator {
 public:
  DemandEstimator() : DemandEstimator(default_plant_model(), 0) {}
  DemandEstimator(LtiModel model, int loop_delay_steps)
      : filter_(std::move(model)), delay_(loop_delay_steps) {
    check_two_by_two(filter_.model());
    if (delay_ < 0) throw std::invalid_argument("loop delay must be >= 0");
  }

  // Once per tick, before estimate().
  void advance() {
    Eigen::Vector2d u = Eigen::Vector2d::Zero();
    if (static_cast<int>(history_.size()) > delay_) u = history_[history_.size() - 1 - delay_];
    filter_.advance(u);
    predicted_ = filter_.output(u);
  }

  // Once per tick, after the command is emitted.
  void record_command(double p, double q) {
    history_.emplace_back(p, q);
    while (static_cast<int>(history_.size()) > delay_ + 1) history_.pop_front();
  }

  std::pair<double, double> estimate(double p_pcc, double q_pcc) const {
    return {p_pcc + predicted_(0), q_pcc + predicted_(1)};
  }

  const Eigen::Vector2d& predicted() const { return predicted_; }
  const LtiModel& model() const { return filter_.model(); }
  int loop_delay_steps() const { return delay_; }

 private:
  LtiFilter filter_;
  int delay_ = 0;
  std::deque<Eigen::Vector2d> history_;
  Eigen::Vector2d predicted_ = Eigen::Vector2d::Zero();
};

// Pure form: runs the model from rest over an entire command history
// (oldest first). Returns P_PCC, Q_PCC unchanged when the history is empty.
inline std::pair<double, double> estimate_demand(double p_pcc, double q_pcc,
                                                 const std::vector<Eigen::Vector2d>& history,
                                                 const LtiModel& model, int loop_delay_steps = 0) {
  DemandEstimator est(model, loop_delay_steps);
  for (const auto& c : history) {
    est.advance();
    est.record_command(c(0), c(1));
  }
  est.advance();
  return est.estimate(p_pcc, q_pcc);
}

// --- decoupling -----------------------------------------------------------

inline constexpr double kMaxDecoupleCondition = 1e6;

struct Decoupled {
  double p = 0.0;
  double q = 0.0;
  bool fallback = false;  // matrix ill-conditioned, identity used
};

inline double condition_number(const Eigen::Matrix2d& m) {
  Eigen::JacobiSVD<Eigen::Matrix2d> svd(m);
  const auto& s = svd.singularValues();
  return s(1) == 0.0 ? std::numeric_limits<double>::infinity() : s(0) / s(1);
}

// [p; q] = M^-1 [raw_p; raw_q]
inline Decoupled decouple(double raw_p, double raw_q, const Eigen::Matrix2d& m) {
  if (!m.allFinite() || !(condition_number(m) <= kMaxDecoupleCondition))
    return {raw_p, raw_q, true};
  const Eigen::Vector2d v = m.partialPivLu().solve(Eigen::Vector2d(raw_p, raw_q));
  return {v(0), v(1), false};
}

// --- supervisor -----------------------------------------------------------

struct ControllerConfig {
  PidGains gains_p;
  PidGains gains_q;
  SocPolicy soc;
  double rate_limit = 0.5;  // kW/s
  Mode initial_mode = Mode::kOff;
  double manual_p = 0.0;
  double manual_q = 0.0;
  InverterModel inverter;
  LtiModel model = default_plant_model();
  bool decoupling = true;
  int delay_in = 0;
  int delay_out = 0;
  int stale_hold_ticks = 3;
  int stale_failsafe_ticks = 50;

  double sample_time() const { return gains_p.sample_time; }
  void validate() const {
    gains_p.validate();
    gains_q.validate();
    soc.validate();
    inverter.validate();
    check_two_by_two(model);
    if (!(rate_limit > 0.0)) throw std::invalid_argument("reference rate limit must be positive");
    if (delay_in < 0 || delay_out < 0) throw std::invalid_argument("delays must be >= 0");
    if (gains_p.sample_time != gains_q.sample_time || gains_p.sample_time != soc.sample_time)
      throw std::invalid_argument("all loops must share one sample time");
  }
};

struct Measurements {
  double p_pcc = 0.0;
  double q_pcc = 0.0;
  double soc = 50.0;
  double p_pv = 0.0;
  int age_ticks = 0;  // 0 = arrived this tick
};

struct InverterCommand {
  double p = 0.0;
  double q = 0.0;
  bool operator==(const InverterCommand&) const = default;
};

enum ControllerFlag : std::uint32_t {
  kFlagRecovery = 1u << 0,
  kFlagStaleHold = 1u << 1,
  kFlagFailsafe = 1u << 2,
  kFlagSaturatedP = 1u << 3,
  kFlagSaturatedQ = 1u << 4,
  kFlagDecoupleFallback = 1u << 5,
  kFlagUnprotectedWindup = 1u << 6,
  kFlagSocBand = 1u << 7,
};

// Everything a tick computed, for telemetry and the run record.
struct TickReport {
  InverterCommand command;
  Mode mode = Mode::kOff;
  double p_ref = 0.0, q_ref = 0.0;  // total references used by the loops
  double p_ref_manual = 0.0;        // manual term
  double p_dem_hat = 0.0, q_dem_hat = 0.0;
  double p_dem_bar = 0.0, q_dem_bar = 0.0;
  double p_soc_bar = 0.0;
  double err_p = 0.0, err_q = 0.0;
  std::uint32_t flags = 0;
  bool tracking = false;  // power loops ran this tick
};

struct ControllerState {
  PidState pid_p, pid_q;
  PidGains gains_p, gains_q;
  SocPolicy soc;
  ReferenceState ref;
  DemandEstimator estimator;
  Eigen::Matrix2d decouple_matrix = Eigen::Matrix2d::Identity();
  Recovery recovery;
  InverterCommand last_command;
  bool capture_pending = true;  // next tracking tick re-captures bumpless biases
  int stale_ticks = 0;
  long tick = 0;
};

class Controller {
 public:
  explicit Controller(ControllerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    s_.gains_p = cfg_.gains_p;
    s_.gains_q = cfg_.gains_q;
    s_.soc = cfg_.soc;
    s_.ref.mode = cfg_.initial_mode;
    s_.ref.manual_p = cfg_.manual_p;
    s_.ref.manual_q = cfg_.manual_q;
    s_.ref.rate_limit = cfg_.rate_limit;
    s_.estimator = DemandEstimator(cfg_.model, cfg_.delay_in + cfg_.delay_out);
    if (cfg_.decoupling) {
      const Eigen::MatrixXd g = dc_gain(cfg_.model);
      s_.decouple_matrix = g.topLeftCorner<2, 2>();
    }
  }

  const ControllerConfig& config() const { return cfg_; }
  const ControllerState& state() const { return s_; }

  // Operator actions take effect on the next tick.
  void set_mode(Mode m) {
    if (m != s_.ref.mode) s_.capture_pending = true;
    s_.ref.mode = m;
  }
  void set_manual_reference(double p, double q) {
    s_.ref.manual_p = p;
    s_.ref.manual_q = q;
  }
  void set_gains(Channel ch, double k_p, double k_i, double k_d) {
    PidGains& g = ch == Channel::kP ? s_.gains_p : s_.gains_q;
    PidGains candidate = g;
    candidate.k_p = k_p;
    candidate.k_i = k_i;
    candidate.k_d = k_d;
    candidate.validate();
    g = candidate;
    s_.capture_pending = true;
  }

  TickReport tick(const Measurements& meas) {
    TickReport rep;
    rep.mode = s_.ref.mode;
    const double ts = cfg_.sample_time();
    s_.estimator.advance();

    const InverterCommand prev = s_.last_command;
    InverterCommand target{0.0, 0.0};
    bool emit_target = true;  // rate-limit `target` unless the loops produced the command

    const bool usable = meas.age_ticks < cfg_.stale_hold_ticks;
    if (meas.age_ticks >= cfg_.stale_failsafe_ticks) {
      rep.flags |= kFlagFailsafe;
      s_.capture_pending = true;
    } else if (!usable) {
      rep.flags |= kFlagStaleHold;
      target = prev;
      s_.capture_pending = true;
    } else {
      update_reference(meas, rep);
      s_.recovery = soc_recovery_override(meas.soc, s_.soc, s_.recovery);
      if (s_.ref.mode == Mode::kOff) {
        reset_loops();
      } else if (s_.recovery.active) {
        rep.flags |= kFlagRecovery;
        target = {s_.recovery.direction * cfg_.inverter.p_max, 0.0};
        s_.capture_pending = true;
      } else {
        emit_target = false;
        track(meas, prev, rep);
      }
    }

    if (emit_target) {
      rep.command.p = limit_amplitude_and_rate(target.p, prev.p, cfg_.inverter.p_max,
                                               cfg_.inverter.ramp_limit * ts);
      rep.command.q = limit_amplitude_and_rate(target.q, prev.q, cfg_.inverter.q_max,
                                               cfg_.inverter.ramp_limit * ts);
    }
    s_.last_command = rep.command;
    s_.estimator.record_command(rep.command.p, rep.command.q);
    s_.stale_ticks = meas.age_ticks;
    ++s_.tick;
    return rep;
  }

 private:
  void update_reference(const Measurements& meas, TickReport& rep) {
    const auto [p_hat, q_hat] = s_.estimator.estimate(meas.p_pcc, meas.q_pcc);
    ReferenceState& ref = s_.ref;
    if (!ref.primed) {
      ref.p_dem_bar = p_hat;
      ref.q_dem_bar = q_hat;
      ref.primed = true;
    } else {
      const double ts = cfg_.sample_time();
      ref.p_dem_bar = rate_limit_reference(p_hat, ref.p_dem_bar, ref.rate_limit, ts);
      ref.q_dem_bar = rate_limit_reference(q_hat, ref.q_dem_bar, ref.rate_limit, ts);
    }
    rep.p_dem_hat = p_hat;
    rep.q_dem_hat = q_hat;
    rep.p_dem_bar = ref.p_dem_bar;
    rep.q_dem_bar = ref.q_dem_bar;
    rep.p_ref_manual = ref.mode == Mode::kManual ? ref.manual_p : 0.0;
  }

  void reset_loops() {
    s_.pid_p = {};
    s_.pid_q = {};
    s_.gains_p.p_pb = s_.gains_p.p_db = 0.0;
    s_.gains_q.p_pb = s_.gains_q.p_db = 0.0;
    s_.capture_pending = true;
  }

  // Injection opposes the PCC error: the PCC flow responds to injection
  // through -G, so the command is -M^-1 * raw with M = G(1).
  bool decouple_fallback() const {
    return !s_.decouple_matrix.allFinite() ||
           !(condition_number(s_.decouple_matrix) <= kMaxDecoupleCondition);
  }
  Eigen::Vector2d to_command(const Eigen::Vector2d& raw, bool& fallback) const {
    const Decoupled d = decouple(raw(0), raw(1), s_.decouple_matrix);
    fallback = d.fallback;
    return {-d.p, -d.q};
  }
  Eigen::Vector2d to_raw(const InverterCommand& c, bool fallback) const {
    const Eigen::Matrix2d m = fallback ? Eigen::Matrix2d::Identity() : s_.decouple_matrix;
    return -(m * Eigen::Vector2d(c.p, c.q));
  }

  // Bumpless (re-)entry: biases absorb the present error and the integrators
  // take over the previous command.
  void capture(double err_p, double err_q, const InverterCommand& prev) {
    const Eigen::Vector2d raw_prev = to_raw(prev, decouple_fallback());
    auto one = [](PidState& st, PidGains& g, double err, double raw) {
      st = {};
      st.last_error = err;
      st.last_output = raw;
      g.p_db = 0.0;
      g.p_pb = err;
      if (g.k_i > 0.0) st.x_i = raw / g.k_i;
      else if (g.k_p != 0.0) g.p_pb = err - raw / g.k_p;
    };
    one(s_.pid_p, s_.gains_p, err_p, raw_prev(0));
    one(s_.pid_q, s_.gains_q, err_q, raw_prev(1));
    s_.capture_pending = false;
  }

  void track(const Measurements& meas, const InverterCommand& prev, TickReport& rep) {
    const auto soc = soc_compensation(meas.soc, meas.p_pv, s_.soc);
    s_.soc = soc.policy;
    if (soc.p_soc_bar != 0.0 || meas.soc < s_.soc.dead_low || meas.soc > s_.soc.dead_high)
      rep.flags |= kFlagSocBand;
    rep.p_soc_bar = soc.p_soc_bar;

    const double err_p = *compute_power_error(meas.p_pcc, s_.ref, soc.p_soc_bar);
    const double err_q = *compute_reactive_error(meas.q_pcc, s_.ref);
    rep.err_p = err_p;
    rep.err_q = err_q;
    rep.p_ref = err_p + meas.p_pcc;
    rep.q_ref = err_q + meas.q_pcc;
    rep.tracking = true;

    if (s_.capture_pending) capture(err_p, err_q, prev);

    const PidStep sp = pid_step(s_.pid_p, s_.gains_p, err_p);
    const PidStep sq = pid_step(s_.pid_q, s_.gains_q, err_q);
    bool fallback = false;
    const Eigen::Vector2d pre = to_command({sp.raw, sq.raw}, fallback);
    if (fallback) rep.flags |= kFlagDecoupleFallback;

    const double ts = cfg_.sample_time();
    const double step = cfg_.inverter.ramp_limit * ts;
    InverterCommand cmd{limit_amplitude_and_rate(pre(0), prev.p, cfg_.inverter.p_max, step),
                        limit_amplitude_and_rate(pre(1), prev.q, cfg_.inverter.q_max, step)};
    s_.pid_p = sp.state;
    s_.pid_q = sq.state;
    if (cmd.p != pre(0)) rep.flags |= kFlagSaturatedP;
    if (cmd.q != pre(1)) rep.flags |= kFlagSaturatedQ;

    if (cmd.p != pre(0) || cmd.q != pre(1)) {
      // Map the clamped command back into loop space and re-seat both
      // integrators there, so each control law reproduces it exactly.
      const Eigen::Vector2d raw_eff = to_raw(cmd, fallback);
      auto fix = [&rep](PidState& st, const PidGains& g, double raw_new, double raw_old) {
        if (raw_new == raw_old) return;
        if (g.k_i > 0.0) {
          st.x_i = back_calculate_integrator(g, st.last_error, st.x_d, raw_new);
          st.last_output = raw_new;
        } else {
          rep.flags |= kFlagUnprotectedWindup;
        }
      };
      fix(s_.pid_p, s_.gains_p, raw_eff(0), sp.raw);
      fix(s_.pid_q, s_.gains_q, raw_eff(1), sq.raw);
    }
    rep.command = cmd;
  }

  ControllerConfig cfg_;
  ControllerState s_;
};

}  // namespace mgchil
