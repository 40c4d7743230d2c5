#include "mgchil/control.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mgchil;

namespace {

ControllerConfig plain_config() {
  ControllerConfig cfg;
  cfg.decoupling = false;
  return cfg;
}

// Plant-form recursion over the command sequence seen by the estimator at
// controller tick k: the command of tick j reaches the model at j + 1 + delay.
Eigen::Vector2d brute_force_prediction(const LtiModel& m, const std::vector<Eigen::Vector2d>& cmds,
                                       int delay, int k) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(m.n_states());
  Eigen::Vector2d y = Eigen::Vector2d::Zero();
  for (int j = 0; j <= k; ++j) {
    const int src = j - 1 - delay;
    const Eigen::Vector2d v = src >= 0 ? cmds[src] : Eigen::Vector2d::Zero();
    x = m.a * x + m.b * v;
    y = m.c * x + m.d * v;
  }
  return y;
}

}  // namespace

TEST(Pid, LawMatchesHandArithmetic) {
  PidGains g;
  g.k_p = 0.5;
  g.k_i = 2.0;
  g.k_d = 0.1;
  g.p_pb = 1.0;
  g.p_db = 3.0;
  // 0.5 (4 - 1) + 2 * 10 + 0.1 (5 - 3)
  EXPECT_DOUBLE_EQ(pid_law(g, 4.0, 10.0, 5.0), 1.5 + 20.0 + 0.2);
}

TEST(Pid, StepIntegratesAndFiltersDerivative) {
  PidGains g;
  g.k_p = 1.0;
  g.k_i = 1.0;
  g.k_d = 1.0;
  g.sample_time = 0.1;
  g.derivative_filter_pole = 0.5;
  PidState s;
  const PidStep a = pid_step(s, g, 2.0);
  EXPECT_DOUBLE_EQ(a.state.x_i, 0.2);
  EXPECT_DOUBLE_EQ(a.state.x_d, 0.5 * 20.0);
  EXPECT_DOUBLE_EQ(a.raw, 2.0 + 0.2 + 10.0);
  const PidStep b = pid_step(a.state, g, 2.0);
  EXPECT_DOUBLE_EQ(b.state.x_i, 0.4);
  EXPECT_DOUBLE_EQ(b.state.x_d, 5.0);
}

TEST(Pid, AntiWindupReproducesEmittedCommand) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int saturated = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    PidGains g;
    g.k_p = 2.0 * std::abs(u(rng));
    g.k_i = 0.01 + 5.0 * std::abs(u(rng));
    g.k_d = 0.2 * std::abs(u(rng));
    g.p_pb = 20.0 * u(rng);
    PidState s;
    s.x_i = 200.0 * u(rng);
    s.x_d = 50.0 * u(rng);
    s.last_error = 300.0 * u(rng);
    const double raw = pid_law(g, s.last_error, s.x_i, s.x_d);
    const Saturation out = saturate_and_antiwindup(raw, s, g, {250.0, 80.0}, 250.0 * u(rng));
    if (!out.saturated) continue;
    ++saturated;
    const double again = pid_law(g, s.last_error, out.state.x_i, out.state.x_d);
    EXPECT_LE(std::abs(again - out.cmd), 1e-12 * std::max(1.0, std::abs(out.cmd)));
  }
  EXPECT_GT(saturated, 1000);
}

TEST(Pid, ZeroIntegralGainIsClampOnly) {
  PidGains g;
  g.k_i = 0.0;
  PidState s;
  s.x_i = 3.0;
  const Saturation out = saturate_and_antiwindup(1000.0, s, g, {250.0, 80.0}, 0.0);
  EXPECT_TRUE(out.unprotected);
  EXPECT_EQ(out.state.x_i, 3.0);
  EXPECT_EQ(out.cmd, 8.0);
  PidGains bad;
  bad.k_i = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Reference, RateLimitedStepNeverExceedsBound) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> jump(0.0, 20.0);
  const double ts = 0.1, r = 0.5;
  for (int seq = 0; seq < 1000; ++seq) {
    double est = 200.0, out = 200.0;
    for (int k = 0; k < 200; ++k) {
      est += jump(rng);
      const double next = rate_limit_reference(est, out, r, ts);
      EXPECT_LE(std::abs(next - out), ts * r + 1e-12);
      out = next;
    }
  }
  EXPECT_EQ(rate_limit_reference(200.01, 200.0, 0.5, 0.1), 200.01);
  EXPECT_THROW(rate_limit_reference(1.0, 0.0, 0.0, 0.1), std::invalid_argument);
}

TEST(Reference, ErrorsPerMode) {
  ReferenceState ref;
  ref.manual_p = 100.0;
  ref.manual_q = 20.0;
  ref.p_dem_bar = 180.0;
  ref.q_dem_bar = 50.0;
  EXPECT_FALSE(compute_power_error(150.0, ref, 0.0));
  ref.mode = Mode::kManual;
  EXPECT_EQ(*compute_power_error(150.0, ref, -5.0), -55.0);
  EXPECT_EQ(*compute_reactive_error(30.0, ref), -10.0);
  ref.mode = Mode::kAdaptive;
  EXPECT_EQ(*compute_power_error(150.0, ref, 0.0), 30.0);
  EXPECT_EQ(*compute_reactive_error(30.0, ref), 20.0);
  EXPECT_EQ(parse_mode("manual"), Mode::kManual);
  EXPECT_FALSE(parse_mode("auto"));
  EXPECT_EQ(to_string(Mode::kAdaptive), "adaptive");
}

TEST(Soc, DeadZoneIsSilentAndIntegratorFrozen) {
  SocPolicy p;
  p.x_i = 12.0;
  for (double soc : {30.0, 55.0, 80.0}) {
    const auto c = soc_compensation(soc, 100.0, p);
    EXPECT_EQ(c.p_soc_bar, 0.0);
    EXPECT_EQ(c.policy.x_i, 12.0);
  }
}

TEST(Soc, CompensationSignsAndClamp) {
  SocPolicy p;
  // Too full: lower the PCC reference so the inverter discharges.
  const auto high = soc_compensation(85.0, 0.0, p);
  EXPECT_DOUBLE_EQ(high.policy.x_i, -0.5);
  EXPECT_DOUBLE_EQ(high.p_soc_bar, 5.0 * -5.0 + 0.5 * -0.5);
  const auto low = soc_compensation(25.0, 0.0, p);
  EXPECT_GT(low.p_soc_bar, 0.0);
  SocPolicy wound = p;
  for (int k = 0; k < 10000; ++k) wound = soc_compensation(0.0, 0.0, wound).policy;
  EXPECT_EQ(wound.x_i, p.windup_limit);
  EXPECT_EQ(soc_compensation(0.0, 0.0, wound).p_soc_bar, p.windup_limit);
  SocPolicy bad;
  bad.dead_low = 10.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Soc, RecoveryHysteresis) {
  const SocPolicy p;
  Recovery r;
  r = soc_recovery_override(90.0, p, r);
  EXPECT_FALSE(r.active);
  r = soc_recovery_override(90.5, p, r);
  EXPECT_TRUE(r.active);
  EXPECT_EQ(r.direction, 1.0);
  r = soc_recovery_override(85.0, p, r);
  EXPECT_TRUE(r.active);
  r = soc_recovery_override(80.0, p, r);
  EXPECT_FALSE(r.active);
  r = soc_recovery_override(85.0, p, r);
  EXPECT_FALSE(r.active);
  r = soc_recovery_override(19.0, p, r);
  EXPECT_EQ(r.direction, -1.0);
  r = soc_recovery_override(25.0, p, r);
  EXPECT_TRUE(r.active);
  r = soc_recovery_override(30.0, p, r);
  EXPECT_FALSE(r.active);
}

TEST(Estimator, MatchesBruteForceRecursion) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  const LtiModel m = default_plant_model(0.1, (Eigen::Matrix2d() << 1.0, 0.2, -0.1, 0.8).finished());
  for (int delay : {0, 1, 2, 5}) {
    DemandEstimator est(m, delay);
    std::vector<Eigen::Vector2d> cmds;
    for (int k = 0; k < 120; ++k) {
      est.advance();
      const Eigen::Vector2d want = brute_force_prediction(m, cmds, delay, k);
      EXPECT_NEAR(est.predicted()(0), want(0), 1e-9);
      EXPECT_NEAR(est.predicted()(1), want(1), 1e-9);
      const auto [p, q] = est.estimate(150.0, 40.0);
      EXPECT_DOUBLE_EQ(p, 150.0 + est.predicted()(0));
      EXPECT_DOUBLE_EQ(q, 40.0 + est.predicted()(1));
      cmds.emplace_back(u(rng), u(rng));
      est.record_command(cmds.back()(0), cmds.back()(1));
    }
    const auto pure = estimate_demand(150.0, 40.0, cmds, m, delay);
    DemandEstimator again(m, delay);
    for (const auto& c : cmds) {
      again.advance();
      again.record_command(c(0), c(1));
    }
    again.advance();
    EXPECT_DOUBLE_EQ(pure.first, 150.0 + again.predicted()(0));
  }
}

TEST(Estimator, RecoversDemandOnTheTruePlant) {
  PlantConfig pc;
  pc.inverter.ramp_limit = 1e9;
  DemandProfile d;
  d.base = 210.0;
  Plant plant(pc, d, {}, 50.0);
  DemandEstimator est(pc.model, 0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int k = 0; k < 300; ++k) {
    est.advance();
    const auto [p, q] = est.estimate(plant.state().p_pcc, plant.state().q_pcc);
    EXPECT_NEAR(p, 210.0, 1e-9);
    EXPECT_NEAR(q, 63.0, 1e-9);
    const double cp = u(rng), cq = u(rng);
    est.record_command(cp, cq);
    plant.step(cp, cq);
  }
}

TEST(Decouple, InvertsTheGainMatrix) {
  Eigen::Matrix2d m;
  m << 1.0, 0.1, 0.1, 1.0;
  const Decoupled d = decouple(9.9, 0.0, m);
  EXPECT_FALSE(d.fallback);
  EXPECT_NEAR(d.p, 10.0, 1e-12);
  EXPECT_NEAR(d.q, -1.0, 1e-12);
  Eigen::Matrix2d singular;
  singular << 1.0, 1.0, 1.0, 1.0;
  const Decoupled f = decouple(3.0, 4.0, singular);
  EXPECT_TRUE(f.fallback);
  EXPECT_EQ(f.p, 3.0);
  EXPECT_EQ(f.q, 4.0);
}

TEST(Controller, OffModeRampsCommandToZero) {
  ControllerConfig cfg = plain_config();
  cfg.initial_mode = Mode::kManual;
  cfg.manual_p = 100.0;
  Controller c(cfg);
  Measurements m;
  m.p_pcc = 200.0;
  for (int k = 0; k < 20; ++k) c.tick(m);
  const double held = c.state().last_command.p;
  EXPECT_GT(held, 0.0);
  c.set_mode(Mode::kOff);
  double prev = held;
  for (int k = 0; k < 100; ++k) {
    const TickReport r = c.tick(m);
    EXPECT_FALSE(r.tracking);
    EXPECT_LE(std::abs(r.command.p - prev), 8.0 + 1e-12);
    prev = r.command.p;
  }
  EXPECT_EQ(prev, 0.0);
}

TEST(Controller, BumplessModeSwitch) {
  ControllerConfig cfg = plain_config();
  cfg.initial_mode = Mode::kAdaptive;
  Controller c(cfg);
  Measurements m;
  m.p_pcc = 220.0;
  m.q_pcc = 60.0;
  for (int k = 0; k < 50; ++k) c.tick(m);
  const InverterCommand before = c.state().last_command;
  c.set_manual_reference(100.0, 10.0);
  c.set_mode(Mode::kManual);
  const TickReport r = c.tick(m);
  const double ki_ts = cfg.gains_p.k_i * cfg.sample_time();
  EXPECT_LE(std::abs(r.command.p - before.p), ki_ts * std::abs(r.err_p) + 1e-9);
  EXPECT_LE(std::abs(r.command.q - before.q), ki_ts * std::abs(r.err_q) + 1e-9);
  EXPECT_NEAR(r.err_p, -120.0, 1e-9);
}

TEST(Controller, SaturatedTicksSatisfyControlLaw) {
  ControllerConfig cfg;
  cfg.initial_mode = Mode::kManual;
  cfg.manual_p = 0.0;
  Controller c(cfg);
  Measurements m;
  m.p_pcc = 400.0;
  int saturated = 0;
  for (int k = 0; k < 200; ++k) {
    const TickReport r = c.tick(m);
    if (!(r.flags & kFlagSaturatedP)) continue;
    ++saturated;
    const auto& s = c.state();
    const Eigen::Vector2d raw(pid_law(s.gains_p, s.pid_p.last_error, s.pid_p.x_i, s.pid_p.x_d),
                              pid_law(s.gains_q, s.pid_q.last_error, s.pid_q.x_i, s.pid_q.x_d));
    const Eigen::Vector2d cmd = -s.decouple_matrix.partialPivLu().solve(raw);
    EXPECT_LE(std::abs(cmd(0) - r.command.p), 1e-12 * std::max(1.0, std::abs(r.command.p)));
    EXPECT_LE(std::abs(cmd(1) - r.command.q), 1e-9);
  }
  EXPECT_GT(saturated, 20);
}

TEST(Controller, StaleMeasurementsHoldThenFailsafe) {
  ControllerConfig cfg = plain_config();
  cfg.initial_mode = Mode::kManual;
  cfg.manual_p = 150.0;
  Controller c(cfg);
  Measurements m;
  m.p_pcc = 200.0;
  for (int k = 0; k < 30; ++k) c.tick(m);
  const InverterCommand held = c.state().last_command;
  m.age_ticks = cfg.stale_hold_ticks;
  TickReport r = c.tick(m);
  EXPECT_TRUE(r.flags & kFlagStaleHold);
  EXPECT_EQ(r.command, held);
  m.age_ticks = cfg.stale_failsafe_ticks;
  double prev = held.p;
  for (int k = 0; k < 100; ++k) {
    r = c.tick(m);
    EXPECT_TRUE(r.flags & kFlagFailsafe);
    EXPECT_LE(std::abs(r.command.p - prev), 8.0 + 1e-12);
    prev = r.command.p;
  }
  EXPECT_EQ(prev, 0.0);
}

TEST(Controller, RecoveryDrivesFullDischarge) {
  ControllerConfig cfg;
  cfg.initial_mode = Mode::kAdaptive;
  Controller c(cfg);
  Measurements m;
  m.p_pcc = 200.0;
  m.soc = 95.0;
  for (int k = 1; k <= 40; ++k) {
    const TickReport r = c.tick(m);
    EXPECT_TRUE(r.flags & kFlagRecovery);
    EXPECT_DOUBLE_EQ(r.command.p, std::min(8.0 * k, 250.0));
  }
  m.soc = 79.0;
  EXPECT_FALSE(c.tick(m).flags & kFlagRecovery);
}

TEST(Controller, GainUpdatesAreValidated) {
  Controller c(ControllerConfig{});
  EXPECT_THROW(c.set_gains(Channel::kP, 1.0, -1.0, 0.0), std::invalid_argument);
  c.set_gains(Channel::kQ, 0.5, 1.0, 0.0);
  EXPECT_EQ(c.state().gains_q.k_p, 0.5);
  ControllerConfig bad;
  bad.rate_limit = 0.0;
  EXPECT_THROW(Controller{bad}, std::invalid_argument);
}
