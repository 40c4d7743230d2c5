#include "mgchil/sysid.hpp"
#include "support/random_systems.hpp"

#include <gtest/gtest.h>

using namespace mgchil;

namespace {

Plant quiet_plant(const LtiModel& m, double ramp = 1e9, double limit = 1e9) {
  PlantConfig cfg;
  cfg.model = m;
  cfg.inverter.ramp_limit = ramp;
  cfg.inverter.p_max = cfg.inverter.q_max = limit;
  DemandProfile d;
  d.base = 200.0;
  return Plant(cfg, d, {}, 50.0);
}

}  // namespace

TEST(Sysid, StepToImpulseIsFirstDifference) {
  StepRecord r;
  r.amplitude = 2.0;
  r.y_p = {0.0, 1.0, 3.0, 4.0};
  r.y_q = {0.0, -2.0, -2.0, -1.0};
  const Eigen::MatrixXd h = step_to_impulse(r);
  const double want_p[] = {0.0, 0.5, 1.0, 0.5};
  const double want_q[] = {0.0, -1.0, 0.0, 0.5};
  for (int k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(h(0, k), want_p[k]);
    EXPECT_DOUBLE_EQ(h(1, k), want_q[k]);
  }
  r.amplitude = 0.0;
  EXPECT_THROW(step_to_impulse(r), SysidError);
}

TEST(Sysid, StepRecordStartsAtStepTick) {
  const Plant p = quiet_plant(default_plant_model());
  const StepRecord r = run_step_test(p, Channel::kP, 10.0, 60);
  ASSERT_EQ(r.size(), 60u);
  EXPECT_EQ(r.y_p[0], 0.0);
  // Strictly proper plant: the first response shows one tick after the step.
  EXPECT_NEAR(r.y_p[1], -10.0 * (0.8 * 0.3 + 0.2 * 0.7), 1e-12);
  EXPECT_NEAR(r.y_p[59], -10.0, 1e-6);
  EXPECT_EQ(p.tick(), 0);
}

TEST(Sysid, RecoversDefaultPlantExactly) {
  const LtiModel truth = default_plant_model();
  const EraResult res = identify_plant(quiet_plant(truth), 10.0, 120);
  EXPECT_EQ(res.order, 4);
  EXPECT_FALSE(res.reflected);
  EXPECT_LT(testsupport::step_response_gap(truth, res.model, 200), 1e-9);
  const Eigen::MatrixXd g = dc_gain(res.model);
  EXPECT_NEAR(g(0, 1), 0.1, 1e-9);
}

TEST(Sysid, RandomSystemsRoundTrip) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int order = 1 + trial % 4;
    const LtiModel truth = testsupport::random_stable_system(rng, order);
    const EraResult res = identify_plant(quiet_plant(truth), 1.0, 120);
    EXPECT_LE(res.order, order);
    EXPECT_LT(testsupport::step_response_gap(truth, res.model, 100), 1e-6) << "trial " << trial;
  }
}

TEST(Sysid, EraOnExactMarkovParameters) {
  std::mt19937_64 rng(3);
  const LtiModel truth = testsupport::random_stable_system(rng, 3, 0.9, true);
  const EraResult res = era_realize(markov_parameters(truth, 60), 2, 0.1);
  EXPECT_EQ(res.order, 3);
  const Eigen::MatrixXd h1 = markov_parameters(truth, 40);
  const Eigen::MatrixXd h2 = markov_parameters(res.model, 40);
  EXPECT_LT((h1 - h2).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sysid, ValidationAcceptsTruthAndRejectsWrongGain) {
  const LtiModel truth = default_plant_model();
  const Plant p = quiet_plant(truth);
  const StepRecord holdout = run_step_test(p, Channel::kQ, 7.0, 80);
  const FitReport good = validate_model(truth, holdout);
  EXPECT_TRUE(good.pass);
  EXPECT_LT(good.nrmse[0], 1e-12);
  const FitReport bad =
      validate_model(default_plant_model(0.1, (Eigen::Matrix2d() << 1.0, 0.1, 0.1, 0.9).finished()),
                     holdout);
  EXPECT_FALSE(bad.pass);
  EXPECT_NEAR(bad.nrmse[1], 0.1, 0.01);
}

TEST(Sysid, RefusesDistortedOrShortTests) {
  const Plant slow = quiet_plant(default_plant_model(), 8.0, 250.0);
  EXPECT_THROW(run_step_test(slow, Channel::kP, 10.0, 60), SysidError);
  EXPECT_THROW(run_step_test(quiet_plant(default_plant_model()), Channel::kP, 1.0, 10),
               SysidError);
  EXPECT_THROW(era_realize(Eigen::MatrixXd::Zero(2, 80), 2, 0.1), SysidError);
  EXPECT_THROW(era_realize(Eigen::MatrixXd::Zero(2, 79), 2, 0.1), SysidError);
}

TEST(Sysid, UnsettledBaselineIsRejected) {
  PlantConfig cfg;
  DemandProfile d;
  d.sine_amplitude = 40.0;
  d.sine_period = 60.0;
  EXPECT_THROW(run_step_test(Plant(cfg, d, {}, 50.0), Channel::kP, 1.0, 60), SysidError);
}

TEST(Sysid, ReflectionMirrorsUnstablePoles) {
  Eigen::MatrixXd a(2, 2);
  a << 2.0, 0.0, 0.0, 0.5;
  EXPECT_TRUE(reflect_unstable_poles(a));
  EXPECT_NEAR(a(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(a(1, 1), 0.5, 1e-12);
  Eigen::MatrixXd stable = Eigen::MatrixXd::Identity(2, 2) * 0.3;
  EXPECT_FALSE(reflect_unstable_poles(stable));
}

TEST(Sysid, SinglePoleOracle) {
  // y(k) = 0.5 * 0.8^(k-1) for k >= 1 after a unit impulse
  Eigen::MatrixXd h(1, 60);
  h(0, 0) = 0.0;
  for (int k = 1; k < 60; ++k) h(0, k) = 0.5 * std::pow(0.8, k - 1);
  const EraResult res = era_realize(h, 1, 0.1);
  ASSERT_EQ(res.order, 1);
  EXPECT_NEAR(res.model.a(0, 0), 0.8, 1e-6);
  EXPECT_NEAR(res.model.c(0, 0) * res.model.b(0, 0), 0.5, 1e-6);
  EXPECT_EQ(res.model.d(0, 0), 0.0);
}
