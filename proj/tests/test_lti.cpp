#include "mgchil/lti.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace mgchil;

namespace {

LtiModel scalar_model(double a, double b, double c, double d) {
  LtiModel m;
  m.a = Eigen::MatrixXd::Constant(1, 1, a);
  m.b = Eigen::MatrixXd::Constant(1, 1, b);
  m.c = Eigen::MatrixXd::Constant(1, 1, c);
  m.d = Eigen::MatrixXd::Constant(1, 1, d);
  return m;
}

}  // namespace

TEST(Lti, ScalarSimulationMatchesHandRecursion) {
  // x' = 0.5x + u, y = 2x + 0.25u with u = 1, 0, 3
  const LtiModel m = scalar_model(0.5, 1.0, 2.0, 0.25);
  Eigen::MatrixXd u(1, 3);
  u << 1, 0, 3;
  const Eigen::MatrixXd y = simulate(m, u);
  // x: 0 -> 1 -> 0.5 -> 3.25 ; y(k) = 2 x(k) + 0.25 u(k)
  EXPECT_DOUBLE_EQ(y(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(y(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(y(0, 2), 1.0 + 0.75);
}

TEST(Lti, DefaultPlantDcGainIsCouplingMatrix) {
  const LtiModel m = default_plant_model();
  const Eigen::MatrixXd g = dc_gain(m);
  EXPECT_NEAR(g(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(g(0, 1), 0.1, 1e-12);
  EXPECT_NEAR(g(1, 0), 0.1, 1e-12);
  EXPECT_NEAR(g(1, 1), 1.0, 1e-12);
  EXPECT_TRUE(is_stable(m));
  EXPECT_NEAR(spectral_radius(m.a), 0.7, 1e-12);
}

TEST(Lti, DefaultPlantStepHasNoOvershootAndNoFeedthrough) {
  const LtiModel m = default_plant_model();
  const Eigen::MatrixXd y = step_response(m, 0, 10.0, 200);
  EXPECT_EQ(y(0, 0), 0.0);
  for (Eigen::Index k = 1; k < y.cols(); ++k) {
    EXPECT_GE(y(0, k), y(0, k - 1));
    EXPECT_LE(y(0, k), 10.0 + 1e-12);
  }
  EXPECT_NEAR(y(0, 199), 10.0, 1e-9);
  EXPECT_NEAR(y(1, 199), 1.0, 1e-9);
}

TEST(Lti, MarkovParametersMatchImpulseResponse) {
  const LtiModel m = default_plant_model();
  const Eigen::Index n = 30;
  const Eigen::MatrixXd h = markov_parameters(m, n);
  for (Eigen::Index j = 0; j < 2; ++j) {
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(2, n);
    u(j, 0) = 1.0;
    const Eigen::MatrixXd y = simulate(m, u);
    for (Eigen::Index k = 0; k < n; ++k)
      for (Eigen::Index i = 0; i < 2; ++i) EXPECT_NEAR(h(i, 2 * k + j), y(i, k), 1e-15);
  }
}

TEST(Lti, PoleAtOneHasNoDcGain) {
  EXPECT_THROW(dc_gain(scalar_model(1.0, 1.0, 1.0, 0.0)), ModelError);
}

TEST(Lti, DimensionChecks) {
  LtiModel m = default_plant_model();
  m.b = Eigen::MatrixXd::Zero(3, 2);
  EXPECT_THROW(check_dimensions(m), ModelError);
  LtiModel s = scalar_model(0.5, 1, 1, 0);
  EXPECT_THROW(check_two_by_two(s), ModelError);
  s.sample_time = 0.0;
  EXPECT_THROW(check_dimensions(s), ModelError);
}

TEST(Lti, ModelFileRoundTripIsExact) {
  LtiModel m = default_plant_model(0.1, (Eigen::Matrix2d() << 1.0 / 3.0, 0.1, -0.2, 0.9).finished());
  m.d(0, 1) = 1e-17;
  std::stringstream ss;
  write_model(ss, m);
  const LtiModel back = read_model(ss);
  EXPECT_TRUE(back == m);
}

TEST(Lti, ModelFileRejectsTruncatedAndTrailingData) {
  std::stringstream a("# c\n1 1 1 0.1\n0.5 1 1\n");
  EXPECT_THROW(read_model(a), ModelError);
  std::stringstream b("1 1 1 0.1\n0.5 1 1 0 7\n");
  EXPECT_THROW(read_model(b), ModelError);
}

TEST(Lti, FilterMatchesBatchSimulation) {
  const LtiModel m = default_plant_model();
  Eigen::MatrixXd u = Eigen::MatrixXd::Random(2, 50);
  const Eigen::MatrixXd y = simulate(m, u);
  LtiFilter f(m);
  for (Eigen::Index k = 0; k < u.cols(); ++k) {
    const Eigen::VectorXd out = f.output(u.col(k));
    EXPECT_NEAR(out(0), y(0, k), 1e-14);
    EXPECT_NEAR(out(1), y(1, k), 1e-14);
    f.advance(u.col(k));
  }
}
