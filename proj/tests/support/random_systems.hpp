#pragma once

#include "mgchil/lti.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace testsupport {

// Random stable 2-in/2-out system of the given order: poles drawn inside
// |z| <= max_radius (real or complex pairs), mixed by a random similarity.
// The plant applies D over the tick that follows a command, so systems meant
// to drive a Plant are strictly proper; pass feedthrough for a random D.
inline mgchil::LtiModel random_stable_system(std::mt19937_64& rng, int order,
                                             double max_radius = 0.9, bool feedthrough = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), r(0.05, max_radius), th(0.1, 3.0);
  Eigen::MatrixXd blocks = Eigen::MatrixXd::Zero(order, order);
  int i = 0;
  while (i < order) {
    if (i + 1 < order && u(rng) > 0.0) {
      const double rad = r(rng), ang = th(rng);
      blocks(i, i) = blocks(i + 1, i + 1) = rad * std::cos(ang);
      blocks(i, i + 1) = rad * std::sin(ang);
      blocks(i + 1, i) = -rad * std::sin(ang);
      i += 2;
    } else {
      blocks(i, i) = (u(rng) > 0.0 ? 1.0 : -1.0) * r(rng);
      ++i;
    }
  }
  Eigen::MatrixXd t(order, order);
  do {
    for (int a = 0; a < order; ++a)
      for (int b = 0; b < order; ++b) t(a, b) = (a == b ? 2.0 : 0.0) + u(rng);
  } while (std::abs(t.determinant()) < 0.5);
  mgchil::LtiModel m;
  m.a = t * blocks * t.inverse();
  m.b.resize(order, 2);
  m.c.resize(2, order);
  m.d = Eigen::MatrixXd::Zero(2, 2);
  for (int a = 0; a < order; ++a)
    for (int b = 0; b < 2; ++b) {
      m.b(a, b) = u(rng);
      m.c(b, a) = u(rng);
    }
  if (feedthrough)
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) m.d(a, b) = 0.2 * u(rng);
  m.sample_time = 0.1;
  return m;
}

// Largest deviation between two models' responses to a unit step on each input.
inline double step_response_gap(const mgchil::LtiModel& a, const mgchil::LtiModel& b,
                                Eigen::Index n) {
  double gap = 0.0;
  for (Eigen::Index in = 0; in < 2; ++in)
    gap = std::max(gap, (mgchil::step_response(a, in, 1.0, n) - mgchil::step_response(b, in, 1.0, n))
                            .cwiseAbs()
                            .maxCoeff());
  return gap;
}

}  // namespace testsupport
