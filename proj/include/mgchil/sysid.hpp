#pragma once

// Step-test identification of the inverter-to-PCC model.
//
// Pipeline: run_step_test on each input channel -> step_to_impulse
// (first differences) -> era_realize (block-Hankel SVD realization).

#include "mgchil/lti.hpp"
#include "mgchil/plant.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

namespace mgchil {

struct SysidError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One step test. Index 0 is the tick at which the step is applied; outputs are
// PCC deviations from the pre-step baseline (kW, kvar).
struct StepRecord {
  Channel channel = Channel::kP;
  double amplitude = 0.0;
  std::vector<double> u;
  std::vector<double> y_p;
  std::vector<double> y_q;
  double sample_time = 0.1;

  std::size_t size() const { return u.size(); }
};

inline constexpr int kBaselineSamples = 10;
inline constexpr std::size_t kMinStepRecordLength = 50;

// Holds the plant's current command for kBaselineSamples ticks, then steps
// `channel` by `amplitude`. The plant is taken by value; the caller's copy is
// untouched.
inline StepRecord run_step_test(Plant plant, Channel channel, double amplitude,
                                std::size_t n_samples, double settle_tolerance = 1e-9) {
  if (n_samples < kMinStepRecordLength) throw SysidError("step record needs at least 50 samples");
  const double hold_p = plant.state().p_inv_applied;
  const double hold_q = plant.state().q_inv_applied;

  std::array<std::vector<double>, 2> pre;
  for (int i = 0; i < kBaselineSamples; ++i) {
    pre[0].push_back(plant.state().p_pcc);
    pre[1].push_back(plant.state().q_pcc);
    plant.step(hold_p, hold_q);
  }
  std::array<double, 2> baseline{};
  for (int ch = 0; ch < 2; ++ch) {
    double sum = 0.0;
    for (double v : pre[ch]) sum += v;
    baseline[ch] = sum / kBaselineSamples;
    const auto [lo, hi] = std::minmax_element(pre[ch].begin(), pre[ch].end());
    if (*hi - *lo > settle_tolerance * std::max(1.0, std::abs(baseline[ch])))
      throw SysidError("simulator not settled before step test");
  }

  StepRecord rec;
  rec.channel = channel;
  rec.amplitude = amplitude;
  rec.sample_time = plant.sample_time();
  const double cmd_p = hold_p + (channel == Channel::kP ? amplitude : 0.0);
  const double cmd_q = hold_q + (channel == Channel::kQ ? amplitude : 0.0);
  for (std::size_t k = 0; k < n_samples; ++k) {
    rec.y_p.push_back(plant.state().p_pcc - baseline[0]);
    rec.y_q.push_back(plant.state().q_pcc - baseline[1]);
    const auto& s = plant.step(cmd_p, cmd_q);
    const double applied = channel == Channel::kP ? s.p_inv_applied - hold_p
                                                  : s.q_inv_applied - hold_q;
    if (std::abs(applied - amplitude) > 1e-12 * std::max(1.0, std::abs(amplitude)))
      throw SysidError("inverter limits distort the step; raise ramp/amplitude limits");
    rec.u.push_back(applied);
  }
  return rec;
}

// h(k) = (y(k) - y(k-1)) / amplitude with y(-1) = 0. Rows are (P, Q) outputs.
inline Eigen::MatrixXd step_to_impulse(const StepRecord& rec) {
  if (rec.amplitude == 0.0) throw SysidError("step amplitude must be nonzero");
  if (rec.y_p.size() != rec.y_q.size()) throw SysidError("output sequences differ in length");
  const auto n = static_cast<Eigen::Index>(rec.y_p.size());
  Eigen::MatrixXd h(2, n);
  double prev_p = 0.0, prev_q = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    h(0, k) = (rec.y_p[k] - prev_p) / rec.amplitude;
    h(1, k) = (rec.y_q[k] - prev_q) / rec.amplitude;
    prev_p = rec.y_p[k];
    prev_q = rec.y_q[k];
  }
  return h;
}

struct EraOptions {
  int order_max = 8;
  double sv_tolerance = 1e-8;  // relative to the largest Hankel singular value
  int max_block_dim = 50;
};

struct EraResult {
  LtiModel model;
  Eigen::VectorXd singular_values;
  int order = 0;
  bool reflected = false;  // an unstable eigenvalue was mirrored into the unit disc
};

// Mirrors eigenvalues with |z| >= 1 to 1/conj(z) (nudged inside if on the circle).
inline bool reflect_unstable_poles(Eigen::MatrixXd& a) {
  if (a.size() == 0 || spectral_radius(a) < 1.0) return false;
  Eigen::EigenSolver<Eigen::MatrixXd> es(a);
  Eigen::VectorXcd lambda = es.eigenvalues();
  for (auto& l : lambda) {
    const double mag = std::abs(l);
    if (mag >= 1.0) {
      l = l / (mag * mag);
      if (std::abs(l) >= 1.0) l *= (1.0 - 1e-6);
    }
  }
  const Eigen::MatrixXcd v = es.eigenvectors();
  a = (v * lambda.asDiagonal() * v.inverse()).real();
  return true;
}

// Eigensystem realization from stacked Markov parameters
// markov = [h(0) h(1) ... h(N-1)], each block n_outputs x n_inputs.
inline EraResult era_realize(const Eigen::MatrixXd& markov, Eigen::Index n_inputs,
                             double sample_time, const EraOptions& opt = {}) {
  if (n_inputs <= 0 || markov.cols() % n_inputs != 0)
    throw SysidError("markov parameter block width mismatch");
  const Eigen::Index p = markov.rows();
  const Eigen::Index q = n_inputs;
  const Eigen::Index count = markov.cols() / q;
  if (count < 2 * opt.order_max + 2) throw SysidError("not enough Markov parameters for ERA");

  auto h = [&](Eigen::Index k) { return markov.block(0, k * q, p, q); };
  const Eigen::Index dim = std::min<Eigen::Index>((count - 1) / 2, opt.max_block_dim);
  Eigen::MatrixXd h0(p * dim, q * dim), h1(p * dim, q * dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) {
      h0.block(i * p, j * q, p, q) = h(i + j + 1);
      h1.block(i * p, j * q, p, q) = h(i + j + 2);
    }
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h0, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  int order = 0;
  if (sv.size() > 0 && sv(0) > 0.0) {
    while (order < sv.size() && order < opt.order_max && sv(order) > opt.sv_tolerance * sv(0))
      ++order;
  }
  if (order < 1) throw SysidError("Hankel matrix has rank 0; nothing to realize");

  const Eigen::MatrixXd un = svd.matrixU().leftCols(order);
  const Eigen::MatrixXd vn = svd.matrixV().leftCols(order);
  const Eigen::VectorXd s_sqrt = sv.head(order).cwiseSqrt();
  const Eigen::VectorXd s_isqrt = s_sqrt.cwiseInverse();

  EraResult res;
  res.singular_values = sv;
  res.order = order;
  LtiModel& m = res.model;
  m.sample_time = sample_time;
  m.a = s_isqrt.asDiagonal() * (un.transpose() * h1 * vn) * s_isqrt.asDiagonal();
  m.b = (s_sqrt.asDiagonal() * vn.transpose()).leftCols(q);
  m.c = (un * s_sqrt.asDiagonal()).topRows(p);
  m.d = h(0);
  res.reflected = reflect_unstable_poles(m.a);
  return res;
}

// 2x2 impulse set from one P-step and one Q-step record. The model maps
// injection to PCC flow reduction, so the PCC deviations are negated.
inline Eigen::MatrixXd markov_from_records(const StepRecord& p_step, const StepRecord& q_step) {
  if (p_step.channel != Channel::kP || q_step.channel != Channel::kQ)
    throw SysidError("need one P-channel and one Q-channel record");
  const Eigen::MatrixXd hp = step_to_impulse(p_step);
  const Eigen::MatrixXd hq = step_to_impulse(q_step);
  const Eigen::Index n = std::min(hp.cols(), hq.cols());
  Eigen::MatrixXd markov(2, 2 * n);
  for (Eigen::Index k = 0; k < n; ++k) {
    markov.col(2 * k) = -hp.col(k);
    markov.col(2 * k + 1) = -hq.col(k);
  }
  return markov;
}

inline EraResult identify_from_records(const StepRecord& p_step, const StepRecord& q_step,
                                       const EraOptions& opt = {}) {
  return era_realize(markov_from_records(p_step, q_step), 2, p_step.sample_time, opt);
}

// Both step tests from the same settled operating point.
inline EraResult identify_plant(const Plant& plant, double amplitude = 10.0,
                                std::size_t n_samples = 100, const EraOptions& opt = {}) {
  const auto rp = run_step_test(plant, Channel::kP, amplitude, n_samples);
  const auto rq = run_step_test(plant, Channel::kQ, amplitude, n_samples);
  return identify_from_records(rp, rq, opt);
}

struct FitReport {
  std::array<double, 2> nrmse{};  // P, Q outputs
  bool pass = false;
};

inline constexpr double kFitPassThreshold = 0.02;

// Normalized RMS error of the model's predicted PCC deviation against a
// held-out step record: ||pred - y|| / ||y|| per output.
inline FitReport validate_model(const LtiModel& model, const StepRecord& holdout) {
  if (holdout.size() < 10 || holdout.y_p.size() != holdout.size() ||
      holdout.y_q.size() != holdout.size())
    throw SysidError("holdout record too short (need >= 10 samples)");
  check_two_by_two(model);
  const auto n = static_cast<Eigen::Index>(holdout.size());
  Eigen::MatrixXd u(2, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    u(0, k) = holdout.channel == Channel::kP ? holdout.u[k] : 0.0;
    u(1, k) = holdout.channel == Channel::kQ ? holdout.u[k] : 0.0;
  }
  const Eigen::MatrixXd pred = -simulate(model, u);
  FitReport rep;
  const std::array<const std::vector<double>*, 2> meas{&holdout.y_p, &holdout.y_q};
  for (int ch = 0; ch < 2; ++ch) {
    double num = 0.0, den = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double y = (*meas[ch])[k];
      num += (pred(ch, k) - y) * (pred(ch, k) - y);
      den += y * y;
    }
    if (num == 0.0) rep.nrmse[ch] = 0.0;
    else rep.nrmse[ch] = std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
  }
  rep.pass = rep.nrmse[0] < kFitPassThreshold && rep.nrmse[1] < kFitPassThreshold;
  return rep;
}

}  // namespace mgchil
