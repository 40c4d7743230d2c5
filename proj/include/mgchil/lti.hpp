#pragma once

// Discrete-time state-space models shared by the plant simulator, the
// identification pipeline and the controller's demand estimator.
//
//   x(k+1) = A x(k) + B u(k)
//   y(k)   = C x(k) + D u(k)
//
// Inputs are (P_inv, Q_inv) in kW/kvar, outputs are the PCC flow change
// (dP, dQ) caused by those injections.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mgchil {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LtiModel {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  Eigen::MatrixXd c;
  Eigen::MatrixXd d;
  double sample_time = 0.1;

  Eigen::Index n_states() const { return a.rows(); }
  Eigen::Index n_inputs() const { return d.cols(); }
  Eigen::Index n_outputs() const { return d.rows(); }

  bool operator==(const LtiModel&) const = default;
};

inline void check_dimensions(const LtiModel& m) {
  const auto n = m.a.rows();
  if (m.a.cols() != n) throw ModelError("A must be square");
  if (m.b.rows() != n || m.c.cols() != n) throw ModelError("B/C state dimension mismatch");
  if (m.b.cols() != m.d.cols()) throw ModelError("B/D input dimension mismatch");
  if (m.c.rows() != m.d.rows()) throw ModelError("C/D output dimension mismatch");
  if (!(m.sample_time > 0.0)) throw ModelError("sample time must be positive");
}

// Same, plus the 2-in/2-out shape every model in this system has.
inline void check_two_by_two(const LtiModel& m) {
  check_dimensions(m);
  if (m.n_inputs() != 2 || m.n_outputs() != 2) throw ModelError("model must be 2-input 2-output");
}

inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  return a.eigenvalues().cwiseAbs().maxCoeff();
}

inline bool is_stable(const LtiModel& m) { return spectral_radius(m.a) < 1.0; }

// G(1) = C (I - A)^-1 B + D
inline Eigen::MatrixXd dc_gain(const LtiModel& m) {
  check_dimensions(m);
  if (m.n_states() == 0) return m.d;
  const Eigen::MatrixXd i_minus_a = Eigen::MatrixXd::Identity(m.n_states(), m.n_states()) - m.a;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(i_minus_a);
  if (!lu.isInvertible()) throw ModelError("I - A is singular; model has a pole at z = 1");
  return m.c * lu.solve(m.b) + m.d;
}

// Simulates from zero initial state. inputs is n_inputs x N, result n_outputs x N.
inline Eigen::MatrixXd simulate(const LtiModel& m, const Eigen::MatrixXd& inputs) {
  check_dimensions(m);
  if (inputs.rows() != m.n_inputs()) throw ModelError("input row count mismatch");
  Eigen::MatrixXd out(m.n_outputs(), inputs.cols());
  Eigen::VectorXd x = Eigen::VectorXd::Zero(m.n_states());
  for (Eigen::Index k = 0; k < inputs.cols(); ++k) {
    out.col(k) = m.c * x + m.d * inputs.col(k);
    x = m.a * x + m.b * inputs.col(k);
  }
  return out;
}

// Response of every output to a step of `amplitude` on input `input` at k = 0.
inline Eigen::MatrixXd step_response(const LtiModel& m, Eigen::Index input, double amplitude,
                                     Eigen::Index n_samples) {
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(m.n_inputs(), n_samples);
  u.row(input).setConstant(amplitude);
  return simulate(m, u);
}

// Markov parameters h(0) = D, h(k) = C A^(k-1) B, stacked as n_outputs x (n_inputs * N).
inline Eigen::MatrixXd markov_parameters(const LtiModel& m, Eigen::Index count) {
  check_dimensions(m);
  const auto p = m.n_outputs();
  const auto q = m.n_inputs();
  Eigen::MatrixXd h(p, q * count);
  if (count == 0) return h;
  h.block(0, 0, p, q) = m.d;
  Eigen::MatrixXd ak_b = m.b;
  for (Eigen::Index k = 1; k < count; ++k) {
    h.block(0, k * q, p, q) = m.c * ak_b;
    ak_b = m.a * ak_b;
  }
  return h;
}

// Runs a model one sample at a time. The plant and the demand estimator both
// hold one of these.
class LtiFilter {
 public:
  LtiFilter() = default;
  explicit LtiFilter(LtiModel model)
      : model_(std::move(model)), x_(Eigen::VectorXd::Zero(model_.n_states())) {
    check_dimensions(model_);
  }

  const LtiModel& model() const { return model_; }
  const Eigen::VectorXd& state() const { return x_; }
  void set_state(const Eigen::VectorXd& x) { x_ = x; }
  void reset() { x_.setZero(); }

  Eigen::VectorXd output(const Eigen::VectorXd& u) const { return model_.c * x_ + model_.d * u; }
  void advance(const Eigen::VectorXd& u) { x_ = model_.a * x_ + model_.b * u; }

 private:
  LtiModel model_;
  Eigen::VectorXd x_;
};

// Default microgrid coupling: every channel shares a second-order response
// with a dominant pole at 0.7 and a fast pole at 0.3 (unit DC gain, no
// overshoot, strictly proper so the plant has a one-step input delay),
// scaled by the 2x2 DC gain matrix `gains`.
inline LtiModel default_plant_model(double sample_time = 0.1,
                                    const Eigen::Matrix2d& gains = (Eigen::Matrix2d() << 1.0, 0.1,
                                                                    0.1, 1.0)
                                                                       .finished()) {
  constexpr double kSlowPole = 0.7;
  constexpr double kFastPole = 0.3;
  constexpr double kSlowWeight = 0.8;
  constexpr double kFastWeight = 0.2;

  LtiModel m;
  m.sample_time = sample_time;
  m.a = Eigen::MatrixXd::Zero(4, 4);
  m.b = Eigen::MatrixXd::Zero(4, 2);
  m.c = Eigen::MatrixXd::Zero(2, 4);
  m.d = Eigen::MatrixXd::Zero(2, 2);
  for (int j = 0; j < 2; ++j) {
    m.a(2 * j, 2 * j) = kSlowPole;
    m.a(2 * j + 1, 2 * j + 1) = kFastPole;
    m.b(2 * j, j) = 1.0 - kSlowPole;
    m.b(2 * j + 1, j) = 1.0 - kFastPole;
    for (int i = 0; i < 2; ++i) {
      m.c(i, 2 * j) = gains(i, j) * kSlowWeight;
      m.c(i, 2 * j + 1) = gains(i, j) * kFastWeight;
    }
  }
  return m;
}

// Plain-text model file:
//
//   # optional comment lines
//   <n_states> <n_inputs> <n_outputs> <sample_time>
//   A (n x n, row-major), B (n x m), C (p x n), D (p x m)
//
// Values are whitespace separated; line breaks are not significant.
inline void write_model(std::ostream& os, const LtiModel& m) {
  check_dimensions(m);
  os << "# state-space model: dims header, then A B C D row-major\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << m.n_states() << ' ' << m.n_inputs() << ' ' << m.n_outputs() << ' ' << m.sample_time
     << '\n';
  auto put = [&os](const Eigen::MatrixXd& mat) {
    for (Eigen::Index r = 0; r < mat.rows(); ++r) {
      for (Eigen::Index c = 0; c < mat.cols(); ++c) os << (c ? " " : "") << mat(r, c);
      os << '\n';
    }
  };
  put(m.a);
  put(m.b);
  put(m.c);
  put(m.d);
}

inline LtiModel read_model(std::istream& is) {
  std::stringstream body;
  std::string line;
  while (std::getline(is, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    body << line << '\n';
  }
  long n = -1, q = -1, p = -1;
  LtiModel m;
  if (!(body >> n >> q >> p >> m.sample_time) || n < 0 || q <= 0 || p <= 0)
    throw ModelError("model file: bad dimensions header");
  auto get = [&body](Eigen::MatrixXd& mat, long rows, long cols, const char* name) {
    mat.resize(rows, cols);
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c)
        if (!(body >> mat(r, c))) throw ModelError(std::string("model file: truncated ") + name);
  };
  get(m.a, n, n, "A");
  get(m.b, n, q, "B");
  get(m.c, p, n, "C");
  get(m.d, p, q, "D");
  double extra;
  if (body >> extra) throw ModelError("model file: trailing values");
  check_dimensions(m);
  return m;
}

inline void save_model(const std::string& path, const LtiModel& m) {
  std::ofstream os(path);
  if (!os) throw ModelError("cannot open " + path + " for writing");
  write_model(os, m);
}

inline LtiModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ModelError("cannot open model file " + path);
  return read_model(is);
}

}  // namespace mgchil
