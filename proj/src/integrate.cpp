#include "mpode/integrate.hpp"

#include "mpode/csv.hpp"

#include <cmath>
#include <ostream>
#include <string>
#include <utility>

namespace mpode {

std::vector<double> Scheme::nodes() const {
  if (kind == SchemeKind::Euler) return {0.0};
  return {0.0, 0.5, 0.5, 1.0};
}

std::vector<double> Scheme::weights() const {
  if (kind == SchemeKind::Euler) return {1.0};
  return {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};
}

Scheme Scheme::parse(std::string_view name) {
  if (name == "euler") return euler();
  if (name == "rk4") return rk4();
  throw std::invalid_argument("unknown scheme: " + std::string(name));
}

TimeGrid::TimeGrid(Eigen::VectorXd t) : t_(std::move(t)) {
  if (t_.size() < 2) throw std::invalid_argument("TimeGrid: need at least two points");
  if (!(t_[0] >= 0.0)) throw std::invalid_argument("TimeGrid: t_0 must be nonnegative");
  for (Eigen::Index i = 0; i + 1 < t_.size(); ++i) {
    if (!(t_[i + 1] > t_[i]) || !std::isfinite(t_[i + 1])) {
      throw std::invalid_argument("TimeGrid: points must be finite and strictly increasing");
    }
  }
}

TimeGrid TimeGrid::equidistant(double t_end, Eigen::Index steps, const FloatFormat& fmt, double t0) {
  if (steps < 1) throw std::invalid_argument("TimeGrid: need at least one step");
  Eigen::VectorXd t(steps + 1);
  for (Eigen::Index i = 0; i <= steps; ++i) {
    t[i] = quantize(t0 + (t_end - t0) * static_cast<double>(i) / static_cast<double>(steps), fmt);
  }
  return TimeGrid(std::move(t));
}

bool IncrementRecord::Vjp::finite() const {
  return all_finite(dy) && std::isfinite(dt) && std::isfinite(dh) && all_finite(dtheta);
}

IncrementRecord::IncrementRecord(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& y,
                                 double t, double h, const Eigen::VectorXd& theta_low, const FloatFormat& fmt)
    : scheme_(scheme), arith_(fmt) {
  h_full_ = arith_.round(h);
  h_half_ = arith_.round(0.5 * h);

  tapes_.push_back(field.linearize(t, y, theta_low, fmt));
  k_[0] = tapes_[0]->output();
  if (scheme_.kind == SchemeKind::Euler) {
    increment_ = k_[0];
    return;
  }

  // Stage times stay in the carrier; the field rounds them where needed.
  const double t_mid = t + 0.5 * h;
  const double t_end = t + h;

  tapes_.push_back(field.linearize(t_mid, arith_.axpy(h_half_, k_[0], y), theta_low, fmt));
  k_[1] = tapes_[1]->output();
  tapes_.push_back(field.linearize(t_mid, arith_.axpy(h_half_, k_[1], y), theta_low, fmt));
  k_[2] = tapes_[2]->output();
  tapes_.push_back(field.linearize(t_end, arith_.axpy(h_full_, k_[2], y), theta_low, fmt));
  k_[3] = tapes_[3]->output();

  // k1/6 + k2/3 + k3/3 + k4/6, each term rounded before the sum. Forming
  // k1 + 2 k2 + 2 k3 + k4 first can overflow where the increment itself fits.
  const Eigen::Index n = y.size();
  increment_.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double s = arith_.add(arith_.div(k_[0][j], 6.0), arith_.div(k_[1][j], 3.0));
    s = arith_.add(s, arith_.div(k_[2][j], 3.0));
    increment_[j] = arith_.add(s, arith_.div(k_[3][j], 6.0));
  }
}

IncrementRecord::Vjp IncrementRecord::vjp(const Eigen::VectorXd& a) const {
  Vjp r;
  if (scheme_.kind == SchemeKind::Euler) {
    FieldVjp v = tapes_[0]->vjp(a);
    r.dy = std::move(v.dy);
    r.dt = v.dt;
    r.dh = 0.0;
    r.dtheta = std::move(v.dtheta);
    return r;
  }

  const Eigen::Index n = a.size();
  Eigen::VectorXd sixth(n);
  Eigen::VectorXd third(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    sixth[j] = arith_.div(a[j], 6.0);
    third[j] = arith_.div(a[j], 3.0);
  }
  std::array<Eigen::VectorXd, 4> k_bar{sixth, third, third, sixth};

  // Stage s (s = 3, 2, 1) evaluated at y + c_s h k_{s-1}; c_s h is h_full_ for
  // the last stage and h_half_ otherwise.
  Eigen::VectorXd y_bar = Eigen::VectorXd::Zero(n);
  double t_bar = 0.0;
  double h_bar = 0.0;
  Eigen::VectorXd theta_bar;

  for (int s = 3; s >= 0; --s) {
    FieldVjp v = tapes_[s]->vjp(k_bar[s]);
    y_bar = arith_.add(y_bar, v.dy);
    t_bar = arith_.add(t_bar, v.dt);
    theta_bar = s == 3 ? std::move(v.dtheta) : arith_.add(theta_bar, v.dtheta);
    if (s == 0) break;

    const double coeff = s == 3 ? h_full_ : h_half_;
    k_bar[s - 1] = arith_.axpy(coeff, v.dy, k_bar[s - 1]);
    // d(stage state)/dh = c_s k_{s-1}, d(stage time)/dh = c_s
    const double via_state = arith_.dot(v.dy, k_[s - 1]);
    if (s == 3) {
      h_bar = arith_.add(h_bar, arith_.add(via_state, v.dt));
    } else {
      h_bar = arith_.add(h_bar, arith_.mul(0.5, arith_.add(via_state, v.dt)));
    }
  }

  r.dy = std::move(y_bar);
  r.dt = t_bar;
  r.dh = h_bar;
  r.dtheta = std::move(theta_bar);
  return r;
}

Eigen::VectorXd increment(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& y, double t,
                          double h, const Eigen::VectorXd& theta_low, const FloatFormat& fmt) {
  return IncrementRecord(scheme, field, y, t, h, theta_low, fmt).increment();
}

NonFiniteState::NonFiniteState(Eigen::Index step, Trajectory partial)
    : std::runtime_error("non-finite state at step " + std::to_string(step)),
      step_(step),
      partial_(std::move(partial)) {}

Trajectory forward(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& x,
                   const TimeGrid& grid, const Params& theta, const FloatFormat& fmt_low,
                   const FloatFormat& fmt_high) {
  if (x.size() != field.dim_state()) throw std::invalid_argument("forward: state size mismatch");
  if (theta.size() != field.dim_params()) throw std::invalid_argument("forward: parameter size mismatch");
  if (!all_finite(x)) throw std::invalid_argument("forward: initial state must be finite");

  const LowArith high(fmt_high);
  const Eigen::VectorXd theta_low = theta.quantized(fmt_low);
  const Eigen::Index steps = grid.steps();

  Trajectory traj;
  traj.grid = grid;
  traj.fmt_low = fmt_low;
  traj.fmt_high = fmt_high;
  traj.states.reserve(static_cast<std::size_t>(steps + 1));

  Eigen::VectorXd y = quantize(x, fmt_high);
  traj.states.push_back(quantize(y, fmt_low));

  for (Eigen::Index i = 0; i < steps; ++i) {
    const double h = grid.step(i, fmt_high);
    const Eigen::VectorXd dy = increment(scheme, field, traj.states.back(), grid[i], h, theta_low, fmt_low);
    y = high.axpy(h, quantize(dy, fmt_high), y);
    traj.states.push_back(quantize(y, fmt_low));
    if (!all_finite(traj.states.back())) {
      traj.final_hp = y;
      throw NonFiniteState(i + 1, std::move(traj));
    }
  }
  traj.final_hp = std::move(y);
  return traj;
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  const Eigen::Index n = traj.states.empty() ? 0 : traj.states.front().size();
  os << "i,t";
  for (Eigen::Index j = 0; j < n; ++j) os << ",y" << j;
  os << '\n';
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    os << i << ',' << format_real(traj.grid[static_cast<Eigen::Index>(i)]);
    for (Eigen::Index j = 0; j < n; ++j) os << ',' << format_real(traj.states[i][j]);
    os << '\n';
  }
}

}  // namespace mpode
