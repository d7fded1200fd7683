// Explicit single-step schemes and the mixed-precision forward pass.
//
//   y      <- Q_high(x)
//   dy     <- Phi(f, Q_low(y), t_i, h_i, Q_low(theta))      all in fmt_low
//   y      <- y + h_i * Q_high(dy)                          in fmt_high
//   y_{i+1} <- Q_low(y)                                      stored

#ifndef MPODE_INTEGRATE_HPP
#define MPODE_INTEGRATE_HPP

#include "mpode/dynamics.hpp"
#include "mpode/precision.hpp"

#include <Eigen/Dense>

#include <array>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace mpode {

enum class SchemeKind { Euler, RK4 };

struct Scheme {
  SchemeKind kind = SchemeKind::RK4;

  [[nodiscard]] int stages() const { return kind == SchemeKind::Euler ? 1 : 4; }
  /// Butcher nodes c and weights b.
  [[nodiscard]] std::vector<double> nodes() const;
  [[nodiscard]] std::vector<double> weights() const;
  [[nodiscard]] std::string_view name() const { return kind == SchemeKind::Euler ? "euler" : "rk4"; }

  static Scheme euler() { return {SchemeKind::Euler}; }
  static Scheme rk4() { return {SchemeKind::RK4}; }
  /// "euler" or "rk4"; throws std::invalid_argument otherwise.
  static Scheme parse(std::string_view name);
};

/// Strictly increasing time points t_0 < ... < t_N with t_0 >= 0.
class TimeGrid {
 public:
  TimeGrid() = default;
  /// Throws std::invalid_argument unless the points are a valid partition.
  explicit TimeGrid(Eigen::VectorXd t);

  /// N equal steps on [t0, t_end], every point rounded to fmt.
  static TimeGrid equidistant(double t_end, Eigen::Index steps, const FloatFormat& fmt = kFloat64,
                              double t0 = 0.0);

  [[nodiscard]] const Eigen::VectorXd& points() const { return t_; }
  [[nodiscard]] double operator[](Eigen::Index i) const { return t_[i]; }
  [[nodiscard]] Eigen::Index steps() const { return t_.size() - 1; }
  /// h_i = t_{i+1} - t_i rounded in fmt.
  [[nodiscard]] double step(Eigen::Index i, const FloatFormat& fmt) const {
    return quantize(t_[i + 1] - t_[i], fmt);
  }

 private:
  Eigen::VectorXd t_;
};

/// One step's recorded increment: the stage evaluations and everything the
/// reverse sweep needs. vjp() can be replayed with different cotangents
/// without evaluating the field again.
class IncrementRecord {
 public:
  struct Vjp {
    Eigen::VectorXd dy;      // a^T dPhi/dy
    double dt = 0.0;         // a^T dPhi/dt
    double dh = 0.0;         // a^T dPhi/dh
    Eigen::VectorXd dtheta;  // a^T dPhi/dtheta

    [[nodiscard]] bool finite() const;
  };

  IncrementRecord(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& y, double t,
                  double h, const Eigen::VectorXd& theta_low, const FloatFormat& fmt);

  [[nodiscard]] const Eigen::VectorXd& increment() const { return increment_; }
  [[nodiscard]] Vjp vjp(const Eigen::VectorXd& cotangent) const;

 private:
  Scheme scheme_;
  LowArith arith_;
  double h_full_ = 0.0;  // Q_low(h)
  double h_half_ = 0.0;  // Q_low(h/2)
  std::vector<std::unique_ptr<FieldTape>> tapes_;
  std::array<Eigen::VectorXd, 4> k_;
  Eigen::VectorXd increment_;
};

/// Phi(f, y, t, h, theta) computed entirely in fmt.
[[nodiscard]] Eigen::VectorXd increment(const Scheme& scheme, const VelocityField& field,
                                        const Eigen::VectorXd& y, double t, double h,
                                        const Eigen::VectorXd& theta_low, const FloatFormat& fmt);

struct Trajectory {
  std::vector<Eigen::VectorXd> states;  // Q_low(y_i), i = 0..N
  TimeGrid grid;
  Eigen::VectorXd final_hp;  // high-precision accumulator after the last step
  FloatFormat fmt_low = kFloat64;
  FloatFormat fmt_high = kFloat64;

  [[nodiscard]] Eigen::Index steps() const { return grid.steps(); }
};

/// Raised when a stored state contains inf/NaN. The partial trajectory (states
/// up to and including the offending one) stays available.
class NonFiniteState : public std::runtime_error {
 public:
  NonFiniteState(Eigen::Index step, Trajectory partial);
  [[nodiscard]] Eigen::Index step() const { return step_; }
  [[nodiscard]] const Trajectory& partial() const { return partial_; }

 private:
  Eigen::Index step_;
  Trajectory partial_;
};

[[nodiscard]] Trajectory forward(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& x,
                                 const TimeGrid& grid, const Params& theta, const FloatFormat& fmt_low,
                                 const FloatFormat& fmt_high);

/// CSV with header "i,t,y0,...,y{n-1}", one row per stored state, values
/// printed with 17 significant digits.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);

}  // namespace mpode

#endif  // MPODE_INTEGRATE_HPP
