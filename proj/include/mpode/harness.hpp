// Oracles and experiment runners.

#ifndef MPODE_HARNESS_HPP
#define MPODE_HARNESS_HPP

#include "mpode/adjoint.hpp"
#include "mpode/dynamics.hpp"
#include "mpode/integrate.hpp"
#include "mpode/precision.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mpode {

// --- scalar decay problem y' = -(theta1 t^2 + theta2 t + theta3) y --------

struct DecayProblem {
  double t_end = 2.65;
  double x = 65504.0 / 180.0;
  Eigen::Vector3d theta{8.0, -11.0, 0x1p-16};

  /// The stiff, range-spanning setup used for the precision table.
  static DecayProblem range_stress() { return {}; }
  /// Smooth problem whose state and gradients stay well inside the float16
  /// normal range for every step count.
  static DecayProblem mild() { return {2.0, 1.3, Eigen::Vector3d{0.3, -0.7, 1.1}}; }
};

/// x exp(-(theta1 t^3/3 + theta2 t^2/2 + theta3 t)), in double.
[[nodiscard]] double analytic_solution(double t, double x, const Eigen::Vector3d& theta);

struct AnalyticGradient {
  double d_x = 0.0;
  Eigen::Vector3d d_theta = Eigen::Vector3d::Zero();
};

/// Gradient of L = y(T)^2 / 2 with respect to x and theta.
[[nodiscard]] AnalyticGradient analytic_gradient(double t_end, double x, const Eigen::Vector3d& theta);

/// ||approx - ref||_inf / ||ref||_inf; the absolute error when ref == 0, and
/// +inf when approx holds a non-finite entry.
[[nodiscard]] double relative_error(const Eigen::VectorXd& approx, const Eigen::VectorXd& ref);
[[nodiscard]] double relative_error(double approx, double ref);

struct FdGradient {
  Eigen::VectorXd d_x;
  Eigen::VectorXd d_theta;
  Eigen::VectorXd d_t;
};

/// Central differences of the float64 discrete objective (same scheme and
/// grid). The step for component v is eps * max(1, |v|). Time points are
/// perturbed only when with_time is set.
[[nodiscard]] FdGradient fd_gradient(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& x,
                                     const TimeGrid& grid, const Params& theta, const Objective& objective,
                                     double eps, bool with_time = false);

// --- error tables ----------------------------------------------------------

struct ErrorRow {
  std::string fmt;
  std::string policy;
  Eigen::Index steps = 0;
  double re_y = 0.0;
  double re_dx = 0.0;
  Eigen::Vector3d re_dtheta = Eigen::Vector3d::Zero();
  std::string status = "ok";
};

/// Header "fmt,policy,N,RE_yT,RE_dy0,RE_dtheta1,RE_dtheta2,RE_dtheta3,status".
void write_error_csv(std::ostream& os, const std::vector<ErrorRow>& rows);

struct TableConfig {
  Scheme scheme = Scheme::rk4();
  Eigen::Index steps = 400;
  DecayProblem problem = DecayProblem::range_stress();
};

/// {float32, float16, bfloat16} x {none, dynamic} against the analytic
/// solution and gradient. High precision is float32 throughout.
[[nodiscard]] std::vector<ErrorRow> run_table(const TableConfig& config);

/// Single (fmt, policy) cell of the table.
[[nodiscard]] ErrorRow run_table_cell(const TableConfig& config, const FloatFormat& fmt_low,
                                      const ScalingPolicy& policy);

enum class SweepField { Decay, Mlp };

struct SweepConfig {
  Scheme scheme = Scheme::rk4();
  std::vector<Eigen::Index> steps{64, 128, 256, 512, 1024, 2048, 4096};
  FloatFormat fmt_low = kFloat16;
  ScalingPolicy policy = ScalingPolicy::dynamic();
  SweepField field = SweepField::Decay;
  DecayProblem problem = DecayProblem::mild();
  std::vector<Eigen::Index> mlp_widths{2, 16, 16, 2};
  double t_end = 1.0;  // MLP only
  std::uint64_t seed = 7;
  bool parallel = true;
};

/// Forward, adjoint and weight-gradient errors against a float64 run of the
/// same scheme on the same grid. For the MLP the three theta columns are the
/// per-layer relative errors (layers 1, 2 and 3 of a two-hidden-layer net).
[[nodiscard]] std::vector<ErrorRow> run_sweep(const SweepConfig& config);

// --- SGD demo --------------------------------------------------------------

struct SgdDemoConfig {
  int iterations = 500;
  FloatFormat fmt_low = kFloat16;
  std::uint64_t seed = 1;
  std::vector<Eigen::Index> widths{2, 16, 2};
  int batch = 16;
  Eigen::Index steps = 8;
  double t_end = 1.0;
  Scheme scheme = Scheme::rk4();
  double learning_rate = 0.2;
  double weight_decay = 0.0;
  double initial_scale = 0x1p16;
  int growth_window = 2000;
};

struct SgdTraceRow {
  int iteration = 0;
  double loss = 0.0;
  double loss_scale = 1.0;
  bool accepted = false;
};

/// Fits a tanh MLP field to terminal states of a linear teacher ODE with
/// loss-scaled mixed-precision SGD. fmt_low == float64 runs the same loop
/// entirely in double (the baseline). The loss column is the float64
/// evaluation of the mean terminal error at the iteration's weights.
[[nodiscard]] std::vector<SgdTraceRow> run_sgd_demo(const SgdDemoConfig& config);

void write_sgd_csv(std::ostream& os, const std::vector<SgdTraceRow>& rows);

// --- generic config-driven solve ------------------------------------------

/// key = value lines; '#' starts a comment. Keys are case-sensitive.
using ConfigMap = std::map<std::string, std::string>;
[[nodiscard]] ConfigMap parse_config(std::istream& is);

struct SolveOutput {
  Trajectory trajectory;
  Gradients gradients;
  BackwardStats stats;
};

/// Runs forward + backward for the experiment described by `config`.
/// Recognised keys: field (decay|linear|mlp), scheme, steps, t_end, fmt_low,
/// fmt_high, policy, theta, x, widths, seed, weights, matrix, terminal
/// (stored|high), running (c_y,c_theta).
[[nodiscard]] SolveOutput run_solve(const ConfigMap& config);

/// "1,2,3" -> {1, 2, 3}
[[nodiscard]] std::vector<double> parse_list(const std::string& text);

}  // namespace mpode

#endif  // MPODE_HARNESS_HPP
