// Discrete adjoint of the mixed-precision forward pass with dynamic adjoint
// scaling.
//
// Walking backwards over the stored low-precision states, each step recomputes
// the increment in low precision and forms the scaled vector-Jacobian product
//
//   [da, dt_i, dh_i, dtheta] = Q_low(S_i a)^T J_Phi(f, y_i, t_i, h_i, theta)
//
// then unscales and accumulates into the high-precision adjoint a, weight
// gradient g and time gradient t'. Under the dynamic policy S_i is a power of
// two, halved while the product is not finite and doubled for the next step
// when the step needed no rescale and ||S a||_inf <= 1 / (2 u_low).

#ifndef MPODE_ADJOINT_HPP
#define MPODE_ADJOINT_HPP

#include "mpode/dynamics.hpp"
#include "mpode/integrate.hpp"
#include "mpode/precision.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace mpode {

/// C(y_N) and its gradient.
struct TerminalCost {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;

  /// 1/2 ||y||^2
  static TerminalCost half_squared_norm();
  /// 1/2 ||y - target||^2
  static TerminalCost half_squared_error(Eigen::VectorXd target);
};

/// R(t, y, theta) and its partials. grad_t may be left empty (treated as 0).
struct RunningCost {
  std::function<double(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_y;
  std::function<Eigen::VectorXd(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_theta;
  std::function<double(double, const Eigen::VectorXd&, const Eigen::VectorXd&)> grad_t;

  /// c_y/2 ||y||^2 + c_theta/2 ||theta||^2
  static RunningCost quadratic(double c_y, double c_theta);
};

/// Which terminal state the cost is evaluated on.
enum class TerminalState { Stored, HighPrecision };

/// L = sum_i w_i R(t_i, y_i, theta) + C(y_N).
struct Objective {
  TerminalCost terminal = TerminalCost::half_squared_norm();
  std::optional<RunningCost> running;
  /// Quadrature weights, length N+1. Empty means composite trapezoid on the
  /// grid. Custom weights are treated as independent of t.
  Eigen::VectorXd weights;
  TerminalState terminal_state = TerminalState::Stored;

  [[nodiscard]] Eigen::VectorXd quadrature(const TimeGrid& grid) const;
};

/// w_0 = h_0/2, w_i = (h_{i-1} + h_i)/2, w_N = h_{N-1}/2.
[[nodiscard]] Eigen::VectorXd trapezoid_weights(const TimeGrid& grid);

/// Value of the discrete objective on a trajectory (in double).
[[nodiscard]] double evaluate_objective(const Trajectory& traj, const Params& theta, const Objective& objective);

enum class ScalingKind { Unscaled, UnscaledSafe, Dynamic };

/// Quantity compared against 1/(2 u_low) when deciding whether to double S
/// after a step that needed no rescale.
enum class GrowthTest {
  ScaledAdjoint,  // ||S a||_inf: keeps S a inside the band set by init_scale
  RawAdjoint,     // ||a||_inf
};

struct ScalingPolicy {
  ScalingKind kind = ScalingKind::Dynamic;
  int k_max = 24;
  double s_floor = 0x1p-24;
  /// Every scale applied to the adjoint is multiplied by 2^scale_shift, while
  /// growth decisions still use the unshifted scale. Zero in normal use;
  /// nonzero values exist to test scale invariance and forced rescales.
  int scale_shift = 0;
  GrowthTest growth_test = GrowthTest::ScaledAdjoint;

  static ScalingPolicy unscaled() { return {ScalingKind::Unscaled}; }
  static ScalingPolicy unscaled_safe() { return {ScalingKind::UnscaledSafe}; }
  static ScalingPolicy dynamic() { return {ScalingKind::Dynamic}; }
  /// "none", "safe" or "dynamic".
  static ScalingPolicy parse(std::string_view name);
};

[[nodiscard]] std::string_view policy_name(ScalingKind kind);

using StepVjp = IncrementRecord::Vjp;

struct Gradients {
  Eigen::VectorXd d_x;
  Eigen::VectorXd d_theta;
  Eigen::VectorXd d_t;  // length N+1
};

/// Instrumentation filled in by backward().
struct BackwardStats {
  std::vector<double> scales;    // S_i used for step i's accepted vjp
  std::vector<int> attempts;     // vjp attempts at step i (1 = no rescale)
  std::uint64_t vjp_overflows = 0;   // range events inside low-precision vjps
  std::uint64_t vjp_underflows = 0;
  bool safe_overflow = false;    // UnscaledSafe hit a non-finite vjp

  [[nodiscard]] int total_rescales() const;
};

class ExhaustedRescale : public std::runtime_error {
 public:
  explicit ExhaustedRescale(Eigen::Index step);
  [[nodiscard]] Eigen::Index step() const { return step_; }

 private:
  Eigen::Index step_;
};

class NonFiniteAccumulator : public std::runtime_error {
 public:
  explicit NonFiniteAccumulator(Eigen::Index step);
  [[nodiscard]] Eigen::Index step() const { return step_; }

 private:
  Eigen::Index step_;
};

/// Power of two S with ||S a||_inf in (1/(2u), 1/u]; 1 when a == 0.
[[nodiscard]] double init_scale(const Eigen::VectorXd& a, const FloatFormat& fmt_low);

/// a_scaled^T J_Phi at one step, every primitive rounded in fmt.
[[nodiscard]] StepVjp scheme_vjp(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& y,
                                 double t, double h, const Eigen::VectorXd& theta_low,
                                 const Eigen::VectorXd& a_scaled, const FloatFormat& fmt);

/// Total derivatives of the discrete objective with respect to the initial
/// state, the parameters and the time points.
///
/// Throws ExhaustedRescale or NonFiniteAccumulator under the checked
/// policies. Under UnscaledSafe a non-finite vjp yields gradients filled with
/// +inf instead of an exception.
[[nodiscard]] Gradients backward(const Scheme& scheme, const VelocityField& field, const Trajectory& traj,
                                 const Params& theta, const Objective& objective, const ScalingPolicy& policy,
                                 const FloatFormat& fmt_low, const FloatFormat& fmt_high,
                                 BackwardStats* stats = nullptr);

/// CSV "component,value" with components x0.., theta0.., t0..
void write_gradients_csv(std::ostream& os, const Gradients& grads);

// --- mixed-precision SGD with loss scaling ---------------------------------

struct LossScaler {
  double scale = 0x1p16;
  int growth_window = 2000;  // consecutive accepted steps before doubling
  int accepted_run = 0;
};

struct SgdConfig {
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
};

/// Gradient of loss_scale * loss at the given master weights.
using ScaledGradientFn = std::function<Eigen::VectorXd(const Params& theta, double loss_scale)>;

struct SgdStepResult {
  bool accepted = false;
  double loss_scale_used = 1.0;
};

/// One SGD step with loss scaling. Non-finite gradients reject the step and
/// halve the scale; otherwise
///   theta <- theta - lr (Q_high(grad) / scale + weight_decay theta)
/// in fmt_high, and the scale doubles after growth_window accepts in a row.
SgdStepResult sgd_step(Params& theta, const ScaledGradientFn& grad_fn, const SgdConfig& config,
                       LossScaler& scaler, const FloatFormat& fmt_high);

}  // namespace mpode

#endif  // MPODE_ADJOINT_HPP
