#include "mpode/adjoint.hpp"

#include "mpode/csv.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>

namespace mpode {

TerminalCost TerminalCost::half_squared_norm() {
  return {[](const Eigen::VectorXd& y) { return 0.5 * y.squaredNorm(); },
          [](const Eigen::VectorXd& y) { return Eigen::VectorXd(y); }};
}

TerminalCost TerminalCost::half_squared_error(Eigen::VectorXd target) {
  return {[target](const Eigen::VectorXd& y) { return 0.5 * (y - target).squaredNorm(); },
          [target](const Eigen::VectorXd& y) { return Eigen::VectorXd(y - target); }};
}

RunningCost RunningCost::quadratic(double c_y, double c_theta) {
  RunningCost r;
  r.value = [=](double, const Eigen::VectorXd& y, const Eigen::VectorXd& th) {
    return 0.5 * c_y * y.squaredNorm() + 0.5 * c_theta * th.squaredNorm();
  };
  r.grad_y = [=](double, const Eigen::VectorXd& y, const Eigen::VectorXd&) { return Eigen::VectorXd(c_y * y); };
  r.grad_theta = [=](double, const Eigen::VectorXd&, const Eigen::VectorXd& th) {
    return Eigen::VectorXd(c_theta * th);
  };
  return r;
}

Eigen::VectorXd trapezoid_weights(const TimeGrid& grid) {
  const Eigen::Index n = grid.steps();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = grid[i + 1] - grid[i];
    w[i] += 0.5 * h;
    w[i + 1] += 0.5 * h;
  }
  return w;
}

Eigen::VectorXd Objective::quadrature(const TimeGrid& grid) const {
  if (weights.size() == 0) return trapezoid_weights(grid);
  if (weights.size() != grid.steps() + 1) throw std::invalid_argument("Objective: weight count must be N+1");
  return weights;
}

namespace {

const Eigen::VectorXd& terminal_point(const Trajectory& traj, const Objective& objective) {
  return objective.terminal_state == TerminalState::HighPrecision ? traj.final_hp : traj.states.back();
}

Eigen::VectorXd filled(Eigen::Index n, double v) { return Eigen::VectorXd::Constant(n, v); }

}  // namespace

double evaluate_objective(const Trajectory& traj, const Params& theta, const Objective& objective) {
  double loss = objective.terminal.value(terminal_point(traj, objective));
  if (objective.running) {
    const Eigen::VectorXd theta_low = theta.quantized(traj.fmt_low);
    const Eigen::VectorXd w = objective.quadrature(traj.grid);
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      loss += w[ii] * objective.running->value(traj.grid[ii], traj.states[i], theta_low);
    }
  }
  return loss;
}

ScalingPolicy ScalingPolicy::parse(std::string_view name) {
  if (name == "none" || name == "unscaled") return unscaled();
  if (name == "safe" || name == "unscaled-safe") return unscaled_safe();
  if (name == "dynamic") return dynamic();
  throw std::invalid_argument("unknown scaling policy: " + std::string(name));
}

std::string_view policy_name(ScalingKind kind) {
  switch (kind) {
    case ScalingKind::Unscaled: return "none";
    case ScalingKind::UnscaledSafe: return "safe";
    case ScalingKind::Dynamic: return "dynamic";
  }
  return "?";
}

int BackwardStats::total_rescales() const {
  int total = 0;
  for (int k : attempts) total += k - 1;
  return total;
}

ExhaustedRescale::ExhaustedRescale(Eigen::Index step)
    : std::runtime_error("adjoint scaling exhausted at step " + std::to_string(step)), step_(step) {}

NonFiniteAccumulator::NonFiniteAccumulator(Eigen::Index step)
    : std::runtime_error("non-finite adjoint accumulator at step " + std::to_string(step)), step_(step) {}

double init_scale(const Eigen::VectorXd& a, const FloatFormat& fmt_low) {
  const double amax = a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
  if (amax == 0.0) return 1.0;
  // amax = m 2^k with m in [0.5, 1); 1/u = 2^(mantissa_bits + 1).
  int k = 0;
  const double m = std::frexp(amax, &k);
  const int target = fmt_low.mantissa_bits + 1;
  const int exponent = m == 0.5 ? target - (k - 1) : target - k;
  return std::ldexp(1.0, exponent);
}

StepVjp scheme_vjp(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& y, double t, double h,
                   const Eigen::VectorXd& theta_low, const Eigen::VectorXd& a_scaled, const FloatFormat& fmt) {
  return IncrementRecord(scheme, field, y, t, h, theta_low, fmt).vjp(a_scaled);
}

Gradients backward(const Scheme& scheme, const VelocityField& field, const Trajectory& traj, const Params& theta,
                   const Objective& objective, const ScalingPolicy& policy, const FloatFormat& fmt_low,
                   const FloatFormat& fmt_high, BackwardStats* stats) {
  const Eigen::Index steps = traj.steps();
  if (static_cast<Eigen::Index>(traj.states.size()) != steps + 1) {
    throw std::invalid_argument("backward: trajectory and grid lengths differ");
  }
  if (theta.size() != field.dim_params()) throw std::invalid_argument("backward: parameter size mismatch");
  if (policy.k_max < 1) throw std::invalid_argument("backward: k_max must be at least 1");

  const LowArith high(fmt_high);
  const TimeGrid& grid = traj.grid;
  const Eigen::VectorXd theta_low = theta.quantized(fmt_low);
  const Eigen::Index p = theta.size();
  const bool checked = policy.kind != ScalingKind::Unscaled;

  BackwardStats local_stats;
  BackwardStats& st = stats != nullptr ? *stats : local_stats;
  st = BackwardStats{};
  st.scales.assign(static_cast<std::size_t>(steps), 1.0);
  st.attempts.assign(static_cast<std::size_t>(steps), 1);

  // Partials of L in high precision.
  Eigen::VectorXd a = objective.terminal.gradient(terminal_point(traj, objective));
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd tgrad = Eigen::VectorXd::Zero(steps + 1);
  Eigen::VectorXd w;
  if (objective.running) {
    const RunningCost& run = *objective.running;
    w = objective.quadrature(grid);
    const Eigen::VectorXd& y_n = traj.states.back();
    a += w[steps] * run.grad_y(grid[steps], y_n, theta_low);
    g += w[steps] * run.grad_theta(grid[steps], y_n, theta_low);
    // Explicit t dependence: R itself, and the trapezoid weights.
    for (Eigen::Index i = 0; i <= steps; ++i) {
      const auto& y_i = traj.states[static_cast<std::size_t>(i)];
      if (run.grad_t) tgrad[i] += w[i] * run.grad_t(grid[i], y_i, theta_low);
    }
    if (objective.weights.size() == 0) {
      for (Eigen::Index i = 0; i < steps; ++i) {
        // w_i and w_{i+1} each hold h_i / 2.
        const double r_sum = run.value(grid[i], traj.states[static_cast<std::size_t>(i)], theta_low) +
                             run.value(grid[i + 1], traj.states[static_cast<std::size_t>(i + 1)], theta_low);
        tgrad[i] -= 0.5 * r_sum;
        tgrad[i + 1] += 0.5 * r_sum;
      }
    }
  }
  a = quantize(a, fmt_high);
  g = quantize(g, fmt_high);
  tgrad = quantize(tgrad, fmt_high);

  double scale = 1.0;
  if (policy.kind == ScalingKind::Dynamic) scale = init_scale(a, fmt_low);
  // Scale actually applied to the adjoint; differs from `scale` only when
  // scale_shift is set.
  auto applied = [&] { return policy.kind == ScalingKind::Dynamic ? std::ldexp(scale, policy.scale_shift) : 1.0; };

  // h * Q_high(v) / S with the power-of-two division done first.
  auto unscale = [&](double h, double v) { return high.mul(h, high.div(high.round(v), applied())); };

  for (Eigen::Index i = steps - 1; i >= 0; --i) {
    const auto& y_i = traj.states[static_cast<std::size_t>(i)];
    const double h = grid.step(i, fmt_high);
    const IncrementRecord record(scheme, field, y_i, grid[i], h, theta_low, fmt_low);

    StepVjp v;
    int attempt = 1;
    if (policy.kind == ScalingKind::Dynamic) {
      for (;; ++attempt) {
        if (attempt > policy.k_max || applied() < policy.s_floor) throw ExhaustedRescale(i);
        RangeEventScope events;
        v = record.vjp(quantize(Eigen::VectorXd(applied() * a), fmt_low));
        st.vjp_overflows += events.overflows();
        st.vjp_underflows += events.underflows();
        if (v.finite()) break;
        scale *= 0.5;
      }
    } else {
      RangeEventScope events;
      v = record.vjp(quantize(a, fmt_low));
      st.vjp_overflows += events.overflows();
      st.vjp_underflows += events.underflows();
      if (policy.kind == ScalingKind::UnscaledSafe && !v.finite()) {
        st.safe_overflow = true;
        const double inf = std::numeric_limits<double>::infinity();
        return {filled(field.dim_state(), inf), filled(p, inf), filled(steps + 1, inf)};
      }
    }
    st.scales[static_cast<std::size_t>(i)] = applied();
    st.attempts[static_cast<std::size_t>(i)] = attempt;

    // Phi^T a from the recomputed low-precision increment, in high precision.
    const double phi_a = high.dot(quantize(record.increment(), fmt_high), a);

    // Unscale before subtracting: dt and dh may be near the top of the range.
    const double dt_minus_dh =
        high.sub(high.div(high.round(v.dt), applied()), high.div(high.round(v.dh), applied()));
    tgrad[i] = high.sub(high.add(tgrad[i], high.mul(h, dt_minus_dh)), phi_a);
    tgrad[i + 1] = high.add(high.add(tgrad[i + 1], unscale(h, v.dh)), phi_a);

    if (objective.running) {
      const RunningCost& run = *objective.running;
      const Eigen::VectorXd r_y = quantize(run.grad_y(grid[i], y_i, theta_low), fmt_high);
      const Eigen::VectorXd r_th = quantize(run.grad_theta(grid[i], y_i, theta_low), fmt_high);
      a = high.axpy(w[i], r_y, a);
      g = high.axpy(w[i], r_th, g);
    }
    for (Eigen::Index j = 0; j < a.size(); ++j) a[j] = high.add(a[j], unscale(h, v.dy[j]));
    for (Eigen::Index j = 0; j < p; ++j) g[j] = high.add(g[j], unscale(h, v.dtheta[j]));

    if (checked && !(all_finite(a) && all_finite(g) && std::isfinite(tgrad[i]) && std::isfinite(tgrad[i + 1]))) {
      throw NonFiniteAccumulator(i);
    }

    if (policy.kind == ScalingKind::Dynamic && attempt == 1) {
      double amax = a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
      if (policy.growth_test == GrowthTest::ScaledAdjoint) amax *= scale;
      if (amax <= 0.5 / fmt_low.unit_roundoff()) scale *= 2.0;
    }
  }

  return {std::move(a), std::move(g), std::move(tgrad)};
}

void write_gradients_csv(std::ostream& os, const Gradients& grads) {
  os << "component,value\n";
  for (Eigen::Index j = 0; j < grads.d_x.size(); ++j) os << 'x' << j << ',' << format_real(grads.d_x[j]) << '\n';
  for (Eigen::Index j = 0; j < grads.d_theta.size(); ++j) {
    os << "theta" << j << ',' << format_real(grads.d_theta[j]) << '\n';
  }
  for (Eigen::Index j = 0; j < grads.d_t.size(); ++j) os << 't' << j << ',' << format_real(grads.d_t[j]) << '\n';
}

SgdStepResult sgd_step(Params& theta, const ScaledGradientFn& grad_fn, const SgdConfig& config, LossScaler& scaler,
                       const FloatFormat& fmt_high) {
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  SgdStepResult result;
  result.loss_scale_used = scaler.scale;

  const Eigen::VectorXd grad = grad_fn(theta, scaler.scale);
  if (!all_finite(grad)) {
    scaler.scale *= 0.5;
    scaler.accepted_run = 0;
    return result;
  }

  const LowArith high(fmt_high);
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double unscaled = high.div(high.round(grad[j]), scaler.scale);
    const double decay = high.mul(config.weight_decay, theta.master[j]);
    theta.master[j] = high.sub(theta.master[j], high.mul(config.learning_rate, high.add(unscaled, decay)));
  }
  result.accepted = true;
  if (++scaler.accepted_run >= scaler.growth_window) {
    scaler.scale *= 2.0;
    scaler.accepted_run = 0;
  }
  return result;
}

}  // namespace mpode
