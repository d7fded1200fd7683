#include "mpode/harness.hpp"

#include "mpode/csv.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace mpode {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double decay_exponent(double t, const Eigen::Vector3d& theta) {
  return theta[0] / 3.0 * t * t * t + theta[1] / 2.0 * t * t + theta[2] * t;
}

const FloatFormat& high_for(const FloatFormat& fmt_low) { return fmt_low == kFloat64 ? kFloat64 : kFloat32; }

ErrorRow failed_row(const FloatFormat& fmt, const ScalingPolicy& policy, Eigen::Index steps, std::string status) {
  ErrorRow row;
  row.fmt = std::string(fmt.name);
  row.policy = std::string(policy_name(policy.kind));
  row.steps = steps;
  row.re_y = row.re_dx = kInf;
  row.re_dtheta.setConstant(kInf);
  row.status = std::move(status);
  return row;
}

template <typename Fn>
auto run_cells(std::size_t count, bool parallel, Fn&& fn) {
  using Row = decltype(fn(std::size_t{0}));
  std::vector<Row> rows;
  rows.reserve(count);
  if (!parallel) {
    for (std::size_t i = 0; i < count; ++i) rows.push_back(fn(i));
    return rows;
  }
  std::vector<std::future<Row>> jobs;
  jobs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) jobs.push_back(std::async(std::launch::async, fn, i));
  for (auto& job : jobs) rows.push_back(job.get());
  return rows;
}

}  // namespace

double analytic_solution(double t, double x, const Eigen::Vector3d& theta) {
  return x * std::exp(-decay_exponent(t, theta));
}

AnalyticGradient analytic_gradient(double t_end, double x, const Eigen::Vector3d& theta) {
  // L = x^2 e^{-2 Lambda(T)} / 2, written without dividing by x.
  const double damp = std::exp(-2.0 * decay_exponent(t_end, theta));
  const double y_sq = x * x * damp;
  AnalyticGradient g;
  g.d_x = x * damp;
  g.d_theta << -y_sq * t_end * t_end * t_end / 3.0, -y_sq * t_end * t_end / 2.0, -y_sq * t_end;
  return g;
}

double relative_error(const Eigen::VectorXd& approx, const Eigen::VectorXd& ref) {
  if (!all_finite(approx)) return kInf;
  const double err = (approx - ref).cwiseAbs().maxCoeff();
  const double scale = ref.cwiseAbs().maxCoeff();
  return scale == 0.0 ? err : err / scale;
}

double relative_error(double approx, double ref) {
  return relative_error(Eigen::VectorXd::Constant(1, approx), Eigen::VectorXd::Constant(1, ref));
}

FdGradient fd_gradient(const Scheme& scheme, const VelocityField& field, const Eigen::VectorXd& x,
                       const TimeGrid& grid, const Params& theta, const Objective& objective, double eps,
                       bool with_time) {
  if (!(eps > 0.0)) throw std::invalid_argument("fd_gradient: eps must be positive");
  auto loss_at = [&](const Eigen::VectorXd& xx, const Params& th, const TimeGrid& gg) {
    return evaluate_objective(forward(scheme, field, xx, gg, th, kFloat64, kFloat64), th, objective);
  };
  auto central = [&](double value, auto&& eval_with) {
    const double step = eps * std::max(1.0, std::abs(value));
    return (eval_with(value + step) - eval_with(value - step)) / (2.0 * step);
  };

  FdGradient fd;
  fd.d_x.resize(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    fd.d_x[j] = central(x[j], [&](double v) {
      Eigen::VectorXd xx = x;
      xx[j] = v;
      return loss_at(xx, theta, grid);
    });
  }
  fd.d_theta.resize(theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    fd.d_theta[j] = central(theta.master[j], [&](double v) {
      Params th = theta;
      th.master[j] = v;
      return loss_at(x, th, grid);
    });
  }
  if (with_time) {
    const Eigen::VectorXd& pts = grid.points();
    fd.d_t.resize(pts.size());
    for (Eigen::Index j = 0; j < pts.size(); ++j) {
      // Keep the perturbation inside the neighbouring intervals.
      double room = kInf;
      if (j > 0) room = std::min(room, pts[j] - pts[j - 1]);
      if (j + 1 < pts.size()) room = std::min(room, pts[j + 1] - pts[j]);
      const double step = std::min(eps * std::max(1.0, std::abs(pts[j])), 0.25 * room);
      auto shifted = [&](double v) {
        Eigen::VectorXd tt = pts;
        tt[j] = v;
        return loss_at(x, theta, TimeGrid(tt));
      };
      if (pts[j] - step < 0.0) {
        // t_0 = 0 cannot move left: one-sided second-order stencil.
        fd.d_t[j] = (-3.0 * shifted(pts[j]) + 4.0 * shifted(pts[j] + step) - shifted(pts[j] + 2.0 * step)) /
                    (2.0 * step);
      } else {
        fd.d_t[j] = (shifted(pts[j] + step) - shifted(pts[j] - step)) / (2.0 * step);
      }
    }
  }
  return fd;
}

// --- error tables ----------------------------------------------------------

void write_error_csv(std::ostream& os, const std::vector<ErrorRow>& rows) {
  os << "fmt,policy,N,RE_yT,RE_dy0,RE_dtheta1,RE_dtheta2,RE_dtheta3,status\n";
  for (const ErrorRow& r : rows) {
    os << r.fmt << ',' << r.policy << ',' << r.steps << ',' << format_real(r.re_y) << ',' << format_real(r.re_dx);
    for (int k = 0; k < 3; ++k) os << ',' << format_real(r.re_dtheta[k]);
    os << ',' << r.status << '\n';
  }
}

ErrorRow run_table_cell(const TableConfig& config, const FloatFormat& fmt_low, const ScalingPolicy& policy) {
  const DecayProblem& pb = config.problem;
  const FloatFormat& fmt_high = kFloat32;
  const PolyDecayField field;
  const TimeGrid grid = TimeGrid::equidistant(pb.t_end, config.steps, fmt_high);
  const Params theta{Eigen::VectorXd(pb.theta)};
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, pb.x);

  ErrorRow row = failed_row(fmt_low, policy, config.steps, "ok");
  Trajectory traj;
  try {
    traj = forward(config.scheme, field, x, grid, theta, fmt_low, fmt_high);
  } catch (const NonFiniteState& e) {
    row.status = "nonfinite-state@" + std::to_string(e.step());
    return row;
  }
  row.re_y = relative_error(traj.final_hp[0], analytic_solution(pb.t_end, pb.x, pb.theta));

  const AnalyticGradient exact = analytic_gradient(pb.t_end, pb.x, pb.theta);
  try {
    const Gradients g = backward(config.scheme, field, traj, theta, Objective{}, policy, fmt_low, fmt_high);
    row.re_dx = relative_error(g.d_x[0], exact.d_x);
    for (int k = 0; k < 3; ++k) row.re_dtheta[k] = relative_error(g.d_theta[k], exact.d_theta[k]);
    if (!all_finite(g.d_theta) || !all_finite(g.d_x)) row.status = "nonfinite-gradient";
  } catch (const ExhaustedRescale& e) {
    row.status = "exhausted-rescale@" + std::to_string(e.step());
  } catch (const NonFiniteAccumulator& e) {
    row.status = "nonfinite-accumulator@" + std::to_string(e.step());
  }
  return row;
}

std::vector<ErrorRow> run_table(const TableConfig& config) {
  const std::vector<std::pair<const FloatFormat*, ScalingPolicy>> cells{
      {&kFloat32, ScalingPolicy::unscaled()}, {&kFloat32, ScalingPolicy::dynamic()},
      {&kFloat16, ScalingPolicy::unscaled()}, {&kFloat16, ScalingPolicy::dynamic()},
      {&kBFloat16, ScalingPolicy::unscaled()}, {&kBFloat16, ScalingPolicy::dynamic()},
  };
  return run_cells(cells.size(), true,
                   [&](std::size_t i) { return run_table_cell(config, *cells[i].first, cells[i].second); });
}

namespace {

struct SweepRun {
  Eigen::VectorXd y_end;
  Gradients grads;
};

ErrorRow sweep_cell(const SweepConfig& config, Eigen::Index steps) {
  std::unique_ptr<VelocityField> field;
  Params theta;
  Eigen::VectorXd x;
  double t_end = config.t_end;
  if (config.field == SweepField::Decay) {
    field = std::make_unique<PolyDecayField>();
    theta.master = config.problem.theta;
    x = Eigen::VectorXd::Constant(1, config.problem.x);
    t_end = config.problem.t_end;
  } else {
    auto mlp = std::make_unique<MlpField>(config.mlp_widths);
    theta = mlp->init_params(config.seed, 1.5);
    std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    x.resize(mlp->dim_state());
    for (Eigen::Index j = 0; j < x.size(); ++j) x[j] = dist(rng);
    field = std::move(mlp);
  }

  const FloatFormat& fmt_high = high_for(config.fmt_low);
  const TimeGrid grid = TimeGrid::equidistant(t_end, steps, fmt_high);
  ErrorRow row = failed_row(config.fmt_low, config.policy, steps, "ok");

  auto run = [&](const FloatFormat& lo, const FloatFormat& hi, const ScalingPolicy& policy) {
    Trajectory traj = forward(config.scheme, *field, x, grid, theta, lo, hi);
    Gradients g = backward(config.scheme, *field, traj, theta, Objective{}, policy, lo, hi);
    return SweepRun{std::move(traj.final_hp), std::move(g)};
  };

  SweepRun low;
  try {
    low = run(config.fmt_low, fmt_high, config.policy);
  } catch (const NonFiniteState& e) {
    row.status = "nonfinite-state@" + std::to_string(e.step());
    return row;
  } catch (const ExhaustedRescale& e) {
    row.status = "exhausted-rescale@" + std::to_string(e.step());
    return row;
  } catch (const NonFiniteAccumulator& e) {
    row.status = "nonfinite-accumulator@" + std::to_string(e.step());
    return row;
  }
  const SweepRun ref = run(kFloat64, kFloat64, ScalingPolicy::unscaled());

  row.re_y = relative_error(low.y_end, ref.y_end);
  row.re_dx = relative_error(low.grads.d_x, ref.grads.d_x);
  if (config.field == SweepField::Decay) {
    for (int k = 0; k < 3; ++k) row.re_dtheta[k] = relative_error(low.grads.d_theta[k], ref.grads.d_theta[k]);
  } else {
    const auto& mlp = static_cast<const MlpField&>(*field);
    const std::size_t layers = mlp.num_layers();
    for (int k = 0; k < 3; ++k) {
      const auto first = static_cast<std::size_t>(k);
      if (first >= layers) {
        row.re_dtheta[k] = 0.0;
        continue;
      }
      // The last column absorbs any layers beyond the third.
      const std::size_t last = k == 2 ? layers - 1 : first;
      const Eigen::Index begin = mlp.layer_offset(first);
      const Eigen::Index len = mlp.layer_offset(last) + mlp.layer_size(last) - begin;
      row.re_dtheta[k] =
          relative_error(Eigen::VectorXd(low.grads.d_theta.segment(begin, len)),
                         Eigen::VectorXd(ref.grads.d_theta.segment(begin, len)));
    }
  }
  return row;
}

}  // namespace

std::vector<ErrorRow> run_sweep(const SweepConfig& config) {
  if (config.steps.empty()) throw std::invalid_argument("run_sweep: empty step list");
  if (!std::is_sorted(config.steps.begin(), config.steps.end())) {
    throw std::invalid_argument("run_sweep: step list must be ascending");
  }
  for (Eigen::Index n : config.steps) {
    if (n < 1) throw std::invalid_argument("run_sweep: step counts must be positive");
  }
  return run_cells(config.steps.size(), config.parallel,
                   [&](std::size_t i) { return sweep_cell(config, config.steps[i]); });
}

// --- SGD demo --------------------------------------------------------------

namespace {

Eigen::Matrix2d teacher_matrix() {
  Eigen::Matrix2d a;
  a << -0.1, 1.0, -1.0, -0.1;
  return a;
}

}  // namespace

std::vector<SgdTraceRow> run_sgd_demo(const SgdDemoConfig& config) {
  if (config.widths.front() != 2) throw std::invalid_argument("sgd demo: state dimension must be 2");
  if (config.batch < 1 || config.iterations < 0) throw std::invalid_argument("sgd demo: bad batch/iterations");

  const MlpField student(config.widths);
  Params theta = student.init_params(config.seed);
  const FloatFormat& fmt_low = config.fmt_low;
  const FloatFormat& fmt_high = high_for(fmt_low);

  // Fixed batch of initial states and their teacher images.
  std::mt19937_64 rng(config.seed * 0x2545F4914F6CDD1DULL + 1);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const LinearField teacher(2);
  const Params teacher_theta{LinearField::pack(teacher_matrix())};
  const TimeGrid fine = TimeGrid::equidistant(config.t_end, 1000);
  std::vector<Eigen::VectorXd> inputs;
  std::vector<Eigen::VectorXd> targets;
  for (int b = 0; b < config.batch; ++b) {
    Eigen::VectorXd x(2);
    x << dist(rng), dist(rng);
    targets.push_back(
        forward(Scheme::rk4(), teacher, x, fine, teacher_theta, kFloat64, kFloat64).final_hp);
    inputs.push_back(std::move(x));
  }

  const TimeGrid grid = TimeGrid::equidistant(config.t_end, config.steps, fmt_high);
  const TimeGrid grid64 = TimeGrid::equidistant(config.t_end, config.steps, kFloat64);
  const double inv_batch = 1.0 / static_cast<double>(config.batch);

  auto loss64 = [&](const Params& th) {
    double loss = 0.0;
    for (int b = 0; b < config.batch; ++b) {
      const Trajectory traj = forward(config.scheme, student, inputs[b], grid64, th, kFloat64, kFloat64);
      loss += 0.5 * (traj.states.back() - targets[b]).squaredNorm();
    }
    return loss * inv_batch;
  };

  const ScaledGradientFn grad_fn = [&](const Params& th, double loss_scale) {
    const LowArith high(fmt_high);
    Eigen::VectorXd total = Eigen::VectorXd::Zero(th.size());
    for (int b = 0; b < config.batch; ++b) {
      Trajectory traj;
      try {
        traj = forward(config.scheme, student, inputs[b], grid, th, fmt_low, fmt_high);
      } catch (const NonFiniteState&) {
        return Eigen::VectorXd::Constant(th.size(), kInf).eval();
      }
      const double factor = loss_scale * inv_batch;
      const Eigen::VectorXd target = targets[b];
      Objective obj;
      obj.terminal.value = [=](const Eigen::VectorXd& y) { return 0.5 * factor * (y - target).squaredNorm(); };
      obj.terminal.gradient = [=](const Eigen::VectorXd& y) { return Eigen::VectorXd(factor * (y - target)); };
      const Gradients g =
          backward(config.scheme, student, traj, th, obj, ScalingPolicy::unscaled_safe(), fmt_low, fmt_high);
      if (!all_finite(g.d_theta)) return Eigen::VectorXd::Constant(th.size(), kInf).eval();
      total = high.add(total, g.d_theta);
    }
    return total;
  };

  LossScaler scaler;
  scaler.scale = fmt_low == kFloat64 ? 1.0 : config.initial_scale;
  scaler.growth_window = config.growth_window;
  const SgdConfig sgd{config.learning_rate, config.weight_decay};

  std::vector<SgdTraceRow> rows;
  rows.reserve(static_cast<std::size_t>(config.iterations) + 1);
  for (int it = 0; it < config.iterations; ++it) {
    SgdTraceRow row;
    row.iteration = it;
    row.loss = loss64(theta);
    const SgdStepResult step = sgd_step(theta, grad_fn, sgd, scaler, fmt_high);
    row.loss_scale = step.loss_scale_used;
    row.accepted = step.accepted;
    rows.push_back(row);
  }
  rows.push_back({config.iterations, loss64(theta), scaler.scale, true});
  return rows;
}

void write_sgd_csv(std::ostream& os, const std::vector<SgdTraceRow>& rows) {
  os << "iteration,loss,loss_scale,accepted\n";
  for (const SgdTraceRow& r : rows) {
    os << r.iteration << ',' << format_real(r.loss) << ',' << format_real(r.loss_scale) << ','
       << (r.accepted ? 1 : 0) << '\n';
  }
}

// --- config-driven solve ---------------------------------------------------

ConfigMap parse_config(std::istream& is) {
  ConfigMap map;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return std::string();
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    map[key] = trim(line.substr(eq + 1));
  }
  return map;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  if (text.find_first_not_of(" \t") == std::string::npos) return out;
  std::stringstream ss(text + ",");
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) throw std::invalid_argument("empty item in list: " + text);
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (item.find_first_not_of(" \t", used) != std::string::npos) {
      throw std::invalid_argument("bad number in list: " + item);
    }
    out.push_back(v);
  }
  return out;
}

namespace {

std::string get(const ConfigMap& cfg, const std::string& key, const std::string& fallback) {
  const auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

SolveOutput run_solve(const ConfigMap& cfg) {
  static const ConfigMap::key_type known[] = {"field",  "scheme", "steps",   "t_end",  "fmt_low",
                                              "fmt_high", "policy", "theta", "x",      "widths",
                                              "seed",   "weights", "matrix", "terminal", "running"};
  for (const auto& [key, value] : cfg) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("unknown config key: " + key);
    }
  }

  const Scheme scheme = Scheme::parse(get(cfg, "scheme", "rk4"));
  const long steps = std::stol(get(cfg, "steps", "400"));
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  const double t_end = std::stod(get(cfg, "t_end", "1"));
  const FloatFormat& fmt_low = format_by_name(get(cfg, "fmt_low", "float16"));
  const FloatFormat& fmt_high = format_by_name(get(cfg, "fmt_high", std::string(high_for(fmt_low).name)));
  const ScalingPolicy policy = ScalingPolicy::parse(get(cfg, "policy", "dynamic"));
  const std::string field_kind = get(cfg, "field", "decay");

  std::unique_ptr<VelocityField> field;
  Params theta;
  if (field_kind == "decay") {
    field = std::make_unique<PolyDecayField>();
    theta.master = to_vector(parse_list(get(cfg, "theta", "8,-11,1.52587890625e-05")));
  } else if (field_kind == "linear") {
    const std::vector<double> entries = parse_list(get(cfg, "matrix", "-1"));
    const auto n = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(entries.size()))));
    if (n * n != static_cast<Eigen::Index>(entries.size())) throw std::invalid_argument("matrix must be square");
    field = std::make_unique<LinearField>(n);
    theta.master = to_vector(entries);
  } else if (field_kind == "mlp") {
    if (cfg.count("weights") != 0U) {
      LoadedMlp loaded = load_mlp_weights(get(cfg, "weights", ""));
      theta = std::move(loaded.theta);
      field = std::make_unique<MlpField>(std::move(loaded.field));
    } else {
      std::vector<Eigen::Index> widths;
      for (double w : parse_list(get(cfg, "widths", "2,32,32,2"))) widths.push_back(static_cast<Eigen::Index>(w));
      auto mlp = std::make_unique<MlpField>(widths);
      theta = mlp->init_params(std::stoull(get(cfg, "seed", "0")));
      field = std::move(mlp);
    }
  } else {
    throw std::invalid_argument("unknown field: " + field_kind);
  }

  const std::vector<double> x_list = parse_list(get(cfg, "x", field_kind == "decay" ? format_real(65504.0 / 180.0) : ""));
  Eigen::VectorXd x = x_list.empty() ? Eigen::VectorXd::Ones(field->dim_state()) : to_vector(x_list);
  if (x.size() != field->dim_state()) throw std::invalid_argument("x has the wrong dimension");

  Objective objective;
  const std::string terminal = get(cfg, "terminal", "stored");
  if (terminal == "high") {
    objective.terminal_state = TerminalState::HighPrecision;
  } else if (terminal != "stored") {
    throw std::invalid_argument("terminal must be stored or high");
  }
  if (cfg.count("running") != 0U) {
    const std::vector<double> c = parse_list(get(cfg, "running", ""));
    if (c.size() != 2) throw std::invalid_argument("running expects c_y,c_theta");
    objective.running = RunningCost::quadratic(c[0], c[1]);
  }

  const TimeGrid grid = TimeGrid::equidistant(t_end, steps, fmt_high);
  SolveOutput out;
  out.trajectory = forward(scheme, *field, x, grid, theta, fmt_low, fmt_high);
  out.gradients = backward(scheme, *field, out.trajectory, theta, objective, policy, fmt_low, fmt_high, &out.stats);
  return out;
}

}  // namespace mpode
