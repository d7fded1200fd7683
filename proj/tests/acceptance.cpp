// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "mpode/harness.hpp"

#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>

using namespace mpode;

namespace {

int g_failures = 0;

void report(const char* id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s %-3s %s | %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string row_text(const ErrorRow& r) {
  std::ostringstream os;
  os << "y=" << fmt("%.3g", r.re_y) << " dx=" << fmt("%.3g", r.re_dx) << " dth=" << fmt("%.3g", r.re_dtheta[0])
     << "," << fmt("%.3g", r.re_dtheta[1]) << "," << fmt("%.3g", r.re_dtheta[2]);
  return os.str();
}

Eigen::VectorXd one(double v) { return Eigen::VectorXd::Constant(1, v); }

void table_criteria() {
  const TableConfig cfg;
  auto t0 = std::chrono::steady_clock::now();
  const ErrorRow f16d = run_table_cell(cfg, kFloat16, ScalingPolicy::dynamic());
  const double t_cell = seconds_since(t0);
  const ErrorRow f16n = run_table_cell(cfg, kFloat16, ScalingPolicy::unscaled());
  const ErrorRow f32n = run_table_cell(cfg, kFloat32, ScalingPolicy::unscaled());
  const ErrorRow f32d = run_table_cell(cfg, kFloat32, ScalingPolicy::dynamic());
  const ErrorRow bfd = run_table_cell(cfg, kBFloat16, ScalingPolicy::dynamic());
  const ErrorRow bfn = run_table_cell(cfg, kBFloat16, ScalingPolicy::unscaled());

  auto in_band = [](double v) { return v >= 1e-3 && v <= 2e-2; };
  bool a = f16d.status == "ok" && in_band(f16d.re_y) && in_band(f16d.re_dx) && t_cell < 1.0;
  for (int k = 0; k < 3; ++k) a = a && in_band(f16d.re_dtheta[k]);
  report("1a", a, "float16 dynamic: five REs in [1e-3, 2e-2], < 1 s",
         row_text(f16d) + " time=" + fmt("%.3fs", t_cell));

  report("1b", f16n.re_dtheta.minCoeff() >= 0.99, "float16 none: theta REs >= 0.99", row_text(f16n));

  bool c = true;
  for (const ErrorRow* r : {&f32n, &f32d}) {
    c = c && r->status == "ok" && r->re_y <= 2e-4 && r->re_dx <= 5e-4 && r->re_dtheta.maxCoeff() <= 5e-4;
  }
  report("1c", c, "float32: forward RE <= 2e-4, gradients <= 5e-4",
         "none " + row_text(f32n) + "; dynamic " + row_text(f32d));

  auto close = [](double p, double q) { return std::abs(p - q) <= 0.2 * std::max(std::abs(p), std::abs(q)); };
  bool d = bfd.status == "ok" && bfn.status == "ok" && close(bfd.re_y, bfn.re_y) && close(bfd.re_dx, bfn.re_dx);
  for (int k = 0; k < 3; ++k) d = d && close(bfd.re_dtheta[k], bfn.re_dtheta[k]);
  report("1d", d, "bfloat16 dynamic vs none within 20%", "dynamic " + row_text(bfd) + "; none " + row_text(bfn));
}

void flatness_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::ostringstream detail;
  for (SweepField field : {SweepField::Decay, SweepField::Mlp}) {
    for (const Scheme& s : {Scheme::rk4(), Scheme::euler()}) {
      SweepConfig cfg;
      cfg.field = field;
      cfg.scheme = s;
      const auto rows = run_sweep(cfg);
      double worst = 0.0;
      for (int col = 0; col < 5; ++col) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (const ErrorRow& r : rows) {
          const double v = col == 0 ? r.re_y : col == 1 ? r.re_dx : r.re_dtheta[col - 2];
          ok = ok && r.status == "ok" && std::isfinite(v);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        worst = std::max(worst, lo > 0 ? hi / lo : std::numeric_limits<double>::infinity());
      }
      ok = ok && worst <= 10.0;
      detail << (field == SweepField::Mlp ? "mlp" : "decay") << "/" << s.name() << " max ratio "
             << fmt("%.2f", worst) << "; ";
    }
  }
  const double t = seconds_since(t0);
  ok = ok && t < 30.0;
  report("2", ok, "error flatness over N=64..4096, max/min <= 10, < 30 s", detail.str() + "time=" + fmt("%.2fs", t));
}

void fd_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  bool ok = true;

  const LinearField lin(5);
  Eigen::MatrixXd a(5, 5);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (Eigen::Index i = 0; i < 25; ++i) a(i / 5, i % 5) = u(rng) - (i % 6 == 0 ? 0.5 : 0.0);
  const Params th_lin{LinearField::pack(a)};
  Eigen::VectorXd x_lin(5);
  x_lin << 0.9, -0.4, 0.3, 1.1, -0.7;

  const MlpField mlp({2, 16, 8, 2});
  const Params th_mlp = mlp.init_params(13, 1.5);
  const Eigen::Vector2d x_mlp(0.6, -0.3);
  ok = ok && mlp.dim_params() <= 300;

  const TimeGrid g = TimeGrid::equidistant(1.0, 10);
  for (int which = 0; which < 2; ++which) {
    const VelocityField& f = which == 0 ? static_cast<const VelocityField&>(lin) : mlp;
    const Params& th = which == 0 ? th_lin : th_mlp;
    const Eigen::VectorXd x = which == 0 ? x_lin : Eigen::VectorXd(x_mlp);
    for (const Scheme& s : {Scheme::euler(), Scheme::rk4()}) {
      for (bool with_run : {false, true}) {
        Objective obj;
        if (with_run) obj.running = RunningCost::quadratic(0.5, 0.1);
        const Trajectory tr = forward(s, f, x, g, th, kFloat64, kFloat64);
        const Gradients gr = backward(s, f, tr, th, obj, ScalingPolicy::dynamic(), kFloat64, kFloat64);
        const FdGradient fd = fd_gradient(s, f, x, g, th, obj, 1e-6, true);
        worst = std::max({worst, oracle::max_rel(gr.d_x, fd.d_x), oracle::max_rel(gr.d_theta, fd.d_theta),
                          oracle::max_rel(gr.d_t, fd.d_t)});
      }
    }
  }
  const double t = seconds_since(t0);
  ok = ok && worst <= 1e-6 && t < 10.0;
  report("3", ok, "float64 backward vs central FD <= 1e-6 (linear n=5, mlp p=" + std::to_string(mlp.dim_params()) +
                      ", euler/rk4, +-running cost), < 10 s",
         "max rel " + fmt("%.2e", worst) + " time=" + fmt("%.2fs", t));
}

void quantization_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (std::uint32_t bits = 0; bits < 65536; ++bits) {
    const double v = decode_bits(bits, kFloat16);
    if (std::isnan(v)) {
      ok = ok && std::isnan(oracle::decode(bits, 5, 10));
      continue;
    }
    ok = ok && v == oracle::decode(bits, 5, 10) && quantize(v, kFloat16) == v;
  }
  std::mt19937_64 rng(99);
  std::size_t mismatches = 0;
  for (const auto* f : {&kFloat16, &kBFloat16}) {
    std::uniform_int_distribution<int> ex(f->min_exponent() - f->mantissa_bits - 3, f->max_exponent() + 2);
    std::uniform_int_distribution<std::uint64_t> bits52(0, (std::uint64_t{1} << 52) - 1);
    std::uniform_int_distribution<int> mode(0, 3);
    for (int k = 0; k < 100000; ++k) {
      double x;
      const int m = mode(rng);
      if (m == 3) {
        // exact halfway point between two neighbours
        const double base = quantize(std::ldexp(1.0 + std::ldexp(static_cast<double>(bits52(rng)), -52), ex(rng)), *f);
        if (!std::isfinite(base)) continue;
        int e;
        std::frexp(base, &e);
        const int q = std::max(e - 1, f->min_exponent()) - f->mantissa_bits;
        x = base + std::ldexp(0.5, q);
      } else {
        x = std::ldexp(1.0 + std::ldexp(static_cast<double>(bits52(rng)), -52), ex(rng));
      }
      if (k & 1) x = -x;
      if (quantize(x, *f) != oracle::round_to_format(x, f->exponent_bits, f->mantissa_bits)) ++mismatches;
    }
  }
  const double t = seconds_since(t0);
  ok = ok && mismatches == 0 && t < 5.0;
  report("4", ok, "float16 exhaustive idempotence; 1e5 random values x {float16, bfloat16} match oracle, < 5 s",
         std::to_string(mismatches) + " mismatches, time=" + fmt("%.2fs", t));
}

void scale_exactness_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::ostringstream detail;
  // A run qualifies only if it is clean; this net and seed are (checked below).
  const MlpField mlp({2, 8, 2});
  const Params th_mlp = mlp.init_params(17);
  const PolyDecayField decay;
  const DecayProblem pb = DecayProblem::mild();
  struct Case {
    const VelocityField* f;
    Params th;
    Eigen::VectorXd x;
    double t_end;
    Eigen::Index steps;
    const char* name;
  };
  const Case cases[] = {{&mlp, th_mlp, Eigen::Vector2d(0.4, -0.2), 1.0, 64, "mlp"},
                        {&decay, Params{pb.theta}, one(pb.x), pb.t_end, 256, "decay"}};
  for (const Case& c : cases) {
    for (const Scheme& s : {Scheme::euler(), Scheme::rk4()}) {
      const TimeGrid g = TimeGrid::equidistant(c.t_end, c.steps, kFloat32);
      const Trajectory tr = forward(s, *c.f, c.x, g, c.th, kFloat16, kFloat32);
      const ScalingPolicy base = ScalingPolicy::dynamic();
      ScalingPolicy twice = base;
      twice.scale_shift = 1;
      BackwardStats s1, s2;
      const Gradients a = backward(s, *c.f, tr, c.th, Objective{}, base, kFloat16, kFloat32, &s1);
      const Gradients b = backward(s, *c.f, tr, c.th, Objective{}, twice, kFloat16, kFloat32, &s2);
      const bool clean = s1.total_rescales() == 0 && s2.total_rescales() == 0 && s1.vjp_overflows == 0 &&
                         s2.vjp_overflows == 0 && s1.vjp_underflows == 0 && s2.vjp_underflows == 0;
      bool doubled = true;
      for (std::size_t i = 0; i < s1.scales.size(); ++i) doubled = doubled && s2.scales[i] == 2.0 * s1.scales[i];
      const bool same = a.d_x == b.d_x && a.d_theta == b.d_theta && a.d_t == b.d_t;
      ok = ok && clean && doubled && same;
      detail << c.name << "/" << s.name() << (clean ? " clean" : " NOT clean") << (same ? " identical" : " differ")
             << "; ";
    }
  }
  const double t = seconds_since(t0);
  ok = ok && t < 5.0;
  report("5", ok, "2x scale sequence gives bit-identical gradients, < 5 s", detail.str() + "time=" + fmt("%.2fs", t));
}

void variant_contract_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  const PolyDecayField f;
  const TimeGrid g = TimeGrid::equidistant(1.0, 50, kFloat32);
  const Params th{Eigen::Vector3d(0.5, -0.2, 1.0)};
  Objective obj;
  const double k = 1e6;  // terminal weight: adjoint ~ 1e6, beyond float16
  obj.terminal.value = [k](const Eigen::VectorXd& y) { return 0.5 * k * y.squaredNorm(); };
  obj.terminal.gradient = [k](const Eigen::VectorXd& y) { return Eigen::VectorXd(k * y); };
  const Trajectory tr = forward(Scheme::rk4(), f, one(3.0), g, th, kFloat16, kFloat32);
  BackwardStats st;
  const Gradients safe = backward(Scheme::rk4(), f, tr, th, obj, ScalingPolicy::unscaled_safe(), kFloat16, kFloat32, &st);
  const Gradients dyn = backward(Scheme::rk4(), f, tr, th, obj, ScalingPolicy::dynamic(), kFloat16, kFloat32);
  const bool all_inf = (safe.d_theta.array() == std::numeric_limits<double>::infinity()).all();
  const double t = seconds_since(t0);
  const bool ok = all_inf && st.safe_overflow && all_finite(dyn.d_theta) && all_finite(dyn.d_x) && t < 1.0;
  report("6", ok, "UnscaledSafe all-inf d_theta on engineered overflow, Dynamic finite, < 1 s",
         std::string("safe ") + (all_inf ? "all inf" : "not all inf") + ", dynamic " +
             (all_finite(dyn.d_theta) ? "finite" : "non-finite") + " time=" + fmt("%.3fs", t));
}

void economy_criterion() {
  bool ok = true;
  std::ostringstream detail;
  const MlpField mlp({2, 16, 2});
  const Params th = mlp.init_params(2);
  CountingField f(mlp);
  const Eigen::Index n = 64;
  const TimeGrid g = TimeGrid::equidistant(1.0, n, kFloat32);
  for (const Scheme& s : {Scheme::euler(), Scheme::rk4()}) {
    for (int shift : {0, 14}) {
      const Trajectory tr = forward(s, f, Eigen::Vector2d(0.5, 0.5), g, th, kFloat16, kFloat32);
      ScalingPolicy pol = ScalingPolicy::dynamic();
      pol.scale_shift = shift;  // 14 forces rescale attempts
      BackwardStats st;
      f.reset();
      (void)backward(s, f, tr, th, Objective{}, pol, kFloat16, kFloat32, &st);
      const auto expect = static_cast<std::uint64_t>(n * s.stages());
      ok = ok && f.evaluations() == expect;
      if (shift != 0) ok = ok && st.total_rescales() > 0;
      detail << s.name() << " rescales=" << st.total_rescales() << " evals=" << f.evaluations() << "/" << expect
             << "; ";
    }
  }
  report("7", ok, "backward field evaluations == N x stages regardless of rescales", detail.str());
}

void sgd_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  SgdDemoConfig cfg;
  cfg.fmt_low = kFloat64;
  const auto ref = run_sgd_demo(cfg);
  cfg.fmt_low = kFloat16;
  const auto low = run_sgd_demo(cfg);
  const double t = seconds_since(t0);
  bool pow2 = true;
  for (const SgdTraceRow& r : low) pow2 = pow2 && oracle::is_power_of_two(r.loss_scale);
  const double l0 = ref.front().loss, l64 = ref.back().loss, l16 = low.back().loss;
  const bool ok = pow2 && l0 >= 10.0 * l64 && l16 <= 2.0 * l64 && l16 >= 0.5 * l64 && t < 60.0;
  report("8", ok, "SGD demo: float16 final loss within 2x of float64, scales powers of two, < 60 s",
         "float64 " + fmt("%.3e", l0) + " -> " + fmt("%.3e", l64) + ", float16 final " + fmt("%.3e", l16) +
             (pow2 ? ", scales ok" : ", bad scale") + " time=" + fmt("%.2fs", t));
}

}  // namespace

int main() {
  table_criteria();
  flatness_criterion();
  fd_criterion();
  quantization_criterion();
  scale_exactness_criterion();
  variant_contract_criterion();
  economy_criterion();
  sgd_criterion();
  std::printf("%d criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
