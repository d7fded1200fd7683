// Command-line front end: precision table, roundoff sweeps, SGD demo and a
// config-driven forward/backward solve.

#include "mpode/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

std::vector<Eigen::Index> parse_steps(const std::string& text) {
  std::vector<Eigen::Index> out;
  for (double v : mpode::parse_list(text)) {
    if (v < 1 || v != static_cast<double>(static_cast<Eigen::Index>(v))) {
      throw std::invalid_argument("step counts must be positive integers");
    }
    out.push_back(static_cast<Eigen::Index>(v));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision neural ODE solver with dynamic adjoint scaling"};
  app.require_subcommand(1);

  // table
  auto* table = app.add_subcommand("table", "Relative errors of the decay test problem per precision/policy");
  std::string table_out;
  Eigen::Index table_steps = 400;
  std::string table_scheme = "rk4";
  table->add_option("--out", table_out, "CSV output path")->required();
  table->add_option("--steps", table_steps, "number of time steps")->check(CLI::PositiveNumber);
  table->add_option("--scheme", table_scheme, "euler or rk4")->check(CLI::IsMember({"euler", "rk4"}));

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Roundoff error versus step count against a float64 reference");
  std::string sweep_n = "64,128,256,512,1024,2048,4096";
  std::string sweep_scheme = "rk4";
  std::string sweep_fmt = "float16";
  std::string sweep_policy = "dynamic";
  std::string sweep_field = "mlp";
  std::string sweep_out;
  std::uint64_t sweep_seed = 7;
  sweep->add_option("--n", sweep_n, "comma-separated ascending step counts");
  sweep->add_option("--scheme", sweep_scheme)->check(CLI::IsMember({"euler", "rk4"}));
  sweep->add_option("--fmt", sweep_fmt)->check(CLI::IsMember({"float16", "bfloat16", "float32", "float64"}));
  sweep->add_option("--policy", sweep_policy)->check(CLI::IsMember({"none", "safe", "dynamic"}));
  sweep->add_option("--field", sweep_field, "mlp or decay")->check(CLI::IsMember({"mlp", "decay"}));
  sweep->add_option("--seed", sweep_seed);
  sweep->add_option("--out", sweep_out)->required();

  // sgd-demo
  auto* sgd = app.add_subcommand("sgd-demo", "Loss-scaled mixed-precision SGD on a linear teacher");
  int sgd_steps = 500;
  std::string sgd_fmt = "float16";
  std::uint64_t sgd_seed = 1;
  std::string sgd_out;
  sgd->add_option("--steps", sgd_steps)->check(CLI::NonNegativeNumber);
  sgd->add_option("--fmt", sgd_fmt)->check(CLI::IsMember({"float16", "bfloat16", "float32", "float64"}));
  sgd->add_option("--seed", sgd_seed);
  sgd->add_option("--out", sgd_out)->required();

  // solve
  auto* solve = app.add_subcommand("solve", "Forward and backward pass described by a key = value config file");
  std::string solve_config;
  std::string solve_out;
  solve->add_option("--config", solve_config)->required()->check(CLI::ExistingFile);
  solve->add_option("--out", solve_out, "output prefix (default: config value 'out' or 'solve')");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*table) {
      mpode::TableConfig cfg;
      cfg.steps = table_steps;
      cfg.scheme = mpode::Scheme::parse(table_scheme);
      auto os = open_out(table_out);
      mpode::write_error_csv(os, mpode::run_table(cfg));
    } else if (*sweep) {
      mpode::SweepConfig cfg;
      cfg.steps = parse_steps(sweep_n);
      cfg.scheme = mpode::Scheme::parse(sweep_scheme);
      cfg.fmt_low = mpode::format_by_name(sweep_fmt);
      cfg.policy = mpode::ScalingPolicy::parse(sweep_policy);
      cfg.field = sweep_field == "mlp" ? mpode::SweepField::Mlp : mpode::SweepField::Decay;
      cfg.seed = sweep_seed;
      const auto rows = mpode::run_sweep(cfg);
      auto os = open_out(sweep_out);
      mpode::write_error_csv(os, rows);
    } else if (*sgd) {
      mpode::SgdDemoConfig cfg;
      cfg.iterations = sgd_steps;
      cfg.fmt_low = mpode::format_by_name(sgd_fmt);
      cfg.seed = sgd_seed;
      const auto rows = mpode::run_sgd_demo(cfg);
      auto os = open_out(sgd_out);
      mpode::write_sgd_csv(os, rows);
    } else if (*solve) {
      std::ifstream is(solve_config);
      mpode::ConfigMap cfg = mpode::parse_config(is);
      std::string prefix = solve_out;
      if (auto it = cfg.find("out"); it != cfg.end()) {
        if (prefix.empty()) prefix = it->second;
        cfg.erase(it);
      }
      if (prefix.empty()) prefix = "solve";
      const mpode::SolveOutput result = mpode::run_solve(cfg);
      auto traj_os = open_out(prefix + ".trajectory.csv");
      mpode::write_trajectory_csv(traj_os, result.trajectory);
      auto grad_os = open_out(prefix + ".gradients.csv");
      mpode::write_gradients_csv(grad_os, result.gradients);
      std::cout << "steps=" << result.trajectory.steps() << " rescales=" << result.stats.total_rescales() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
