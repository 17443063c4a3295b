// confed: command-line front end for runs, sweeps, reports and theory checks.
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 target not reached (run).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "confed/confed.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitNotConverged = 4;

fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CONFED_OUTPUT_DIR"); env && *env) return env;
  return ".";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_run(const std::string& config, const std::vector<std::string>& sets,
            const std::string& out, std::string name) {
  const auto cfg = confed::load_config(config, sets);
  if (name.empty()) name = fs::path(config).stem().string();
  const auto result = confed::run(cfg);
  const auto dir = output_dir(out);
  confed::write_run_outputs(dir, name, result);
  std::cout << "alpha " << result.alpha << "  rounds " << result.rounds << "  final opg "
            << result.final_opg << "  uploads " << result.comm.vrsg_uploads << '\n'
            << "outputs in " << (dir / name).string() << ".*\n";
  if (result.divergence) {
    std::cerr << "diverged: " << result.divergence->what() << '\n';
    return kExitDivergence;
  }
  if (!result.converged) {
    std::cerr << "stop_gap " << cfg.stop_gap << " not reached within " << cfg.max_rounds
              << " rounds\n";
    return kExitNotConverged;
  }
  return 0;
}

int cmd_sweep(const std::string& config, const std::vector<std::string>& sets,
              const std::string& out, const std::string& axis, const std::string& values,
              const std::string& seeds) {
  const auto cfg = confed::load_config(config, sets);
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) seed_list.push_back(std::stoull(s));
  const auto cells = confed::sweep(cfg, confed::parse_sweep_axis(axis), split_list(values), seed_list);
  const auto dir = output_dir(out);
  fs::create_directories(dir);
  const std::string stem = fs::path(config).stem().string() + ".sweep_" + axis;
  for (const auto& cell : cells)
    for (const auto& r : cell.runs)
      confed::write_run_outputs(dir, stem + "_" + cell.value + "_s" + std::to_string(r.config.seed), r);
  std::ofstream summary(dir / (stem + ".csv"));
  confed::write_sweep_summary(summary, axis, cells);
  confed::write_sweep_summary(std::cout, axis, cells);
  return 0;
}

int cmd_report(const std::vector<std::string>& traces, const std::string& out) {
  nlohmann::json all = nlohmann::json::array();
  for (const auto& t : traces) {
    const auto rep = confed::report_file(t);
    all.push_back(rep);
    std::cout << t << ": rows " << rep["rows"] << ", final opg " << rep["final_opg"];
    if (rep["rate_fit"].contains("contraction"))
      std::cout << ", contraction " << rep["rate_fit"]["contraction"] << ", R^2 "
                << rep["rate_fit"]["r_squared"];
    std::cout << '\n';
  }
  const auto dir = output_dir(out);
  fs::create_directories(dir);
  std::ofstream os(dir / "report.json", std::ios::binary);
  os << all.dump(2) << '\n';
  std::cout << "report written to " << (dir / "report.json").string() << '\n';
  return 0;
}

int cmd_theory(const std::string& config, const std::vector<std::string>& sets) {
  const auto cfg = confed::load_config(config, sets);
  const auto problem = confed::build_problem(cfg);
  const auto cert = confed::certify_alpha(cfg, problem);
  const double alpha = cfg.alpha.value_or(cert.alpha);
  const auto k = confed::compute_constants(
      problem.curv.mu, problem.curv.lip, problem.w.sigma, alpha, confed::theory_rho(cfg),
      static_cast<double>(cfg.n_servers), static_cast<double>(cfg.dataset.users_per_server),
      static_cast<double>(cfg.dataset.minibatches_per_user));
  const auto sr = confed::spectral_radius(confed::transition_matrix(k));
  std::cout << confed::theory_json(k, sr, cert).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confederated learning simulator"};
  app.require_subcommand(1);
  std::string out;
  app.add_option("--out", out, "Output directory (default: $CONFED_OUTPUT_DIR or .)");

  std::string config, name, axis, values, seeds;
  std::vector<std::string> sets, traces;

  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("config", config, "Config file")->required();
  run->add_option("--set", sets, "Override key=value");
  run->add_option("--name", name, "Output file stem (default: config stem)");

  auto* sw = app.add_subcommand("sweep", "Sweep one axis over seeds");
  sw->add_option("config", config, "Config file")->required();
  sw->add_option("--set", sets, "Override key=value");
  sw->add_option("--axis", axis, "rho, sr or topology")->required();
  sw->add_option("--values", values, "Comma-separated axis values")->required();
  sw->add_option("--seeds", seeds, "Comma-separated seeds")->required();

  auto* rep = app.add_subcommand("report", "Analyse trace files");
  rep->add_option("traces", traces, "Trace CSV files")->required();

  auto* th = app.add_subcommand("theory", "Constants, rho(T) and certified alpha");
  th->add_option("config", config, "Config file")->required();
  th->add_option("--set", sets, "Override key=value");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, sets, out, name);
    if (*sw) return cmd_sweep(config, sets, out, axis, values, seeds);
    if (*rep) return cmd_report(traces, out);
    if (*th) return cmd_theory(config, sets);
  } catch (const confed::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const confed::ConvergenceError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const confed::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
