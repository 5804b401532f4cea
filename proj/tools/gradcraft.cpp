// gradcraft command-line tool.
//
//   gradcraft run <config.json>
//   gradcraft sweep <config.json>
//   gradcraft craft <dump.json> --strategy S --tau T --eps E --out FILE
//
// Exit codes: 0 ok, 1 usage, 2 parse error, 3 validation error,
// 4 numerical failure, 5 I/O error.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gradcraft/experiment.hpp"

namespace {

using namespace gradcraft;

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "gradcraft: " << kind << ": " << e.what() << "\n";
  return code;
}

template <class F>
int guarded(F&& body) {
  try {
    body();
    return kExitOk;
  } catch (const ParseError& e) {
    return report("parse error", e, kExitParse);
  } catch (const ValidationError& e) {
    return report("invalid input", e, kExitValidation);
  } catch (const NumericalError& e) {
    return report("numerical failure", e, kExitNumerical);
  } catch (const SingularSystemError& e) {
    return report("numerical failure", e, kExitNumerical);
  } catch (const DegenerateInputError& e) {
    return report("numerical failure", e, kExitNumerical);
  } catch (const IoError& e) {
    return report("i/o error", e, kExitIo);
  } catch (const std::filesystem::filesystem_error& e) {
    return report("i/o error", e, kExitIo);
  } catch (const UsageError& e) {
    return report("usage", e, kExitUsage);
  } catch (const std::exception& e) {
    return report("error", e, kExitUsage);
  }
}

std::size_t count_ok(const ExperimentResult& res) {
  std::size_t ok = 0;
  for (const auto& r : res.runs) ok += r.result.status == RunStatus::Ok;
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient crafting for multi-task learning"};
  app.require_subcommand(1);

  std::string run_config;
  auto* run = app.add_subcommand("run", "Train every strategy on every seed of a config");
  run->add_option("config", run_config, "Experiment config (JSON)")->required();

  std::string sweep_config;
  auto* sweep = app.add_subcommand("sweep", "Run the tau/epsilon grid of a config");
  sweep->add_option("config", sweep_config, "Experiment config with a sweep section")->required();

  std::string dump_path;
  std::string out_path;
  std::string strategy_name = "GradCraft";
  CraftConfig craft;
  auto* craft_cmd = app.add_subcommand("craft", "Craft one set of task gradients from a dump file");
  craft_cmd->add_option("dump", dump_path, "Gradient dump (JSON)")->required();
  craft_cmd->add_option("--strategy", strategy_name, "Strategy name")->capture_default_str();
  craft_cmd->add_option("--tau", craft.tau, "Magnitude adjustment strength in [0, 1]")
      ->capture_default_str();
  craft_cmd->add_option("--eps", craft.epsilon, "Projection target scale (>= 0)")
      ->capture_default_str();
  craft_cmd->add_option("--conflict-tol", craft.conflict_tol, "Conflict threshold")
      ->capture_default_str();
  craft_cmd->add_option("--residual-tol", craft.residual_tol, "Projection residual tolerance")
      ->capture_default_str();
  craft_cmd->add_option("--seed", craft.rng_seed, "Seed for shuffling strategies")
      ->capture_default_str();
  craft_cmd->add_option("--out", out_path, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (*run) {
    return guarded([&] {
      const ExperimentConfig cfg = load_experiment_config(run_config);
      const ExperimentResult res = run_experiment(cfg);
      std::cout << "wrote " << output_dir_from_env(cfg.output_dir) << " (" << count_ok(res) << "/"
                << res.runs.size() << " runs ok)\n";
    });
  }
  if (*sweep) {
    return guarded([&] {
      ExperimentConfig cfg = load_experiment_config(sweep_config);
      if (!cfg.sweep) throw ValidationError("sweep", "config has no sweep section");
      const SweepResult s = run_sweep(cfg);
      std::cout << "best tau=" << format_double(s.best_tau)
                << " epsilon=" << format_double(s.best_epsilon)
                << " score=" << format_double(s.best_score) << "\n";
    });
  }
  return guarded([&] {
    const auto strategy = parse_strategy(strategy_name);
    if (!strategy) throw UsageError("unknown strategy '" + strategy_name + "'");
    craft.strategy = *strategy;
    craft.validate();
    craft_file(dump_path, out_path, craft);
  });
}
