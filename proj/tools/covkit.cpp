#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "covkit/harness.hpp"

using namespace covkit;
using namespace covkit::harness;

namespace {

json task_arg(const std::string& file_or_json) {
  if (!file_or_json.empty() && file_or_json.front() == '{') {
    try {
      return json::parse(file_or_json);
    } catch (const json::parse_error& e) {
      throw ValidationError(std::string("invalid inline task JSON: ") + e.what());
    }
  }
  return load_json_file(file_or_json);
}

int fail(int code, const std::string& msg) {
  std::cerr << error_json(code, msg).dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"covkit: coverage-profile experiments for autoregressive models"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run a sweep described by a JSON config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();

  GenDataOptions gd;
  std::string gd_task;
  auto* gen = app.add_subcommand("gen-data", "Sample a JSONL dataset from a task's data policy");
  gen->add_option("--task", gd_task, "Task spec file, or inline JSON")->required();
  gen->add_option("-n,--n", gd.n, "Number of examples")->default_val(1000);
  gen->add_option("--seed", gd.seed, "Root seed")->default_val(0);
  gen->add_option("-o,--out", gd.out, "Output JSONL path")->required();
  gen->add_flag("--emit-text", gd.emit_text, "Also write a human-readable <out>.txt (graph tasks)");

  EvalOptions ev;
  std::string ev_task;
  auto* eval = app.add_subcommand("eval-coverage", "Coverage curve and metric report between two policies");
  eval->add_option("--task", ev_task, "Task spec file, or inline JSON (supplies the prompt distribution)")->required();
  eval->add_option("--pi-d", ev.pi_d, "Reference policy JSON (default: the task's data policy)");
  eval->add_option("--pi-hat", ev.pi_hat, "Model policy JSON")->required();
  eval->add_option("--N-grid", ev.Ns, "Coverage thresholds (default 2^1..2^16)");
  eval->add_option("--mode", ev.mode, "exact or mc")->default_val("exact");
  eval->add_option("--n-samples", ev.n_samples, "Monte Carlo samples")->default_val(10000);
  eval->add_option("--seed", ev.seed, "Root seed")->default_val(0);
  eval->add_option("-o,--out", ev.out_prefix, "Output prefix for .csv and .json")->required();

  TournamentOptions to;
  auto* tour = app.add_subcommand("tournament", "Select among serialized candidate policies");
  tour->add_option("--candidates", to.candidates, "Candidate policy JSON files")->required();
  tour->add_option("--data", to.dataset, "Dataset JSONL")->required();
  tour->add_option("--kind", to.kind, "simple, offset or ce")->default_val("simple");
  tour->add_option("--N", to.N, "Coverage threshold")->default_val(16);
  tour->add_option("--gamma", to.gamma, "Offset weight")->default_val(0);
  tour->add_option("--offset-mode", to.offset_mode, "auto, exact or mc")->default_val("auto");
  tour->add_option("--m", to.m, "Samples per prompt for the MC offset")->default_val(1000);
  tour->add_option("--seed", to.seed, "Seed for the MC offset")->default_val(0);
  tour->add_option("-o,--out", to.out, "Output JSON path")->required();

  BonOptions bo;
  std::string bo_task;
  auto* bonc = app.add_subcommand("bon", "Best-of-N regret sweep over N");
  bonc->add_option("--task", bo_task, "Task spec file, or inline JSON")->required();
  bonc->add_option("--policy", bo.policy, "Sampling policy JSON")->required();
  bonc->add_option("--comparator", bo.comparator, "Comparator policy JSON (default: the task's data policy)");
  bonc->add_option("--reward", bo.reward, "task, support or adversarial")->default_val("task");
  bonc->add_option("--N", bo.Ns, "Values of N")->default_val(std::vector<std::size_t>{1, 2, 4, 8, 16, 32, 64, 128, 256});
  bonc->add_option("--trials", bo.trials, "Monte Carlo trials per N")->default_val(10000);
  bonc->add_option("--seed", bo.seed, "Root seed")->default_val(0);
  bonc->add_option("-o,--out", bo.out, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitValidation, e.what());
  }

  try {
    if (*run) {
      run_experiment(ExperimentConfig::from_json(load_json_file(config_path)));
    } else if (*gen) {
      gd.task = task_arg(gd_task);
      gen_data(gd);
    } else if (*eval) {
      ev.task = task_arg(ev_task);
      eval_coverage(ev);
    } else if (*tour) {
      tournament(to);
    } else if (*bonc) {
      bo.task = task_arg(bo_task);
      bon(bo);
    }
  } catch (const ValidationError& e) {
    return fail(kExitValidation, e.what());
  } catch (const json::exception& e) {
    return fail(kExitValidation, e.what());
  } catch (const std::exception& e) {
    return fail(kExitRuntime, e.what());
  }
  return kExitOk;
}
