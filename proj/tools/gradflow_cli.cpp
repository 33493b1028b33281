// Command-line front end: pretrain, finetune, sweep, report, verify.
// Exit codes: 0 success, 1 run failure, 2 configuration or usage error.

#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradflow/gradflow.hpp"

namespace {

using namespace gradflow;

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;

// Parallelism cap from the environment. Execution is currently serial, so
// any positive cap is honored trivially; the value is validated and echoed
// so misconfiguration is visible.
int thread_cap() {
  const char* raw = std::getenv("GRADFLOW_THREADS");
  if (raw == nullptr) return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || v < 1)
    throw ConfigError("GRADFLOW_THREADS must be a positive integer");
  return static_cast<int>(v);
}

RunConfig load_config(const std::string& path) {
  return run_config_from_json(read_json_file(path));
}

void print_rows(const RunRecord& record) {
  for (const EvalRow& r : record.rows) {
    std::cout << "  epoch " << r.epoch << "  fd " << r.fd << "  path_len "
              << r.path_len_mean << " +- " << r.path_len_std << "  beta "
              << r.beta << "  loss " << r.loss << '\n';
  }
}

int cmd_pretrain(const std::string& config_path) {
  const RunConfig cfg = load_config(config_path);
  std::cout << "pretrain: " << cfg.output_dir << " (config " << hash_of(cfg)
            << ")\n";
  const PretrainOutcome outcome = pretrain(cfg);
  print_rows(outcome.record);
  std::cout << "checkpoint: " << outcome.record.checkpoint_path << '\n';
  if (outcome.record.failed) {
    std::cerr << "run failed: " << outcome.record.error << '\n';
    return kRunFailure;
  }
  return kOk;
}

int cmd_finetune(const std::string& config_path, const std::string& base) {
  const RunConfig cfg = load_config(config_path);
  std::cout << "finetune: " << cfg.output_dir << " (config " << hash_of(cfg)
            << ") from " << base << '\n';
  const RunRecord record = finetune_from_file(cfg, base);
  print_rows(record);
  std::cout << "checkpoint: " << record.checkpoint_path << '\n';
  if (record.failed) {
    std::cerr << "run failed: " << record.error << '\n';
    return kRunFailure;
  }
  return kOk;
}

int cmd_sweep(const std::string& config_path, const std::string& base,
              const std::vector<double>& beta_mins) {
  const RunConfig cfg = load_config(config_path);
  Checkpoint ckpt;
  if (!base.empty()) {
    ckpt = load_checkpoint(base);
  } else {
    // No base given: pretrain one first with the plain objective.
    RunConfig pre = cfg;
    pre.objective.kind = ObjectiveKind::cfm;
    pre.objective.beta = 0.0;
    pre.output_dir = cfg.output_dir + "/pretrain";
    std::cout << "sweep: no --base checkpoint, pretraining into "
              << pre.output_dir << '\n';
    const PretrainOutcome outcome = pretrain(pre);
    if (outcome.record.failed) {
      std::cerr << "pretrain failed: " << outcome.record.error << '\n';
      return kRunFailure;
    }
    ckpt = outcome.checkpoint;
  }
  const SweepOutcome sweep = run_sweep(cfg, beta_mins, ckpt);
  std::cout << "sweep summary (" << sweep.summary_path << "):\n";
  bool any_failed = false;
  for (const SweepRow& row : sweep.summary) {
    std::cout << "  beta_min " << row.beta_min << "  final_fd " << row.final_fd
              << "  final_path_len " << row.final_path_len << "  "
              << (row.ok ? "ok" : "failed") << '\n';
    any_failed = any_failed || !row.ok;
  }
  return any_failed ? kRunFailure : kOk;
}

int cmd_report(const std::vector<std::string>& run_dirs,
               const std::string& out_dir) {
  const std::vector<std::string> written = emit_report(run_dirs, out_dir);
  for (const std::string& path : written) std::cout << path << '\n';
  return kOk;
}

int cmd_verify(const std::string& out_dir, long finetune_steps) {
  DriftRecoveryOptions opt;
  opt.output_dir = out_dir;
  if (finetune_steps > 0) opt.finetune_steps = finetune_steps;
  const DriftRecoveryOutcome outcome = run_drift_recovery(opt);
  std::cout << "pretrain: " << outcome.pretrain_steps
            << " steps, residual " << outcome.pretrain_residual << '\n';
  bool all_ok = true;
  for (const DriftMatchReport& r : outcome.reports) {
    const bool ok = r.mean_rel_err < 0.10;
    all_ok = all_ok && ok;
    std::cout << "beta " << r.beta << ": mean_rel_err " << r.mean_rel_err
              << "  sup_rel_err " << r.sup_rel_err << "  "
              << (ok ? "ok" : "FAIL") << '\n';
  }
  return all_ok ? kOk : kRunFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-matching training and fine-tuning toolkit"};
  app.require_subcommand(1);

  std::string config_path, base_path, out_dir = "report";
  std::vector<std::string> run_dirs;
  std::vector<double> beta_mins;
  long verify_steps = 0;

  CLI::App* pre = app.add_subcommand("pretrain", "train a base model");
  pre->add_option("config", config_path, "run config JSON")->required();

  CLI::App* fin = app.add_subcommand("finetune", "fine-tune a checkpoint");
  fin->add_option("config", config_path, "run config JSON")->required();
  fin->add_option("--base", base_path, "base checkpoint JSON")->required();

  CLI::App* swp =
      app.add_subcommand("sweep", "fine-tune across final temperatures");
  swp->add_option("config", config_path, "run config JSON")->required();
  swp->add_option("--base", base_path,
                  "base checkpoint JSON (pretrains one when omitted)");
  swp->add_option("--beta-mins", beta_mins, "comma-separated beta_min values")
      ->required()
      ->delimiter(',');

  CLI::App* rep = app.add_subcommand("report", "aggregate finished runs");
  rep->add_option("run_dirs", run_dirs, "run directories")->required();
  rep->add_option("--out", out_dir, "output directory (default: report)");

  CLI::App* ver =
      app.add_subcommand("verify", "check trained fields against the "
                         "analytic optimal drift");
  ver->add_option("--out", out_dir, "directory for JSON reports");
  ver->add_option("--steps", verify_steps, "fine-tune steps per beta");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kOk : kConfigError;
  }

  try {
    const int threads = thread_cap();
    if (threads > 1)
      std::cout << "GRADFLOW_THREADS=" << threads
                << " (execution is serial; cap honored)\n";
    if (pre->parsed()) return cmd_pretrain(config_path);
    if (fin->parsed()) return cmd_finetune(config_path, base_path);
    if (swp->parsed()) return cmd_sweep(config_path, base_path, beta_mins);
    if (rep->parsed())
      return cmd_report(run_dirs, out_dir == "report" ? "report" : out_dir);
    if (ver->parsed())
      return cmd_verify(ver->count("--out") ? out_dir : "", verify_steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const RunFailure& e) {
    std::cerr << "run failure: " << e.what() << '\n';
    return kRunFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunFailure;
  }
  return kConfigError;
}
