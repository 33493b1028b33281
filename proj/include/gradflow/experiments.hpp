#pragma once

// Config-driven experiment runner: pretraining, anchored fine-tuning (full
// or low-rank), temperature sweeps, and the analytic drift verification.
// Every random draw derives from (config seed, purpose, index) streams, so a
// config hash fully determines checkpoints and metric rows; wall-clock
// columns are the only nondeterministic bytes in any artifact.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradflow/coupling.hpp"
#include "gradflow/distributions.hpp"
#include "gradflow/metrics.hpp"
#include "gradflow/mlp.hpp"
#include "gradflow/objectives.hpp"
#include "gradflow/oracle.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/samplers.hpp"
#include "gradflow/schedules.hpp"
#include "gradflow/serde.hpp"
#include "gradflow/types.hpp"

namespace gradflow {

enum class FinetuneMode { full, lora };

inline std::string to_string(FinetuneMode m) {
  return m == FinetuneMode::full ? "full" : "lora";
}

inline FinetuneMode parse_finetune_mode(const std::string& name) {
  if (name == "full") return FinetuneMode::full;
  if (name == "lora") return FinetuneMode::lora;
  throw std::invalid_argument("unknown finetune mode: " + name);
}

struct EvalSettings {
  int fd_gen_samples = 512;   // model samples generated per FD evaluation
  int path_len_samples = 64;  // start points for the path-length estimate
  int ode_steps = 100;        // integration grid for both
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  std::vector<int> arch = {3, 64, 64, 2};
  Activation activation = Activation::tanh;
  DistributionSpec source;
  std::optional<DistributionSpec> pretrain_target;
  std::optional<DistributionSpec> finetune_target;
  ObjectiveSpec objective;
  CoolingSchedule schedule;  // total_steps is overwritten per run
  CouplingKind coupling = CouplingKind::ot_exact;
  double sinkhorn_epsilon = 0.05;
  int sinkhorn_iters = 200;
  AdamConfig optimizer;
  long epochs = 100;
  long eval_every = 50;  // epochs between metric evaluations
  int batch_size = 256;
  int pool_size = 4096;
  FinetuneMode finetune_mode = FinetuneMode::full;
  int lora_rank = 4;
  double lora_scale = 1.0;
  EvalSettings eval;
  int dump_trajectories = 0;
  bool log_kl_to_base = false;
  double kl_sigma = 1.0;
  int kl_trajectories = 64;
  int kl_steps = 50;
};

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["arch"] = c.arch;
  j["activation"] = to_string(c.activation);
  j["source"] = to_json(c.source);
  if (c.pretrain_target) j["pretrain_target"] = to_json(*c.pretrain_target);
  if (c.finetune_target) j["finetune_target"] = to_json(*c.finetune_target);
  j["objective"] = to_json(c.objective);
  j["schedule"] = to_json(c.schedule);
  j["coupling"] = to_string(c.coupling);
  j["sinkhorn_epsilon"] = c.sinkhorn_epsilon;
  j["sinkhorn_iters"] = c.sinkhorn_iters;
  j["optimizer"] = Json{{"lr", c.optimizer.lr},
                        {"beta1", c.optimizer.beta1},
                        {"beta2", c.optimizer.beta2},
                        {"eps", c.optimizer.eps}};
  j["epochs"] = c.epochs;
  j["eval_every"] = c.eval_every;
  j["batch_size"] = c.batch_size;
  j["pool_size"] = c.pool_size;
  j["finetune_mode"] = to_string(c.finetune_mode);
  j["lora_rank"] = c.lora_rank;
  j["lora_scale"] = c.lora_scale;
  j["eval"] = Json{{"fd_gen_samples", c.eval.fd_gen_samples},
                   {"path_len_samples", c.eval.path_len_samples},
                   {"ode_steps", c.eval.ode_steps}};
  j["dump_trajectories"] = c.dump_trajectories;
  j["log_kl_to_base"] = c.log_kl_to_base;
  j["kl_sigma"] = c.kl_sigma;
  j["kl_trajectories"] = c.kl_trajectories;
  j["kl_steps"] = c.kl_steps;
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  try {
    if (!j.contains("source")) throw ConfigError("config: missing source");
    c.source = distribution_from_json(j.at("source"));
    if (j.contains("pretrain_target"))
      c.pretrain_target = distribution_from_json(j.at("pretrain_target"));
    if (j.contains("finetune_target"))
      c.finetune_target = distribution_from_json(j.at("finetune_target"));
    c.seed = detail::get_or<std::uint64_t>(j, "seed", 1);
    c.output_dir = detail::get_or<std::string>(j, "output_dir", "run");
    c.arch = detail::get_or<std::vector<int>>(j, "arch", c.arch);
    validate_arch(c.arch);
    c.activation = parse_activation(
        detail::get_or<std::string>(j, "activation", "tanh"));
    if (j.contains("objective"))
      c.objective = objective_from_json(j.at("objective"));
    if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
    c.coupling = parse_coupling_kind(
        detail::get_or<std::string>(j, "coupling", "ot"));
    c.sinkhorn_epsilon = detail::get_or(j, "sinkhorn_epsilon", 0.05);
    c.sinkhorn_iters = detail::get_or(j, "sinkhorn_iters", 200);
    if (j.contains("optimizer")) {
      const Json& o = j.at("optimizer");
      c.optimizer.lr = detail::get_or(o, "lr", 1e-3);
      c.optimizer.beta1 = detail::get_or(o, "beta1", 0.9);
      c.optimizer.beta2 = detail::get_or(o, "beta2", 0.999);
      c.optimizer.eps = detail::get_or(o, "eps", 1e-8);
    }
    c.epochs = detail::get_or<long>(j, "epochs", 100);
    c.eval_every = detail::get_or<long>(j, "eval_every", 50);
    c.batch_size = detail::get_or(j, "batch_size", 256);
    c.pool_size = detail::get_or(j, "pool_size", 4096);
    c.finetune_mode = parse_finetune_mode(
        detail::get_or<std::string>(j, "finetune_mode", "full"));
    c.lora_rank = detail::get_or(j, "lora_rank", 4);
    c.lora_scale = detail::get_or(j, "lora_scale", 1.0);
    if (j.contains("eval")) {
      const Json& e = j.at("eval");
      c.eval.fd_gen_samples = detail::get_or(e, "fd_gen_samples", 512);
      c.eval.path_len_samples = detail::get_or(e, "path_len_samples", 64);
      c.eval.ode_steps = detail::get_or(e, "ode_steps", 100);
    }
    c.dump_trajectories = detail::get_or(j, "dump_trajectories", 0);
    c.log_kl_to_base = detail::get_or(j, "log_kl_to_base", false);
    c.kl_sigma = detail::get_or(j, "kl_sigma", 1.0);
    c.kl_trajectories = detail::get_or(j, "kl_trajectories", 64);
    c.kl_steps = detail::get_or(j, "kl_steps", 50);
    if (c.epochs < 0) throw ConfigError("config: negative epochs");
    if (c.eval_every < 1) throw ConfigError("config: eval_every < 1");
    if (c.batch_size < 1) throw ConfigError("config: batch_size < 1");
    if (c.pool_size < 5) throw ConfigError("config: pool_size < 5");
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline std::string hash_of(const RunConfig& c) {
  return config_hash(to_json(c));
}

// One evaluation record. kl_to_base is NaN when not measured.
struct EvalRow {
  long epoch = 0;
  double fd = 0.0;
  double path_len_mean = 0.0;
  double path_len_std = 0.0;
  double beta = 0.0;
  double loss = 0.0;
  double kl_to_base = std::numeric_limits<double>::quiet_NaN();
  long wall_ms = 0;
};

struct RunRecord {
  std::string label;
  std::string config_hash;
  std::string output_dir;
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<EvalRow> rows;
  long wall_ms_total = 0;
  bool failed = false;
  std::string error;
};

// A training run that had to abort (after saving its last good state).
class RunFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EvalRow>& rows, bool with_kl) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,fd,path_len_mean,path_len_std,beta,loss";
  if (with_kl) out << ",kl_to_base";
  out << ",wall_ms\n";
  for (const EvalRow& r : rows) {
    out << r.epoch << ',' << format_g17(r.fd) << ','
        << format_g17(r.path_len_mean) << ',' << format_g17(r.path_len_std)
        << ',' << format_g17(r.beta) << ',' << format_g17(r.loss);
    if (with_kl) out << ',' << format_g17(r.kl_to_base);
    out << ',' << r.wall_ms << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Step-start rows (t_i, x_i, v_i); the final row carries the terminal state
// with the last drift sample repeated so every row has the same width.
inline void write_trajectory_csv(const std::string& path,
                                 const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const Eigen::Index d = traj.states.cols();
  out << "t";
  for (Eigen::Index k = 0; k < d; ++k) out << ",x_" << k;
  for (Eigen::Index k = 0; k < d; ++k) out << ",v_" << k;
  out << "\n";
  const Eigen::Index n = traj.states.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index vi = std::min(i, traj.velocities.rows() - 1);
    out << format_g17(traj.times[i]);
    for (Eigen::Index k = 0; k < d; ++k)
      out << ',' << format_g17(traj.states(i, k));
    for (Eigen::Index k = 0; k < d; ++k)
      out << ',' << format_g17(traj.velocities(vi, k));
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string dir_basename(const std::string& dir) {
  const std::filesystem::path p(dir);
  const std::string name = p.filename().string();
  return name.empty() ? p.parent_path().filename().string() : name;
}

inline bool state_finite(const MlpParams& model,
                         const std::optional<LoraAdapter>& adapter) {
  if (!model.theta.allFinite()) return false;
  if (adapter) {
    for (const Mat& m : adapter->a)
      if (!m.allFinite()) return false;
    for (const Mat& m : adapter->b)
      if (!m.allFinite()) return false;
  }
  return true;
}

// What one training phase operates on: the target to match, the parameters
// being trained, an optional adapter (base frozen when present), and an
// optional frozen anchor field for the anchored objective.
struct PhaseSetup {
  DistributionSpec target;
  MlpParams model;
  std::optional<LoraAdapter> adapter;
  std::optional<MlpParams> anchor;
};

struct TrainOutput {
  RunRecord record;
  Checkpoint checkpoint;
};

inline TrainOutput train_run(const RunConfig& cfg, PhaseSetup setup) {
  namespace fs = std::filesystem;
  using Clock = std::chrono::steady_clock;

  setup.target.validate();
  cfg.source.validate();
  if (cfg.source.dim != setup.target.dim)
    throw ConfigError("run: source and target dimension differ");
  if (cfg.arch.front() != cfg.source.dim + 1 ||
      cfg.arch.back() != cfg.source.dim)
    throw ConfigError("run: arch does not match data dimension");
  validate_params(setup.model);

  const bool anchored_run =
      cfg.objective.kind == ObjectiveKind::gft && setup.anchor.has_value();
  CoolingSchedule sched = cfg.schedule;
  if (!anchored_run) {
    // Plain flow matching trains and logs at beta identically 0.
    sched.kind = ScheduleKind::constant;
    sched.beta_max = 0.0;
    sched.beta_min = 0.0;
  }

  const Mat pool =
      sample(setup.target, cfg.pool_size, mix64(cfg.seed, 100));
  const int heldout_count = cfg.pool_size / 5;  // FD-only holdout
  const int train_count = cfg.pool_size - heldout_count;
  const Mat heldout = pool.bottomRows(heldout_count);
  const Mat train_pool = pool.topRows(train_count);
  if (cfg.batch_size > train_count)
    throw ConfigError("run: batch_size exceeds training pool");
  const long steps_per_epoch = train_count / cfg.batch_size;
  const long total_steps = cfg.epochs * steps_per_epoch;
  sched.total_steps = std::max<long>(1, total_steps);
  sched.validate();

  fs::create_directories(cfg.output_dir);
  Json cfg_json = to_json(cfg);
  const std::string hash = config_hash(cfg_json);
  cfg_json["config_hash"] = hash;
  write_json_file(cfg.output_dir + "/config.json", cfg_json);

  TrainOutput out;
  RunRecord& record = out.record;
  record.label = dir_basename(cfg.output_dir);
  record.config_hash = hash;
  record.output_dir = cfg.output_dir;
  record.checkpoint_path = cfg.output_dir + "/checkpoint.json";
  record.metrics_path = cfg.output_dir + "/metrics.csv";
  const bool with_kl = cfg.log_kl_to_base && setup.anchor.has_value();

  const auto t_start = Clock::now();
  const auto elapsed_ms = [&t_start] {
    return static_cast<long>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                 Clock::now() - t_start)
                                 .count());
  };

  const LoraAdapter* adapter_ptr =
      setup.adapter ? &*setup.adapter : nullptr;

  const auto current_field = [&]() -> VelocityFn {
    return adapter_ptr ? field_of(setup.model, *setup.adapter)
                       : field_of(setup.model);
  };

  const auto do_eval = [&](long epoch, long step, double loss_value) {
    EvalRow row;
    row.epoch = epoch;
    row.beta = beta_at(sched, std::min(step, sched.total_steps));
    row.loss = loss_value;
    const VelocityFn field = current_field();
    const Mat fd_x0 = sample(cfg.source, cfg.eval.fd_gen_samples,
                             mix64(cfg.seed, 600, static_cast<std::uint64_t>(epoch)));
    const Mat generated = ode_terminal_states(field, fd_x0, cfg.eval.ode_steps);
    row.fd = frechet_gaussian_distance(generated, heldout);
    const Mat pl_x0 = sample(cfg.source, cfg.eval.path_len_samples,
                             mix64(cfg.seed, 700, static_cast<std::uint64_t>(epoch)));
    const PathLength pl = path_length(field, pl_x0, cfg.eval.ode_steps);
    row.path_len_mean = pl.mean;
    row.path_len_std = pl.std_dev;
    if (with_kl) {
      const Mat kl_x0 = sample(cfg.source, cfg.kl_trajectories,
                               mix64(cfg.seed, 800, static_cast<std::uint64_t>(epoch)));
      const auto trajs =
          sde_batch(field, cfg.kl_sigma, kl_x0, cfg.kl_steps,
                    mix64(cfg.seed, 810, static_cast<std::uint64_t>(epoch)));
      row.kl_to_base =
          girsanov_kl_mc(field, field_of(*setup.anchor), cfg.kl_sigma, trajs);
    }
    row.wall_ms = elapsed_ms();
    record.rows.push_back(row);
  };

  // Probe loss before any update, on streams no training step uses.
  {
    const std::uint64_t probe_tag =
        static_cast<std::uint64_t>(sched.total_steps) + 1;
    const Mat px0 = sample(cfg.source, cfg.batch_size,
                           mix64(cfg.seed, 200, probe_tag));
    const Mat px1 = sample(setup.target, cfg.batch_size,
                           mix64(cfg.seed, 201, probe_tag));
    const CoupledBatch pb =
        make_coupling(cfg.coupling, px0, px1, mix64(cfg.seed, 400, probe_tag),
                      cfg.sinkhorn_epsilon, cfg.sinkhorn_iters);
    const double beta0 = anchored_run ? beta_at(sched, 0) : 0.0;
    const double probe = interpolation_loss(
        setup.model, adapter_ptr, setup.anchor ? &*setup.anchor : nullptr, pb,
        beta0, cfg.objective.sigma, mix64(cfg.seed, 500, probe_tag));
    do_eval(0, 0, probe);
  }

  AdamState opt_state;
  MlpParams good_model = setup.model;
  std::optional<LoraAdapter> good_adapter = setup.adapter;
  long global_step = 0;
  bool aborted = false;

  for (long e = 0; e < cfg.epochs && !aborted; ++e) {
    const std::vector<int> perm = random_permutation(
        train_count, mix64(cfg.seed, 300, static_cast<std::uint64_t>(e)));
    double epoch_loss = 0.0;
    try {
      for (long s = 0; s < steps_per_epoch; ++s) {
        const std::uint64_t gs = static_cast<std::uint64_t>(global_step);
        Mat x1(cfg.batch_size, cfg.source.dim);
        for (int i = 0; i < cfg.batch_size; ++i)
          x1.row(i) = train_pool.row(
              perm[static_cast<std::size_t>(s) * cfg.batch_size + i]);
        const Mat x0 =
            sample(cfg.source, cfg.batch_size, mix64(cfg.seed, 200, gs));
        const CoupledBatch batch =
            make_coupling(cfg.coupling, x0, x1, mix64(cfg.seed, 400, gs),
                          cfg.sinkhorn_epsilon, cfg.sinkhorn_iters);
        const TrainingPoints pts = build_training_points(
            batch, cfg.objective.sigma, mix64(cfg.seed, 500, gs));
        const double beta_s =
            anchored_run ? beta_at(sched, global_step) : 0.0;
        Mat base_v;
        if (beta_s > 0.0)
          base_v = forward_batch(*setup.anchor, nullptr, pts.xt, pts.t);
        const GradResult grad = loss_and_grad(
            setup.model, adapter_ptr, pts.xt, pts.t,
            anchored_square_objective(pts.u, base_v, beta_s));
        epoch_loss += grad.loss;
        if (setup.adapter) {
          Vec flat = pack_lora(*setup.adapter);
          adam_step(flat, grad.grad_lora, opt_state, cfg.optimizer);
          unpack_lora(flat, *setup.adapter);
        } else {
          adam_step(setup.model.theta, grad.grad_theta, opt_state,
                    cfg.optimizer);
        }
        if (!state_finite(setup.model, setup.adapter))
          throw NonFiniteError("non-finite parameters after update");
        good_model = setup.model;
        good_adapter = setup.adapter;
        ++global_step;
      }
      epoch_loss /= static_cast<double>(steps_per_epoch);
      if ((e + 1) % cfg.eval_every == 0 || e + 1 == cfg.epochs)
        do_eval(e + 1, global_step, epoch_loss);
    } catch (const NonFiniteError& err) {
      setup.model = good_model;
      setup.adapter = good_adapter;
      record.failed = true;
      record.error = err.what();
      aborted = true;
    }
  }

  record.wall_ms_total = elapsed_ms();
  write_metrics_csv(record.metrics_path, record.rows, with_kl);

  out.checkpoint.model = setup.model;
  out.checkpoint.lora = setup.adapter;
  out.checkpoint.step = global_step;
  out.checkpoint.seed = cfg.seed;
  out.checkpoint.config_hash = hash;
  save_checkpoint(record.checkpoint_path, out.checkpoint);

  if (!record.failed && cfg.dump_trajectories > 0) {
    const VelocityFn field = current_field();
    const Mat x0s = sample(cfg.source, cfg.dump_trajectories,
                           mix64(cfg.seed, 900));
    for (int i = 0; i < cfg.dump_trajectories; ++i) {
      const Vec x0 = x0s.row(i);
      write_trajectory_csv(
          cfg.output_dir + "/traj_" + std::to_string(i) + ".csv",
          ode_euler(field, x0, cfg.eval.ode_steps));
    }
  }
  return out;
}

}  // namespace detail

struct PretrainOutcome {
  Checkpoint checkpoint;
  RunRecord record;
};

// Trains from a fresh initialization against pretrain_target with the plain
// flow-matching loss. On a non-finite loss the last good parameters are
// still written out and the record is marked failed.
inline PretrainOutcome pretrain(const RunConfig& cfg) {
  if (cfg.objective.kind != ObjectiveKind::cfm)
    throw ConfigError("pretrain: objective kind must be cfm");
  if (!cfg.pretrain_target)
    throw ConfigError("pretrain: missing pretrain_target");
  detail::PhaseSetup setup;
  setup.target = *cfg.pretrain_target;
  setup.model = mlp_init(cfg.arch, cfg.activation, mix64(cfg.seed, 1));
  detail::TrainOutput out = detail::train_run(cfg, std::move(setup));
  return {std::move(out.checkpoint), std::move(out.record)};
}

// Fine-tunes a pretrained checkpoint against finetune_target, with the plain
// or anchored objective, full-parameter or low-rank. Any adapter already in
// the checkpoint is merged before fine-tuning begins.
inline RunRecord finetune(const RunConfig& cfg, const Checkpoint& base) {
  if (!cfg.finetune_target)
    throw ConfigError("finetune: missing finetune_target");
  if (base.model.arch != cfg.arch)
    throw ConfigError("finetune: checkpoint arch does not match config");
  detail::PhaseSetup setup;
  setup.target = *cfg.finetune_target;
  setup.model =
      base.lora ? merge_lora(base.model, *base.lora) : base.model;
  if (cfg.finetune_mode == FinetuneMode::lora)
    setup.adapter = lora_wrap(setup.model, cfg.lora_rank, mix64(cfg.seed, 2),
                              cfg.lora_scale);
  if (cfg.objective.kind == ObjectiveKind::gft) setup.anchor = setup.model;
  return detail::train_run(cfg, std::move(setup)).record;
}

inline RunRecord finetune_from_file(const RunConfig& cfg,
                                    const std::string& ckpt_path) {
  return finetune(cfg, load_checkpoint(ckpt_path));
}

struct SweepRow {
  double beta_min = 0.0;
  double final_fd = 0.0;
  double final_path_len = 0.0;
  bool ok = false;
};

struct SweepOutcome {
  std::vector<RunRecord> records;
  std::vector<SweepRow> summary;
  std::string summary_path;
};

// One fine-tune per beta_min (ascending), all from the same base checkpoint.
// Individual failures are recorded and do not stop the sweep.
inline SweepOutcome run_sweep(const RunConfig& base_cfg,
                              std::vector<double> beta_mins,
                              const Checkpoint& base) {
  if (beta_mins.empty()) throw ConfigError("sweep: empty beta_min list");
  if (base_cfg.objective.kind != ObjectiveKind::gft)
    throw ConfigError("sweep: objective kind must be gft");
  std::sort(beta_mins.begin(), beta_mins.end());
  const std::vector<CoolingSchedule> schedules =
      sweep_schedules(base_cfg.schedule, beta_mins);
  SweepOutcome out;
  for (std::size_t i = 0; i < schedules.size(); ++i) {
    RunConfig cfg = base_cfg;
    cfg.schedule = schedules[i];
    char tag[32];
    std::snprintf(tag, sizeof tag, "%g", beta_mins[i]);
    cfg.output_dir = base_cfg.output_dir + "/beta_min_" + tag;
    SweepRow row;
    row.beta_min = beta_mins[i];
    try {
      RunRecord rec = finetune(cfg, base);
      row.ok = !rec.failed;
      if (!rec.rows.empty()) {
        row.final_fd = rec.rows.back().fd;
        row.final_path_len = rec.rows.back().path_len_mean;
      }
      out.records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      RunRecord failed;
      failed.label = detail::dir_basename(cfg.output_dir);
      failed.output_dir = cfg.output_dir;
      failed.failed = true;
      failed.error = e.what();
      out.records.push_back(std::move(failed));
    }
    out.summary.push_back(row);
  }
  std::filesystem::create_directories(base_cfg.output_dir);
  out.summary_path = base_cfg.output_dir + "/sweep_summary.csv";
  std::ofstream sum(out.summary_path);
  if (!sum) throw std::runtime_error("cannot write " + out.summary_path);
  sum << "beta_min,final_fd,final_path_len,status\n";
  for (const SweepRow& r : out.summary)
    sum << detail::format_g17(r.beta_min) << ','
        << detail::format_g17(r.final_fd) << ','
        << detail::format_g17(r.final_path_len) << ','
        << (r.ok ? "ok" : "failed") << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Analytic drift verification
// ---------------------------------------------------------------------------

struct DriftRecoveryOptions {
  std::vector<double> betas = {0.0, 0.5, 1.0, 2.0, 1e6};
  long pretrain_max_steps = 6000;
  long finetune_steps = 5000;
  int batch = 128;
  double lr = 1e-3;
  std::uint64_t seed = 7;
  std::vector<int> arch = {2, 64, 64, 1};
  double base_shift = 0.0;
  // Terminal std of the base path. Kept wide so the base marginals cover the
  // target path's probe box; the pretrained field is then accurate on the
  // region where the fine-tuned field is scored.
  double base_terminal_std = 3.0;
  double target_shift = 2.0;
  std::string output_dir;  // empty: no files written
};

struct DriftRecoveryOutcome {
  std::vector<DriftMatchReport> reports;  // one per beta, in input order
  double pretrain_residual = 0.0;
  long pretrain_steps = 0;
};

inline Json to_json(const DriftMatchReport& r) {
  return Json{{"beta", r.beta},
              {"probe_grid_spec",
               Json{{"t_lo", r.t_lo},
                    {"t_hi", r.t_hi},
                    {"t_count", r.t_count},
                    {"x_margin_sigmas", r.x_margin_sigmas},
                    {"x_count_per_dim", r.x_count_per_dim}}},
              {"sup_rel_err", r.sup_rel_err},
              {"mean_rel_err", r.mean_rel_err},
              {"pretrain_residual", r.pretrain_residual}};
}

namespace detail {

// Minibatches for a Gaussian path under the product coupling: fresh
// independent endpoint draws paired by index.
inline CoupledBatch path_batch(const GaussianPath& path, int n,
                               std::uint64_t seed) {
  CoupledBatch b;
  b.x0 = sample(make_isotropic_gaussian(path.m0, path.s0 * path.s0), n,
                mix64(seed, 0));
  b.x1 = sample(make_isotropic_gaussian(path.m1, path.s1 * path.s1), n,
                mix64(seed, 1));
  b.kind = CouplingKind::independent;
  b.transport_cost = b.recompute_cost();
  return b;
}

}  // namespace detail

// Pretrains a base field on the base path until the loss plateaus, then for
// each beta fine-tunes a copy with the anchored objective toward the target
// path and scores it against the analytic convex-combination field.
inline DriftRecoveryOutcome run_drift_recovery(const DriftRecoveryOptions& opt) {
  GaussianPath base_path;
  base_path.m0 = Vec::Zero(1);
  base_path.m1 = Vec::Constant(1, opt.base_shift);
  base_path.s1 = opt.base_terminal_std;
  GaussianPath target_path;
  target_path.m0 = Vec::Zero(1);
  target_path.m1 = Vec::Constant(1, opt.target_shift);
  base_path.validate();
  target_path.validate();

  DriftRecoveryOutcome out;
  const AdamConfig adam{opt.lr, 0.9, 0.999, 1e-8};

  // Plateau-terminated pretraining with the plain loss.
  MlpParams base_model = mlp_init(opt.arch, Activation::tanh,
                                  mix64(opt.seed, 11));
  {
    AdamState st;
    std::vector<double> losses;
    for (long s = 0; s < opt.pretrain_max_steps; ++s) {
      const std::uint64_t us = static_cast<std::uint64_t>(s);
      const CoupledBatch b =
          detail::path_batch(base_path, opt.batch, mix64(opt.seed, 20, us));
      const TrainingPoints pts =
          build_training_points(b, 0.0, mix64(opt.seed, 21, us));
      const GradResult g =
          loss_and_grad(base_model, nullptr, pts.xt, pts.t,
                        anchored_square_objective(pts.u, Mat(), 0.0));
      adam_step(base_model.theta, g.grad_theta, st, adam);
      losses.push_back(g.loss);
      out.pretrain_steps = s + 1;
      if (losses.size() >= 400 && losses.size() % 200 == 0) {
        const auto mean_of = [&](std::size_t from, std::size_t to) {
          double m = 0.0;
          for (std::size_t i = from; i < to; ++i) m += losses[i];
          return m / static_cast<double>(to - from);
        };
        const std::size_t n = losses.size();
        const double recent = mean_of(n - 200, n);
        const double prior = mean_of(n - 400, n - 200);
        if (std::abs(recent - prior) / std::max(prior, 1e-12) < 1e-3) {
          out.pretrain_residual = recent;
          break;
        }
        out.pretrain_residual = recent;
      }
    }
  }

  for (double beta : opt.betas) {
    MlpParams model = base_model;
    AdamState st;
    for (long s = 0; s < opt.finetune_steps; ++s) {
      const std::uint64_t us = static_cast<std::uint64_t>(s);
      const CoupledBatch b = detail::path_batch(
          target_path, opt.batch, mix64(opt.seed, 30, us));
      const TrainingPoints pts =
          build_training_points(b, 0.0, mix64(opt.seed, 31, us));
      Mat base_v;
      if (beta > 0.0)
        base_v = forward_batch(base_model, nullptr, pts.xt, pts.t);
      const GradResult g =
          loss_and_grad(model, nullptr, pts.xt, pts.t,
                        anchored_square_objective(pts.u, base_v, beta));
      adam_step(model.theta, g.grad_theta, st, adam);
    }
    DriftMatchReport report =
        verify_optimal_drift(base_path, target_path, beta, field_of(model),
                        out.pretrain_residual);
    if (!opt.output_dir.empty()) {
      std::filesystem::create_directories(opt.output_dir);
      char tag[32];
      std::snprintf(tag, sizeof tag, "%g", beta);
      write_json_file(
          opt.output_dir + "/drift_beta_" + tag + ".json",
          to_json(report));
    }
    out.reports.push_back(report);
  }
  return out;
}

}  // namespace gradflow
