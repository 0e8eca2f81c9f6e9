#include "modsquad/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "modsquad/analysis.hpp"
#include "modsquad/checkpoint.hpp"
#include "modsquad/config.hpp"
#include "modsquad/errors.hpp"
#include "modsquad/grad_check.hpp"
#include "modsquad/pruning.hpp"
#include "modsquad/training.hpp"

namespace modsquad::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kProbeSamples = 256;

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides parse_overrides(const std::vector<std::string>& extras) {
  Overrides out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() <= 2) throw ConfigError("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2);
    if (auto eq = key.find('='); eq != std::string::npos) {
      out.emplace_back(key.substr(0, eq), key.substr(eq + 1));
      continue;
    }
    if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " needs a value");
    if (key.find('.') == std::string::npos) throw ConfigError("unknown option --" + key);
    out.emplace_back(key, extras[++i]);
  }
  return out;
}

std::vector<std::string> task_names(const std::vector<TaskSpec>& specs, const std::vector<std::size_t>& ids) {
  std::vector<std::string> names;
  for (auto id : ids) names.push_back(specs.at(id).name);
  return names;
}

fs::path checkpoint_dir(const fs::path& given) {
  if (fs::exists(given / "manifest.json")) return given;
  if (fs::exists(given / "checkpoint" / "manifest.json")) return given / "checkpoint";
  throw ConfigError("no checkpoint found at " + given.string());
}

struct LoadedRun {
  Checkpoint ck;
  RunConfig config;
  SyntheticBenchmark bench;
};

LoadedRun load_run(const fs::path& given) {
  Checkpoint ck = load_checkpoint(checkpoint_dir(given));
  if (!ck.extra.contains("run_config")) throw ConfigError("checkpoint carries no run_config");
  RunConfig cfg = run_config_from_json(ck.extra["run_config"]);
  SyntheticBenchmark bench(cfg.data);
  return {std::move(ck), cfg, std::move(bench)};
}

Split data_split(const SyntheticBenchmark& bench, const std::string& which) {
  if (which == "test") return bench.test_split();
  if (which == "train") return bench.train_split();
  if (which == "probe") return bench.generate(SplitKind::probe, kProbeSamples);
  throw ConfigError("--data must be test, train or probe");
}

std::size_t resolve_task(const SyntheticBenchmark& bench, const std::string& token) {
  const auto& tasks = bench.tasks();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i].name == token) return i;
  }
  std::size_t pos = 0;
  unsigned long id = 0;
  try {
    id = std::stoul(token, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != token.size() || token.empty() || id >= tasks.size()) throw ConfigError("unknown task '" + token + "'");
  return id;
}

json run_extra(const RunConfig& cfg, const SyntheticBenchmark& bench) {
  json names = json::array();
  for (const auto& t : bench.tasks()) names.push_back(t.name);
  return {{"run_config", to_json(cfg)}, {"tasks", names}};
}

json eval_json(const EvalResult& e, const TaskSpec& spec) {
  return {{"metric", spec.kind == TaskKind::regression ? "mse" : "accuracy"},
          {"value", e.metric},
          {"loss", e.loss}};
}

// ---------------------------------------------------------------------------

int cmd_train(const fs::path& config_path, const fs::path& out_dir, Overrides overrides,
              std::optional<std::size_t> epochs, std::ostream& out) {
  RunConfig cfg = load_run_config(config_path, overrides, epochs);
  SyntheticBenchmark bench(cfg.data);
  const auto ids = bench.trained_task_ids();
  const auto& specs = bench.tasks();
  Rng init_rng(cfg.seed);
  ModSquadModel model = ModSquadModel::init(cfg.model, bench.out_dims(ids), init_rng);
  LossWeights weights = LossWeights::init(ids.size(), cfg.loss.w_mi);

  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
  if (!log) throw ConfigError("cannot write to " + out_dir.string());
  const auto names = task_names(specs, ids);
  const auto start = std::chrono::steady_clock::now();
  const Split train = bench.train_split();
  auto result = train_model(model, weights, train, specs, cfg.train, cfg.loss, [&](const StepStats& s) {
    json losses = json::object();
    for (std::size_t t = 0; t < s.task_loss.size(); ++t) losses[names[t]] = s.task_loss[t];
    json rec = {{"step", s.step},      {"lr", s.lr},       {"task_loss", losses}, {"mi", s.mi},
                {"balance", s.balance}, {"total", s.total}, {"grad_norm", s.grad_norm}};
    rec["elapsed_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << rec.dump() << '\n';
  });
  log.close();

  save_checkpoint(out_dir / "checkpoint", model, &weights.log_var, run_extra(cfg, bench));

  const Split test = bench.test_split();
  json tasks = json::object();
  for (auto id : ids) tasks[specs[id].name] = eval_json(evaluate(model, id, specs[id], test), specs[id]);
  UsageStats stats = usage_frequency(model, ids, test);
  export_heatmap(stats, names, out_dir / "usage");
  auto nmi = normalized_mi_per_layer(stats);
  double mean_nmi = 0.0;
  for (double v : nmi) mean_nmi += v / static_cast<double>(nmi.size());
  auto sim = task_similarity(model, ids, bench.generate(SplitKind::probe, kProbeSamples));
  write_text(out_dir / "similarity.csv", similarity_csv(sim, names));

  json metrics = {{"steps", result.history.size()},
                  {"final_total_loss", result.history.empty() ? 0.0 : result.history.back().total},
                  {"tasks", tasks},
                  {"mi_per_layer", mutual_information_per_layer(stats)},
                  {"normalized_mi_per_layer", nmi},
                  {"mean_normalized_mi", mean_nmi}};
  if (bench.config().n_groups > 1 && bench.config().tasks_per_group > 1) {
    auto gc = group_contrast(sim, specs);
    metrics["similarity"] = {{"within_group", gc.within}, {"across_group", gc.across}};
  }
  write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
  out << "trained " << result.history.size() << " steps; mean normalized MI " << mean_nmi << "\n";
  return kOk;
}

int cmd_prune(const fs::path& ckpt, const std::string& task_token, std::optional<double> theta,
              std::optional<double> top, const std::string& data, const fs::path& out_dir, std::ostream& out,
              std::ostream& err) {
  if (theta.has_value() == top.has_value()) throw ConfigError("prune: give exactly one of --theta or --top");
  LoadedRun run = load_run(ckpt);
  const ModSquadModel& model = run.ck.model;
  const std::size_t task = resolve_task(run.bench, task_token);
  if (std::find(model.task_ids.begin(), model.task_ids.end(), task) == model.task_ids.end()) {
    throw ConfigError("task '" + task_token + "' is not served by this checkpoint");
  }
  const Split split = data_split(run.bench, data);
  UsageStats stats = usage_frequency(model, task, split);
  PruneResult res = theta ? prune_threshold(model, task, stats, *theta) : prune_top_share(model, task, stats, *top);
  for (const auto& w : res.warnings) err << "warning: " << w << "\n";

  json extra = run_extra(run.config, run.bench);
  extra["policy"] = theta ? json{{"theta", *theta}} : json{{"top_percent", *top}};
  save_checkpoint(out_dir / "checkpoint", res.model, nullptr, extra, task);

  json layers = json::array();
  for (const auto& l : res.spec.layers) {
    layers.push_back({{"kept", l.kept}, {"original_k", l.original_k}, {"k_adjusted", l.k_adjusted}});
  }
  write_text(out_dir / "prune_spec.json",
             json{{"task", task}, {"task_name", run.bench.tasks()[task].name}, {"layers", layers}}.dump(2) + "\n");

  auto rep = verify_equivalence(model, res.model, task, run.bench.tasks()[task], split);
  json report = {{"max_abs_output_diff", rep.max_abs_output_diff},
                 {"metric_full", rep.metric_full},
                 {"metric_pruned", rep.metric_pruned},
                 {"relative_degradation", rep.relative_degradation()},
                 {"param_counts", {{"full", rep.params_full}, {"pruned", rep.params_pruned}}},
                 {"expert_param_counts", {{"full", rep.expert_params_full}, {"pruned", rep.expert_params_pruned}}},
                 {"checkpoint_bytes",
                  {{"full", checkpoint_blob_size(checkpoint_dir(ckpt))},
                   {"pruned", checkpoint_blob_size(out_dir / "checkpoint")}}},
                 {"removed_expert_evaluations", rep.removed_expert_evaluations},
                 {"warnings", res.warnings}};
  write_text(out_dir / "equivalence.json", report.dump(2) + "\n");
  out << "pruned task " << run.bench.tasks()[task].name << ": params " << rep.params_full << " -> "
      << rep.params_pruned << ", max |diff| " << rep.max_abs_output_diff << "\n";
  return kOk;
}

int cmd_analyze(const fs::path& ckpt, const std::string& data, const fs::path& out_dir, std::ostream& out) {
  LoadedRun run = load_run(ckpt);
  const ModSquadModel& model = run.ck.model;
  const auto names = task_names(run.bench.tasks(), model.task_ids);
  UsageStats stats = usage_frequency(model, model.task_ids, data_split(run.bench, data));
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    for (auto t : stats.tasks) {
      double sum = 0.0;
      for (double v : stats.frequency(l, t)) sum += v;
      if (std::abs(sum - 1.0) > 1e-6) throw CheckFailed("usage row does not sum to 1");
    }
  }
  auto mi = mutual_information_per_layer(stats);
  for (double v : mi) {
    if (v < -1e-12) throw CheckFailed("negative mutual information");
  }
  export_heatmap(stats, names, out_dir);
  if (model.num_tasks() > 1) {
    auto sim = task_similarity(model, model.task_ids, run.bench.generate(SplitKind::probe, kProbeSamples));
    if (!sim.symmetric()) throw CheckFailed("similarity matrix is not symmetric");
    write_text(out_dir / "similarity.csv", similarity_csv(sim, names));
  }
  json report = {{"tasks", names}, {"mi_per_layer", mi}, {"normalized_mi_per_layer", normalized_mi_per_layer(stats)}};
  write_text(out_dir / "mi.json", report.dump(2) + "\n");
  out << "analyzed " << stats.layers.size() << " MoE layers for " << names.size() << " tasks\n";
  return kOk;
}

int cmd_finetune(const fs::path& ckpt, const std::string& task_token, const FinetuneConfig& config,
                 bool baseline, const fs::path& out_dir, std::ostream& out) {
  LoadedRun run = load_run(ckpt);
  const auto heldout = run.bench.heldout_task_ids();
  if (task_token.empty() && heldout.empty()) throw ConfigError("finetune-router: benchmark has no held-out task");
  const std::size_t task = task_token.empty() ? heldout.front() : resolve_task(run.bench, task_token);
  const TaskSpec& spec = run.bench.tasks()[task];
  const Split train = run.bench.train_split();
  const Split test = run.bench.test_split();

  auto res = router_finetune(run.ck.model, task, spec, train, config);
  auto eval = evaluate(res.model, task, spec, test);
  json report = {{"task", spec.name},
                 {"trainable_params", res.trainable_params},
                 {"final_train_loss", res.loss_history.back()},
                 {"test", eval_json(eval, spec)}};
  if (baseline) {
    FinetuneConfig head = config;
    head.mode = FinetuneMode::head;
    auto base = router_finetune(run.ck.model, task, spec, train, head);
    auto base_eval = evaluate(base.model, task, spec, test);
    report["head_only"] = {{"trainable_params", base.trainable_params}, {"test", eval_json(base_eval, spec)}};
  }
  save_checkpoint(out_dir / "checkpoint", res.model, nullptr, run_extra(run.config, run.bench));
  write_text(out_dir / "finetune.json", report.dump(2) + "\n");
  out << "fine-tuned " << spec.name << ": test loss " << eval.loss << "\n";
  return kOk;
}

int cmd_grad_check(double tolerance, bool inject_fault, const fs::path& out_dir, std::ostream& out,
                   std::ostream& err) {
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.inject_fault = inject_fault;
  const auto start = std::chrono::steady_clock::now();
  auto report = grad_check(opts);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json groups = json::array();
  for (const auto& e : report.entries) {
    out << std::left << std::setw(40) << e.name << " rel_err " << std::scientific << std::setprecision(3)
        << e.rel_error << std::defaultfloat << "\n";
    groups.push_back({{"name", e.name}, {"size", e.size}, {"rel_error", e.rel_error}});
  }
  out << "worst " << report.worst << " (" << report.worst_name << ")\n";
  if (!out_dir.empty()) {
    write_text(out_dir / "grad_check.json",
               json{{"worst", report.worst}, {"worst_name", report.worst_name}, {"passed", report.passed},
                    {"tolerance", tolerance}, {"seconds", seconds}, {"groups", groups}}
                       .dump(2) +
                   "\n");
  }
  if (!report.passed) {
    for (const auto& e : report.entries) {
      if (e.rel_error >= tolerance) err << "gradient mismatch: " << e.name << " rel_err " << e.rel_error << "\n";
    }
    return kCheckFailed;
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Task-conditioned mixture-of-experts multi-task trainer"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train on the synthetic benchmark");
  std::string config_path, out_dir;
  std::optional<std::size_t> epochs;
  train->add_option("--config", config_path, "JSON run config")->required();
  train->add_option("--out", out_dir, "Output directory")->required();
  train->add_option("--epochs", epochs, "Override train.epochs");
  train->allow_extras();

  auto* prune = app.add_subcommand("prune", "Extract a standalone pruned model for one task");
  std::string ckpt, task, data = "test";
  std::optional<double> theta, top;
  prune->add_option("--ckpt", ckpt, "Run or checkpoint directory")->required();
  prune->add_option("--task", task, "Task name or id")->required();
  prune->add_option("--theta", theta, "Usage threshold");
  prune->add_option("--top", top, "Keep the top H percent of experts");
  prune->add_option("--data", data, "Statistics split: test, train or probe");
  prune->add_option("--out", out_dir, "Output directory")->required();

  auto* analyze = app.add_subcommand("analyze", "Usage heatmaps, task similarity and MI per layer");
  analyze->add_option("--ckpt", ckpt, "Run or checkpoint directory")->required();
  analyze->add_option("--data", data, "Usage split: test, train or probe");
  analyze->add_option("--out", out_dir, "Output directory")->required();

  auto* finetune = app.add_subcommand("finetune-router", "Learn a new task by training routers and a head");
  FinetuneConfig ft;
  std::string mode = "router";
  bool no_baseline = false;
  finetune->add_option("--ckpt", ckpt, "Run or checkpoint directory")->required();
  finetune->add_option("--task", task, "Held-out task name or id (default: first held-out task)");
  finetune->add_option("--mode", mode, "router, head or full")->check(CLI::IsMember({"router", "head", "full"}));
  finetune->add_option("--steps", ft.steps, "Optimizer steps");
  finetune->add_option("--lr", ft.lr, "Learning rate");
  finetune->add_option("--batch", ft.batch, "Samples per step");
  finetune->add_option("--seed", ft.seed, "Seed for new parameters and batches");
  finetune->add_flag("--no-baseline", no_baseline, "Skip the head-only comparison run");
  finetune->add_option("--out", out_dir, "Output directory")->required();

  auto* gradcheck = app.add_subcommand("grad-check", "Finite-difference check of every parameter gradient");
  double tolerance = 1e-4;
  bool inject = false;
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error");
  gradcheck->add_flag("--inject-fault", inject, "Corrupt one analytic gradient (self-test)");
  gradcheck->add_option("--out", out_dir, "Optional report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, parse_overrides(train->remaining()), epochs, out);
    if (*prune) return cmd_prune(ckpt, task, theta, top, data, out_dir, out, err);
    if (*analyze) return cmd_analyze(ckpt, data, out_dir, out);
    if (*finetune) {
      ft.mode = mode == "router" ? FinetuneMode::router : mode == "head" ? FinetuneMode::head : FinetuneMode::full;
      return cmd_finetune(ckpt, task, ft, !no_baseline, out_dir, out);
    }
    if (*gradcheck) return cmd_grad_check(tolerance, inject, fs::path(out_dir), out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericAbort& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const CheckFailed& e) {
    err << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}

}  // namespace modsquad::cli
