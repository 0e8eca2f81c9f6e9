#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "modsquad/mi.hpp"
#include "modsquad/moe.hpp"

namespace modsquad {

// ---------------------------------------------------------------------------
// Synthetic multi-task benchmark
// ---------------------------------------------------------------------------

struct BenchmarkConfig {
  std::size_t n_groups = 2;
  std::size_t tasks_per_group = 2;
  // Extra regression tasks, never trained jointly, for router fine-tuning.
  std::size_t heldout_tasks = 1;
  std::size_t d_in = 8;
  std::size_t seq_len = 4;
  std::size_t d_latent = 4;
  std::size_t regression_dim = 2;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  double noise_std = 0.05;
  std::uint64_t seed = 7;

  std::size_t trained_tasks() const { return n_groups * tasks_per_group; }
  void validate() const;
};

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::regression;
  std::size_t out_dim = 1;
  std::size_t group = 0;
  bool heldout = false;
};

struct TaskTargets {
  std::vector<double> values;  // regression, [samples x out_dim]
  std::vector<int> labels;     // classification, [samples]
};

// Inputs shared by every task plus per-task targets.
struct Split {
  std::size_t samples = 0;
  std::size_t seq_len = 0;
  std::size_t d_in = 0;
  std::vector<double> inputs;         // [samples x seq_len x d_in]
  std::vector<TaskTargets> targets;   // indexed by global task id

  std::size_t sample_size() const { return seq_len * d_in; }
  // Sub-split holding the given samples in order.
  Split select(std::span<const std::size_t> indices) const;
};

enum class SplitKind { train, test, probe };

// Tasks in one group read the same latent features tanh(x P_g) pooled over
// tokens; groups use independent projections P_g.
class SyntheticBenchmark {
 public:
  explicit SyntheticBenchmark(BenchmarkConfig config);

  const BenchmarkConfig& config() const { return config_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::vector<std::size_t> trained_task_ids() const;
  std::vector<std::size_t> heldout_task_ids() const;
  std::vector<std::size_t> out_dims(std::span<const std::size_t> task_ids) const;

  // Deterministic in (config.seed, kind, count, seed_offset).
  Split generate(SplitKind kind, std::size_t count, std::uint64_t seed_offset = 0) const;
  Split train_split() const { return generate(SplitKind::train, config_.train_samples); }
  Split test_split() const { return generate(SplitKind::test, config_.test_samples); }

  // Latent features of one sample under a group's projection (oracle access).
  std::vector<double> latent(std::size_t group, std::span<const double> sample) const;
  // Exact share of latent projection between two tasks: 1 within a group, 0 across.
  double feature_overlap(std::size_t task_a, std::size_t task_b) const;

 private:
  void targets_for(const std::vector<double>& z, std::size_t task, TaskTargets& out, Rng& noise) const;

  BenchmarkConfig config_;
  std::vector<TaskSpec> tasks_;
  std::vector<std::vector<double>> projections_;  // per group [d_in x d_latent]
  std::vector<std::vector<double>> readouts_;     // per task [d_latent x out]
  std::vector<double> target_scale_;
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  double base_lr = 2e-4;
  double weight_decay = 0.05;
  std::size_t samples_per_task = 8;
  double grad_clip = 1.0;
  double theta = 0.01;
  std::uint64_t seed = 1;

  void validate() const;
};

enum class GateStats { post_topk, pre_topk };

struct LossConfig {
  double w_mi = 0.001;
  GateStats gate_stats = GateStats::post_topk;
  // Per-image importance balance across tasks (modified-MoE comparison).
  double balance_weight = 0.0;
};

// Linear warmup 0 -> base_lr, then cosine decay to 0 at total_steps.
struct LrSchedule {
  double base_lr = 2e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const;
};

// Adam with decoupled weight decay; parameters with requires_grad == false are
// left untouched.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step(double lr);
  void zero_grad();
  // Scales gradients so their global L2 norm is at most max_norm; returns the
  // norm before clipping.
  double clip_grad_norm(double max_norm);
  std::size_t steps() const { return t_; }
  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Equal number of samples for every task; all tasks see the same inputs.
struct MixedBatch {
  Split data;
  std::vector<std::size_t> tasks;  // global ids, forwarded in this order
};

struct StepStats {
  std::size_t step = 0;
  double lr = 0.0;
  std::vector<double> task_loss;  // per task, unweighted
  std::vector<double> mi;         // per MoE layer, I(T;E_Y) of the batch
  double balance = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

struct StepOptions {
  LossConfig loss;
  double grad_clip = 1.0;
};

Tensor task_loss(const Tensor& predictions, const TaskSpec& spec, const TaskTargets& targets);

// One optimizer step over a mixed batch. Throws NumericAbort naming the first
// non-finite parameter when the loss is not finite.
StepStats train_step(ModSquadModel& model, LossWeights& weights, const MixedBatch& batch,
                     const std::vector<TaskSpec>& specs, AdamW& optimizer, double lr, Rng& rng,
                     const StepOptions& options, UsageEma* ema = nullptr,
                     std::vector<RouteResult>* gate_log = nullptr);

struct TrainResult {
  std::vector<StepStats> history;
  UsageEma ema;
};

// Full training over `train` with shuffled mixed batches. `on_step` is called
// after every step.
TrainResult train_model(ModSquadModel& model, LossWeights& weights, const Split& train,
                        const std::vector<TaskSpec>& specs, const TrainConfig& config,
                        const LossConfig& loss, const std::function<void(const StepStats&)>& on_step = {});

struct EvalResult {
  double metric = 0.0;    // mse for regression, accuracy for classification
  double loss = 0.0;      // mse or mean cross-entropy
  bool higher_is_better = false;
  std::vector<double> predictions;    // [samples x out_dim]
  UsageAccumulator usage;             // single-task, one row
};

// Eval-mode metric of one task; deterministic and order independent.
EvalResult evaluate(const ModSquadModel& model, std::size_t task, const TaskSpec& spec,
                    const Split& data, ExpertCounter* counter = nullptr, std::size_t batch = 128);

struct DeltaT {
  std::vector<double> per_task;
  double mean = 0.0;
};

// (-1)^s (M_model - M_base) / M_base with s = 1 for lower-is-better metrics.
DeltaT delta_t(std::span<const double> model_metrics, std::span<const double> baseline_metrics,
               const std::vector<bool>& higher_is_better);

}  // namespace modsquad
