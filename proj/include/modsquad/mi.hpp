#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "modsquad/routing.hpp"
#include "modsquad/tensor.hpp"

namespace modsquad {

// Summed gate mass per (task, expert) for every MoE layer.
class UsageAccumulator {
 public:
  UsageAccumulator() = default;
  UsageAccumulator(std::size_t layers, std::size_t n_tasks, std::vector<std::size_t> experts_per_layer);

  // Adds row-major gates [tokens x N] of one task at one layer.
  void accumulate(std::size_t layer, std::size_t task, std::span<const double> gates);
  void accumulate(std::size_t layer, std::size_t task, const std::vector<GateVector>& gates);
  void merge(const UsageAccumulator& other);

  // P(E | T = task): the task's mass row divided by its total.
  std::vector<double> conditional(std::size_t layer, std::size_t task) const;
  // All rows of a layer, [n_tasks x N] row-major.
  std::vector<double> conditional_table(std::size_t layer) const;

  std::size_t layers() const { return mass_.size(); }
  std::size_t n_tasks() const { return n_tasks_; }
  std::size_t n_experts(std::size_t layer) const { return experts_[layer]; }
  double mass(std::size_t layer, std::size_t task, std::size_t expert) const {
    return mass_[layer][task * experts_[layer] + expert];
  }
  std::size_t token_count(std::size_t layer, std::size_t task) const {
    return tokens_[layer][task];
  }

 private:
  std::size_t n_tasks_ = 0;
  std::vector<std::size_t> experts_;
  std::vector<std::vector<double>> mass_;
  std::vector<std::vector<std::size_t>> tokens_;
};

// Exponential moving average of per-step conditionals, for reporting and
// pruning statistics only.
class UsageEma {
 public:
  explicit UsageEma(double decay = 0.99) : decay_(decay) {}
  void update(const UsageAccumulator& step);
  bool empty() const { return tables_.empty(); }
  // [n_tasks x N] row-major.
  const std::vector<double>& table(std::size_t layer) const { return tables_.at(layer); }
  std::size_t layers() const { return tables_.size(); }

 private:
  double decay_;
  std::vector<std::vector<double>> tables_;
};

struct JointDistribution {
  std::size_t n_tasks = 0;
  std::size_t n_experts = 0;
  std::vector<double> p;         // [n_tasks x n_experts]
  std::vector<double> p_task;    // row sums
  std::vector<double> p_expert;  // column sums

  double at(std::size_t t, std::size_t e) const { return p[t * n_experts + e]; }
  JointDistribution transposed() const;
  // Builds marginals from a table; validates nonnegativity and unit mass.
  static JointDistribution from_table(std::size_t n_tasks, std::size_t n_experts, std::vector<double> p);
};

std::vector<double> uniform_task_prior(std::size_t n_tasks);

// P(T, E) = P(E | T) P(T); conds is [n_tasks x N] with unit rows.
JointDistribution joint(std::span<const double> conds, std::size_t n_experts,
                        std::span<const double> p_task);

// Shannon entropy in nats, 0 log 0 := 0.
double entropy(std::span<const double> p);

// I(T;E) = sum p(t,e) log(p(t,e) / (p(t) p(e))), in nats.
double mutual_information(const JointDistribution& d);
// Same quantity as -H(T,E) + H(T) + H(E).
double mutual_information_decomposed(const JointDistribution& d);

// -I(T;E_Y) for one MoE layer from the step's gates, one [tokens x N] tensor
// per task. Differentiable through the gates; the constant H(T) term carries
// no gradient. Throws DegenerateTaskError when a task has no gate mass.
Tensor mi_loss_batch(const std::vector<Tensor>& gates_per_task, std::span<const double> p_task);

// Importance balance loss: squared coefficient of variation of summed gate
// mass per image, pooled over every task's forward of that image, averaged
// over images. gates_per_task are [images*seq_len x N] over the same images.
Tensor balance_loss(const std::vector<Tensor>& gates_per_task, std::size_t seq_len);

struct LossWeights {
  double w_mi = 0.001;
  Tensor log_var;  // [n_tasks], task weight w_T = exp(-log_var)

  static LossWeights init(std::size_t n_tasks, double w_mi);
};

// sum_i [exp(-s_i) L_i + s_i] + w_mi * sum_Y mi_loss_Y, where each mi_loss is -I.
Tensor total_loss(const std::vector<Tensor>& task_losses, const std::vector<Tensor>& mi_losses,
                  const LossWeights& weights);

}  // namespace modsquad
