#include "modsquad/mi.hpp"

#include <cmath>
#include <string>

#include "modsquad/errors.hpp"
#include "modsquad/ops.hpp"

namespace modsquad {

UsageAccumulator::UsageAccumulator(std::size_t layers, std::size_t n_tasks,
                                   std::vector<std::size_t> experts_per_layer)
    : n_tasks_(n_tasks), experts_(std::move(experts_per_layer)) {
  if (experts_.size() != layers) throw DimensionError("usage accumulator: layer count mismatch");
  for (auto n : experts_) {
    mass_.emplace_back(n_tasks * n, 0.0);
    tokens_.emplace_back(n_tasks, 0);
  }
}

void UsageAccumulator::accumulate(std::size_t layer, std::size_t task, std::span<const double> gates) {
  const std::size_t n = experts_.at(layer);
  if (task >= n_tasks_) throw ContractError("usage: task out of range");
  if (gates.size() % n != 0) throw DimensionError("usage: gate width does not match expert count");
  const std::size_t tokens = gates.size() / n;
  double* row = mass_[layer].data() + task * n;
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < n; ++j) row[j] += gates[t * n + j];
  }
  tokens_[layer][task] += tokens;
}

void UsageAccumulator::accumulate(std::size_t layer, std::size_t task, const std::vector<GateVector>& gates) {
  for (const auto& g : gates) {
    if (g.weights.size() != experts_.at(layer)) {
      throw DimensionError("usage: gate width does not match expert count");
    }
    accumulate(layer, task, g.weights);
  }
}

void UsageAccumulator::merge(const UsageAccumulator& other) {
  if (other.n_tasks_ != n_tasks_ || other.experts_ != experts_) {
    throw DimensionError("usage: cannot merge accumulators of different shapes");
  }
  for (std::size_t l = 0; l < mass_.size(); ++l) {
    for (std::size_t i = 0; i < mass_[l].size(); ++i) mass_[l][i] += other.mass_[l][i];
    for (std::size_t t = 0; t < n_tasks_; ++t) tokens_[l][t] += other.tokens_[l][t];
  }
}

std::vector<double> UsageAccumulator::conditional(std::size_t layer, std::size_t task) const {
  const std::size_t n = experts_.at(layer);
  const double* row = mass_[layer].data() + task * n;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += row[j];
  if (!(total > 0.0)) {
    throw DegenerateTaskError("task " + std::to_string(task) + " has no gate mass in layer " +
                              std::to_string(layer));
  }
  std::vector<double> out(row, row + n);
  for (auto& v : out) v /= total;
  return out;
}

std::vector<double> UsageAccumulator::conditional_table(std::size_t layer) const {
  std::vector<double> out;
  for (std::size_t t = 0; t < n_tasks_; ++t) {
    auto row = conditional(layer, t);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

void UsageEma::update(const UsageAccumulator& step) {
  if (tables_.empty()) {
    for (std::size_t l = 0; l < step.layers(); ++l) tables_.push_back(step.conditional_table(l));
    return;
  }
  for (std::size_t l = 0; l < step.layers(); ++l) {
    auto cur = step.conditional_table(l);
    auto& tab = tables_[l];
    for (std::size_t i = 0; i < tab.size(); ++i) tab[i] = decay_ * tab[i] + (1.0 - decay_) * cur[i];
  }
}

JointDistribution JointDistribution::from_table(std::size_t n_tasks, std::size_t n_experts,
                                                std::vector<double> p) {
  if (p.size() != n_tasks * n_experts) throw DimensionError("joint: table size mismatch");
  JointDistribution d;
  d.n_tasks = n_tasks;
  d.n_experts = n_experts;
  d.p_task.assign(n_tasks, 0.0);
  d.p_expert.assign(n_experts, 0.0);
  double total = 0.0;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    for (std::size_t e = 0; e < n_experts; ++e) {
      const double v = p[t * n_experts + e];
      if (v < 0.0) throw DomainError("joint: negative probability");
      d.p_task[t] += v;
      d.p_expert[e] += v;
      total += v;
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("joint: probabilities sum to " + std::to_string(total));
  d.p = std::move(p);
  return d;
}

JointDistribution JointDistribution::transposed() const {
  std::vector<double> q(p.size());
  for (std::size_t t = 0; t < n_tasks; ++t) {
    for (std::size_t e = 0; e < n_experts; ++e) q[e * n_tasks + t] = p[t * n_experts + e];
  }
  return from_table(n_experts, n_tasks, std::move(q));
}

std::vector<double> uniform_task_prior(std::size_t n_tasks) {
  return std::vector<double>(n_tasks, 1.0 / static_cast<double>(n_tasks));
}

JointDistribution joint(std::span<const double> conds, std::size_t n_experts,
                        std::span<const double> p_task) {
  const std::size_t m = p_task.size();
  if (conds.size() != m * n_experts) {
    throw DimensionError("joint: " + std::to_string(conds.size()) + " conditionals for " +
                         std::to_string(m) + " tasks x " + std::to_string(n_experts) + " experts");
  }
  std::vector<double> p(conds.size());
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t e = 0; e < n_experts; ++e) p[t * n_experts + e] = conds[t * n_experts + e] * p_task[t];
  }
  return JointDistribution::from_table(m, n_experts, std::move(p));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double mutual_information(const JointDistribution& d) {
  double mi = 0.0;
  for (std::size_t t = 0; t < d.n_tasks; ++t) {
    for (std::size_t e = 0; e < d.n_experts; ++e) {
      const double v = d.at(t, e);
      if (v > 0.0) mi += v * std::log(v / (d.p_task[t] * d.p_expert[e]));
    }
  }
  return mi;
}

double mutual_information_decomposed(const JointDistribution& d) {
  return -entropy(d.p) + entropy(d.p_task) + entropy(d.p_expert);
}

Tensor mi_loss_batch(const std::vector<Tensor>& gates_per_task, std::span<const double> p_task) {
  if (gates_per_task.size() != p_task.size() || gates_per_task.empty()) {
    throw DimensionError("mi_loss_batch: need one gate table per task");
  }
  const std::size_t n = gates_per_task.front().cols();
  std::vector<Tensor> rows;
  for (std::size_t t = 0; t < gates_per_task.size(); ++t) {
    if (gates_per_task[t].cols() != n) throw DimensionError("mi_loss_batch: gate width mismatch");
    Tensor mass = ops::sum_rows(gates_per_task[t]);  // [1 x N]
    Tensor total = ops::sum(mass);
    if (!(total.item() > 0.0)) {
      throw DegenerateTaskError("task " + std::to_string(t) + " has no gate mass in this step");
    }
    rows.push_back(ops::scale(ops::mul_scalar(mass, ops::reciprocal(total)), p_task[t]));
  }
  Tensor p = ops::concat_rows(rows);
  Tensor p_expert = ops::sum_rows(p);
  // -I = H(T,E) - H(E) - H(T) = sum p_E log p_E - sum p log p - H(T)
  Tensor neg_mi = ops::sub(ops::sum(ops::xlogx(p_expert)), ops::sum(ops::xlogx(p)));
  return ops::add_scalar(neg_mi, -entropy(p_task));
}

Tensor balance_loss(const std::vector<Tensor>& gates_per_task, std::size_t seq_len) {
  if (gates_per_task.empty()) throw DimensionError("balance_loss: no gates");
  Tensor importance = ops::mean_pool(gates_per_task.front(), seq_len);
  for (std::size_t t = 1; t < gates_per_task.size(); ++t) {
    importance = ops::add(importance, ops::mean_pool(gates_per_task[t], seq_len));
  }
  const double n = static_cast<double>(importance.cols());
  // CV^2 = N * sum(I^2) / sum(I)^2 - 1 per image
  Tensor sq = ops::sum_cols(ops::mul(importance, importance));
  Tensor s = ops::sum_cols(importance);
  Tensor cv2 = ops::mul(sq, ops::reciprocal(ops::mul(s, s)));
  return ops::add_scalar(ops::scale(ops::mean(cv2), n), -1.0);
}

LossWeights LossWeights::init(std::size_t n_tasks, double w_mi) {
  if (w_mi < 0.0) throw ConfigError("loss.w_mi must be >= 0");
  return {w_mi, Tensor::zeros({n_tasks}, true)};
}

Tensor total_loss(const std::vector<Tensor>& task_losses, const std::vector<Tensor>& mi_losses,
                  const LossWeights& weights) {
  const std::size_t m = task_losses.size();
  if (weights.log_var.numel() != m) throw DimensionError("total_loss: one log-variance per task required");
  Tensor losses = ops::reshape(ops::concat_rows(task_losses), {m});
  Tensor s = weights.log_var;
  Tensor total = ops::sum(ops::add(ops::mul(ops::exp(ops::scale(s, -1.0)), losses), s));
  if (weights.w_mi != 0.0 && !mi_losses.empty()) {
    Tensor mi_sum = ops::sum(ops::concat_rows(mi_losses));
    total = ops::add(total, ops::scale(mi_sum, weights.w_mi));
  }
  return total;
}

}  // namespace modsquad
