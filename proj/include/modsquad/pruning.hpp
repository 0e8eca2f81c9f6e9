#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "modsquad/mi.hpp"
#include "modsquad/moe.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

// Normalized long-run gate mass: per MoE layer a [tasks x N] row-major table
// whose rows are distributions.
struct UsageStats {
  std::vector<std::size_t> tasks;            // global ids, one per row
  std::vector<std::vector<double>> layers;   // per layer, rows per task
  std::vector<std::size_t> experts;          // N per layer

  std::size_t row_of(std::size_t task) const;
  std::span<const double> frequency(std::size_t layer, std::size_t task) const;

  static UsageStats from_accumulator(const UsageAccumulator& acc, std::vector<std::size_t> tasks);
  static UsageStats from_ema(const UsageEma& ema, std::vector<std::size_t> tasks,
                             std::vector<std::size_t> experts);
};

// Eval-mode frequencies of each task over `data`.
UsageStats usage_frequency(const ModSquadModel& model, const std::vector<std::size_t>& tasks,
                           const Split& data, std::size_t batch = 128);
UsageStats usage_frequency(const ModSquadModel& model, std::size_t task, const Split& data);

struct PrunedLayerSpec {
  std::vector<std::size_t> kept;  // ascending router slots
  std::size_t original_k = 0;
  std::size_t k_adjusted = 0;
};

struct PrunedModelSpec {
  std::size_t task = 0;
  std::vector<PrunedLayerSpec> layers;
};

struct PruneResult {
  PrunedModelSpec spec;
  ModSquadModel model;
  std::vector<std::string> warnings;
};

// Keeps experts whose frequency is at least theta (and nonzero); a layer that
// would become empty keeps its most used expert and records a warning.
PrunedModelSpec threshold_spec(const UsageStats& stats, std::size_t task,
                               const std::vector<std::size_t>& original_k, double theta,
                               std::vector<std::string>* warnings = nullptr);
// Keeps ceil(h_percent/100 * N) most used experts per layer, ties to the lower index.
PrunedModelSpec top_share_spec(const UsageStats& stats, std::size_t task,
                               const std::vector<std::size_t>& original_k, double h_percent);

// Standalone single-task model: kept experts only, the task's routers,
// embedding row and head. Removed experts can never be selected again.
ModSquadModel extract_submodel(const ModSquadModel& model, const PrunedModelSpec& spec);

PruneResult prune_threshold(const ModSquadModel& model, std::size_t task, const UsageStats& stats,
                            double theta);
PruneResult prune_top_share(const ModSquadModel& model, std::size_t task, const UsageStats& stats,
                            double h_percent);

struct EquivalenceReport {
  double max_abs_output_diff = 0.0;
  double metric_full = 0.0;
  double metric_pruned = 0.0;
  bool higher_is_better = false;
  std::size_t params_full = 0;
  std::size_t params_pruned = 0;
  std::size_t expert_params_full = 0;
  std::size_t expert_params_pruned = 0;
  // Evaluations of removed experts observed on the pruned model; always 0.
  std::size_t removed_expert_evaluations = 0;

  // Relative metric change in the "worse" direction (positive = degradation).
  double relative_degradation() const;
};

std::size_t expert_parameter_count(const ModSquadModel& model);

EquivalenceReport verify_equivalence(const ModSquadModel& full, const ModSquadModel& pruned,
                                     std::size_t task, const TaskSpec& spec, const Split& data);

}  // namespace modsquad
