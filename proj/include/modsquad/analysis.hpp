#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modsquad/moe.hpp"
#include "modsquad/pruning.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

struct TaskSimilarityMatrix {
  std::vector<std::size_t> tasks;  // global ids, row/column order
  std::vector<std::size_t> scope;  // MoE layer indices averaged over
  std::vector<double> s;           // [M x M]

  double at(std::size_t a, std::size_t b) const { return s[a * tasks.size() + b]; }
  bool symmetric(double tol = 1e-12) const;
};

// Mean over probe tokens and in-scope layers of |S_a n S_b| / k. An empty
// `scope` argument means every MoE layer.
TaskSimilarityMatrix task_similarity(const ModSquadModel& model, const std::vector<std::size_t>& tasks,
                                     const Split& probe, std::vector<std::size_t> scope = {});

// Mean similarity over task pairs in the same group and in different groups.
struct GroupContrast {
  double within = 0.0;
  double across = 0.0;
};
GroupContrast group_contrast(const TaskSimilarityMatrix& m, const std::vector<TaskSpec>& specs);

// I(T;E) per layer under a uniform task prior, and the same divided by H(T).
std::vector<double> mutual_information_per_layer(const UsageStats& stats);
std::vector<double> normalized_mi_per_layer(const UsageStats& stats);

std::string format_float(double v);
std::string heatmap_csv(const UsageStats& stats, std::size_t layer, const std::vector<std::string>& names);
std::string similarity_csv(const TaskSimilarityMatrix& m, const std::vector<std::string>& names);

// Writes <prefix><layer>.csv for every layer; returns the paths written.
std::vector<std::filesystem::path> export_heatmap(const UsageStats& stats, const std::vector<std::string>& names,
                                                  const std::filesystem::path& dir,
                                                  const std::string& prefix = "usage_layer");
void write_text(const std::filesystem::path& file, const std::string& text);

enum class FinetuneMode {
  router,  // new routers, embedding row and head
  head,    // head only; the new routers stay at their initial values
  full,    // every parameter
};

struct FinetuneConfig {
  FinetuneMode mode = FinetuneMode::router;
  std::size_t steps = 300;
  std::size_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
};

struct FinetuneResult {
  ModSquadModel model;
  std::size_t task = 0;
  std::size_t trainable_params = 0;
  std::vector<double> loss_history;
};

// Adds `task` (which must be the next unused id) to a copy of the model and
// trains the parameter set selected by `config.mode` on `data`.
FinetuneResult router_finetune(const ModSquadModel& model, std::size_t task, const TaskSpec& spec,
                               const Split& data, const FinetuneConfig& config);

}  // namespace modsquad
