#include "modsquad/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "modsquad/errors.hpp"
#include "modsquad/mi.hpp"
#include "modsquad/ops.hpp"

namespace modsquad {

namespace fs = std::filesystem;

bool TaskSimilarityMatrix::symmetric(double tol) const {
  const std::size_t m = tasks.size();
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      if (std::abs(at(a, b) - at(b, a)) > tol) return false;
    }
  }
  return true;
}

TaskSimilarityMatrix task_similarity(const ModSquadModel& model, const std::vector<std::size_t>& tasks,
                                     const Split& probe, std::vector<std::size_t> scope) {
  if (probe.samples == 0) throw ContractError("task_similarity: empty probe set");
  const auto layers = model.moe_layers();
  if (layers.empty()) throw ConfigError("task_similarity: model has no MoE layers");
  if (scope.empty()) {
    scope.resize(layers.size());
    std::iota(scope.begin(), scope.end(), 0);
  }
  for (auto l : scope) {
    if (l >= layers.size()) throw ConfigError("task_similarity: layer " + std::to_string(l) + " out of range");
  }

  // selections[task][scope index][token] = selected router slots
  std::vector<std::vector<std::vector<std::vector<std::size_t>>>> selections(tasks.size());
  ForwardContext ctx;
  ctx.mode = Mode::eval;
  const std::size_t batch = 128;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    selections[t].resize(scope.size());
    for (std::size_t begin = 0; begin < probe.samples; begin += batch) {
      const std::size_t n = std::min(batch, probe.samples - begin);
      std::span<const double> inputs(probe.inputs.data() + begin * probe.sample_size(), n * probe.sample_size());
      auto fwd = model_forward(model, inputs, n, tasks[t], ctx);
      for (std::size_t i = 0; i < scope.size(); ++i) {
        auto& sel = fwd.gate_log[scope[i]].selected;
        for (auto& s : sel) {
          std::sort(s.begin(), s.end());
          selections[t][i].push_back(std::move(s));
        }
      }
    }
  }

  TaskSimilarityMatrix m;
  m.tasks = tasks;
  m.scope = scope;
  const std::size_t n_tasks = tasks.size();
  m.s.assign(n_tasks * n_tasks, 0.0);
  for (std::size_t a = 0; a < n_tasks; ++a) {
    m.s[a * n_tasks + a] = 1.0;
    for (std::size_t b = a + 1; b < n_tasks; ++b) {
      double total = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < scope.size(); ++i) {
        const double k = static_cast<double>(layers[scope[i]]->k);
        const auto& sa = selections[a][i];
        const auto& sb = selections[b][i];
        for (std::size_t tok = 0; tok < sa.size(); ++tok) {
          std::vector<std::size_t> common;
          std::set_intersection(sa[tok].begin(), sa[tok].end(), sb[tok].begin(), sb[tok].end(),
                                std::back_inserter(common));
          total += static_cast<double>(common.size()) / k;
          ++count;
        }
      }
      const double v = total / static_cast<double>(count);
      m.s[a * n_tasks + b] = v;
      m.s[b * n_tasks + a] = v;
    }
  }
  return m;
}

GroupContrast group_contrast(const TaskSimilarityMatrix& m, const std::vector<TaskSpec>& specs) {
  double within = 0.0, across = 0.0;
  std::size_t n_within = 0, n_across = 0;
  for (std::size_t a = 0; a < m.tasks.size(); ++a) {
    for (std::size_t b = a + 1; b < m.tasks.size(); ++b) {
      if (specs.at(m.tasks[a]).group == specs.at(m.tasks[b]).group) {
        within += m.at(a, b);
        ++n_within;
      } else {
        across += m.at(a, b);
        ++n_across;
      }
    }
  }
  if (n_within == 0 || n_across == 0) throw ConfigError("group_contrast: need pairs within and across groups");
  return {within / static_cast<double>(n_within), across / static_cast<double>(n_across)};
}

std::vector<double> mutual_information_per_layer(const UsageStats& stats) {
  const auto prior = uniform_task_prior(stats.tasks.size());
  std::vector<double> out;
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    out.push_back(mutual_information(joint(stats.layers[l], stats.experts[l], prior)));
  }
  return out;
}

std::vector<double> normalized_mi_per_layer(const UsageStats& stats) {
  const double h = entropy(uniform_task_prior(stats.tasks.size()));
  auto mi = mutual_information_per_layer(stats);
  for (auto& v : mi) v = h > 0.0 ? v / h : 0.0;
  return mi;
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string heatmap_csv(const UsageStats& stats, std::size_t layer, const std::vector<std::string>& names) {
  if (names.size() != stats.tasks.size()) throw DimensionError("heatmap: one name per task required");
  const std::size_t n = stats.experts.at(layer);
  std::string out = "task";
  for (std::size_t e = 0; e < n; ++e) out += ",expert_" + std::to_string(e);
  out += '\n';
  for (std::size_t t = 0; t < stats.tasks.size(); ++t) {
    out += names[t];
    for (double v : stats.frequency(layer, stats.tasks[t])) out += "," + format_float(v);
    out += '\n';
  }
  return out;
}

std::string similarity_csv(const TaskSimilarityMatrix& m, const std::vector<std::string>& names) {
  if (names.size() != m.tasks.size()) throw DimensionError("similarity: one name per task required");
  if (!m.symmetric()) throw ContractError("similarity matrix is not symmetric");
  std::string out = "task";
  for (const auto& name : names) out += "," + name;
  out += '\n';
  for (std::size_t a = 0; a < names.size(); ++a) {
    out += names[a];
    for (std::size_t b = 0; b < names.size(); ++b) out += "," + format_float(m.at(a, b));
    out += '\n';
  }
  return out;
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw ContractError("cannot write " + file.string());
}

std::vector<fs::path> export_heatmap(const UsageStats& stats, const std::vector<std::string>& names,
                                     const fs::path& dir, const std::string& prefix) {
  std::vector<fs::path> written;
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    const fs::path file = dir / (prefix + std::to_string(l) + ".csv");
    write_text(file, heatmap_csv(stats, l, names));
    written.push_back(file);
  }
  return written;
}

FinetuneResult router_finetune(const ModSquadModel& model, std::size_t task, const TaskSpec& spec,
                               const Split& data, const FinetuneConfig& config) {
  if (data.samples == 0) throw ContractError("router_finetune: empty fine-tune set");
  if (config.steps == 0 || config.batch == 0 || !(config.lr > 0.0)) {
    throw ConfigError("finetune: steps, batch and lr must be positive");
  }
  FinetuneResult res;
  res.model = model.clone();
  for (auto& p : res.model.parameters()) p.tensor.set_requires_grad(config.mode == FinetuneMode::full);

  Rng rng(config.seed);
  res.task = res.model.add_task(spec.out_dim, rng);
  if (res.task != task) {
    throw ContractError("router_finetune: new task would get id " + std::to_string(res.task) + ", not " +
                        std::to_string(task));
  }
  const std::size_t local = res.model.local_task(task);
  if (config.mode == FinetuneMode::head) {
    for (auto* layer : res.model.moe_layers()) {
      layer->routers[local].w_g.set_requires_grad(false);
      layer->routers[local].w_noise.set_requires_grad(false);
    }
    res.model.task_embeddings.rows[local].set_requires_grad(false);
  }

  std::vector<NamedParam> trainable;
  for (auto& p : res.model.parameters()) {
    if (p.tensor.requires_grad()) {
      res.trainable_params += p.tensor.numel();
      trainable.push_back(p);
    }
  }
  AdamW optimizer(trainable, config.weight_decay);
  LrSchedule schedule{config.lr, 0, config.steps};

  const std::size_t per_step = std::min(config.batch, data.samples);
  std::vector<std::size_t> order(data.samples);
  std::size_t cursor = data.samples;
  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.rng = &rng;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (cursor + per_step > data.samples) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    Split batch = data.select(std::span<const std::size_t>(order.data() + cursor, per_step));
    cursor += per_step;
    optimizer.zero_grad();
    auto fwd = model_forward(res.model, batch.inputs, batch.samples, task, ctx);
    Tensor loss = task_loss(fwd.predictions, spec, batch.targets.at(task));
    if (!std::isfinite(loss.item())) throw NumericAbort("router_finetune: non-finite loss at step " + std::to_string(step));
    res.loss_history.push_back(loss.item());
    loss.backward();
    optimizer.step(schedule.at(step));
  }
  return res;
}

}  // namespace modsquad
