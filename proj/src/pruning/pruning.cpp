#include "modsquad/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "modsquad/errors.hpp"

namespace modsquad {

std::size_t UsageStats::row_of(std::size_t task) const {
  auto it = std::find(tasks.begin(), tasks.end(), task);
  if (it == tasks.end()) throw ContractError("usage stats: no row for task " + std::to_string(task));
  return static_cast<std::size_t>(it - tasks.begin());
}

std::span<const double> UsageStats::frequency(std::size_t layer, std::size_t task) const {
  const std::size_t n = experts.at(layer);
  return std::span<const double>(layers.at(layer).data() + row_of(task) * n, n);
}

UsageStats UsageStats::from_accumulator(const UsageAccumulator& acc, std::vector<std::size_t> tasks) {
  if (tasks.size() != acc.n_tasks()) throw DimensionError("usage stats: task list does not match accumulator");
  UsageStats s;
  s.tasks = std::move(tasks);
  for (std::size_t l = 0; l < acc.layers(); ++l) {
    s.experts.push_back(acc.n_experts(l));
    s.layers.push_back(acc.conditional_table(l));
  }
  return s;
}

UsageStats UsageStats::from_ema(const UsageEma& ema, std::vector<std::size_t> tasks,
                                std::vector<std::size_t> experts) {
  if (ema.empty()) throw ContractError("usage stats: empty moving average");
  if (experts.size() != ema.layers()) throw DimensionError("usage stats: layer count mismatch");
  UsageStats s;
  s.tasks = std::move(tasks);
  s.experts = std::move(experts);
  for (std::size_t l = 0; l < ema.layers(); ++l) {
    if (ema.table(l).size() != s.tasks.size() * s.experts[l]) {
      throw DimensionError("usage stats: table size mismatch at layer " + std::to_string(l));
    }
    s.layers.push_back(ema.table(l));
  }
  return s;
}

UsageStats usage_frequency(const ModSquadModel& model, const std::vector<std::size_t>& tasks,
                           const Split& data, std::size_t batch) {
  if (data.samples == 0) throw ContractError("usage_frequency: empty dataset");
  std::vector<std::size_t> widths;
  for (const auto* layer : model.moe_layers()) widths.push_back(layer->n_slots);
  UsageAccumulator acc(widths.size(), tasks.size(), widths);
  ForwardContext ctx;
  ctx.mode = Mode::eval;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (std::size_t begin = 0; begin < data.samples; begin += batch) {
      const std::size_t n = std::min(batch, data.samples - begin);
      std::span<const double> inputs(data.inputs.data() + begin * data.sample_size(), n * data.sample_size());
      auto fwd = model_forward(model, inputs, n, tasks[t], ctx);
      for (std::size_t l = 0; l < fwd.gate_log.size(); ++l) acc.accumulate(l, t, fwd.gate_log[l].gates.data());
    }
  }
  return UsageStats::from_accumulator(acc, tasks);
}

UsageStats usage_frequency(const ModSquadModel& model, std::size_t task, const Split& data) {
  return usage_frequency(model, std::vector<std::size_t>{task}, data);
}

namespace {

std::vector<std::size_t> layer_ks(const ModSquadModel& model) {
  std::vector<std::size_t> ks;
  for (const auto* layer : model.moe_layers()) ks.push_back(layer->k);
  return ks;
}

void check_layers(const UsageStats& stats, const std::vector<std::size_t>& original_k) {
  if (stats.layers.size() != original_k.size()) {
    throw DimensionError("pruning: statistics cover " + std::to_string(stats.layers.size()) +
                         " layers, model has " + std::to_string(original_k.size()));
  }
}

PrunedLayerSpec finish_layer(std::vector<std::size_t> kept, std::size_t k) {
  std::sort(kept.begin(), kept.end());
  PrunedLayerSpec spec;
  spec.original_k = k;
  spec.k_adjusted = std::min(k, kept.size());
  spec.kept = std::move(kept);
  return spec;
}

}  // namespace

PrunedModelSpec threshold_spec(const UsageStats& stats, std::size_t task,
                               const std::vector<std::size_t>& original_k, double theta,
                               std::vector<std::string>* warnings) {
  if (!(theta >= 0.0) || theta > 1.0) throw ConfigError("prune.theta must lie in [0, 1]");
  check_layers(stats, original_k);
  PrunedModelSpec spec;
  spec.task = task;
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    auto freq = stats.frequency(l, task);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < freq.size(); ++i) {
      if (freq[i] > 0.0 && freq[i] >= theta) kept.push_back(i);
    }
    if (kept.empty()) {
      const auto best = static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
      kept.push_back(best);
      if (warnings) {
        std::ostringstream msg;
        msg << "layer " << l << ": no expert reaches theta=" << theta << " for task " << task
            << "; keeping most used expert " << best;
        warnings->push_back(msg.str());
      }
    }
    spec.layers.push_back(finish_layer(std::move(kept), original_k[l]));
  }
  return spec;
}

PrunedModelSpec top_share_spec(const UsageStats& stats, std::size_t task,
                               const std::vector<std::size_t>& original_k, double h_percent) {
  if (!(h_percent > 0.0) || h_percent > 100.0) throw ConfigError("prune.keep_percent must lie in (0, 100]");
  check_layers(stats, original_k);
  PrunedModelSpec spec;
  spec.task = task;
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    auto freq = stats.frequency(l, task);
    const double share = h_percent / 100.0 * static_cast<double>(freq.size());
    const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(share - 1e-9)), 1, freq.size());
    std::vector<std::size_t> order(freq.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return freq[a] > freq[b]; });
    order.resize(keep);
    spec.layers.push_back(finish_layer(std::move(order), original_k[l]));
  }
  return spec;
}

ModSquadModel extract_submodel(const ModSquadModel& model, const PrunedModelSpec& spec) {
  const std::size_t local = model.local_task(spec.task);
  ModSquadModel out = model.clone();
  auto layers = out.moe_layers();
  if (spec.layers.size() != layers.size()) throw DimensionError("pruning: spec layer count mismatch");

  for (std::size_t l = 0; l < layers.size(); ++l) {
    MoELayer& layer = *layers[l];
    const auto& ls = spec.layers[l];
    if (ls.kept.empty()) throw ContractError("pruning: layer " + std::to_string(l) + " keeps no expert");
    std::vector<std::size_t> ids;
    std::vector<MlpExpert> mlp;
    std::vector<AttentionExpert> attn;
    for (auto slot : ls.kept) {
      auto it = std::find(layer.expert_ids.begin(), layer.expert_ids.end(), slot);
      if (it == layer.expert_ids.end()) {
        throw ContractError("pruning: layer " + std::to_string(l) + " has no expert " + std::to_string(slot));
      }
      const auto e = static_cast<std::size_t>(it - layer.expert_ids.begin());
      ids.push_back(slot);
      if (layer.kind == LayerKind::attention) attn.push_back(layer.attn_experts[e]);
      else mlp.push_back(layer.mlp_experts[e]);
    }
    layer.expert_ids = std::move(ids);
    layer.mlp_experts = std::move(mlp);
    layer.attn_experts = std::move(attn);
    layer.k = ls.k_adjusted;
    layer.routers = {layer.routers[local]};
  }
  out.task_ids = {spec.task};
  out.out_dims = {model.out_dims[local]};
  out.task_embeddings.rows = {out.task_embeddings.rows[local]};
  out.heads = {out.heads[local]};
  return out;
}

PruneResult prune_threshold(const ModSquadModel& model, std::size_t task, const UsageStats& stats,
                            double theta) {
  PruneResult r;
  r.spec = threshold_spec(stats, task, layer_ks(model), theta, &r.warnings);
  r.model = extract_submodel(model, r.spec);
  return r;
}

PruneResult prune_top_share(const ModSquadModel& model, std::size_t task, const UsageStats& stats,
                            double h_percent) {
  PruneResult r;
  r.spec = top_share_spec(stats, task, layer_ks(model), h_percent);
  r.model = extract_submodel(model, r.spec);
  return r;
}

double EquivalenceReport::relative_degradation() const {
  const double base = std::abs(metric_full);
  if (base == 0.0) throw DomainError("relative degradation: zero baseline metric");
  return (higher_is_better ? metric_full - metric_pruned : metric_pruned - metric_full) / base;
}

std::size_t expert_parameter_count(const ModSquadModel& model) {
  std::size_t n = 0;
  for (const auto* layer : model.moe_layers()) {
    for (const auto& e : layer->mlp_experts) n += e.w1.numel() + e.b1.numel() + e.w2.numel() + e.b2.numel();
    for (const auto& e : layer->attn_experts) n += e.w_q.numel() + e.w_k.numel() + e.w_v.numel() + e.w_o.numel();
  }
  return n;
}

EquivalenceReport verify_equivalence(const ModSquadModel& full, const ModSquadModel& pruned,
                                     std::size_t task, const TaskSpec& spec, const Split& data) {
  if (pruned.task_ids != std::vector<std::size_t>{task}) {
    throw ContractError("verify_equivalence: pruned model does not serve task " + std::to_string(task));
  }
  EquivalenceReport r;
  ExpertCounter counter;
  auto a = evaluate(full, task, spec, data);
  auto b = evaluate(pruned, task, spec, data, &counter);
  for (std::size_t i = 0; i < a.predictions.size(); ++i) {
    r.max_abs_output_diff = std::max(r.max_abs_output_diff, std::abs(a.predictions[i] - b.predictions[i]));
  }
  r.metric_full = a.metric;
  r.metric_pruned = b.metric;
  r.higher_is_better = a.higher_is_better;
  r.params_full = full.parameter_count();
  r.params_pruned = pruned.parameter_count();
  r.expert_params_full = expert_parameter_count(full);
  r.expert_params_pruned = expert_parameter_count(pruned);
  auto layers = pruned.moe_layers();
  for (std::size_t l = 0; l < layers.size() && l < counter.per_expert.size(); ++l) {
    auto mask = layers[l]->available();
    if (mask.empty()) continue;
    for (std::size_t slot = 0; slot < mask.size(); ++slot) {
      if (!mask[slot]) r.removed_expert_evaluations += counter.per_expert[l][slot];
    }
  }
  return r;
}

}  // namespace modsquad
