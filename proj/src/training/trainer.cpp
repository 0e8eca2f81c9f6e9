#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "modsquad/errors.hpp"
#include "modsquad/ops.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train." + what);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(warmup_epochs < epochs, "warmup_epochs must be < epochs");
  need(base_lr > 0.0, "base_lr must be positive");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(samples_per_task >= 1, "samples_per_task must be >= 1");
  need(grad_clip > 0.0, "grad_clip must be positive");
  need(theta >= 0.0 && theta < 1.0, "theta must lie in [0, 1)");
}

double LrSchedule::at(std::size_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<NamedParam> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params_) {
      if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.requires_grad()) continue;
    auto w = p.tensor.mutable_data();
    const bool has = p.tensor.has_grad();
    auto g = has ? p.tensor.grad() : std::span<const double>();
    auto& m = m_[i];
    auto& v = v_[i];
    const double wd = p.decay ? weight_decay_ : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      w[j] -= lr * (update + wd * w[j]);
    }
  }
}

Tensor task_loss(const Tensor& predictions, const TaskSpec& spec, const TaskTargets& targets) {
  if (spec.kind == TaskKind::regression) return ops::mse_loss(predictions, targets.values);
  return ops::cross_entropy(predictions, targets.labels);
}

namespace {

std::string first_nonfinite(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    for (double v : p.tensor.data()) {
      if (!std::isfinite(v)) return p.name + " (value)";
    }
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double v : p.tensor.grad()) {
      if (!std::isfinite(v)) return p.name + " (gradient)";
    }
  }
  return {};
}

}  // namespace

StepStats train_step(ModSquadModel& model, LossWeights& weights, const MixedBatch& batch,
                     const std::vector<TaskSpec>& specs, AdamW& optimizer, double lr, Rng& rng,
                     const StepOptions& options, UsageEma* ema, std::vector<RouteResult>* gate_log) {
  if (batch.data.samples == 0 || batch.tasks.empty()) throw ContractError("train_step: empty batch");
  optimizer.zero_grad();

  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.rng = &rng;
  const std::size_t layers = model.moe_layers().size();
  std::vector<std::vector<Tensor>> gates(layers);
  std::vector<Tensor> losses;
  StepStats stats;
  for (auto task : batch.tasks) {
    auto fwd = model_forward(model, batch.data.inputs, batch.data.samples, task, ctx);
    Tensor loss = task_loss(fwd.predictions, specs.at(task), batch.data.targets.at(task));
    stats.task_loss.push_back(loss.item());
    losses.push_back(loss);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& r = fwd.gate_log[l];
      gates[l].push_back(options.loss.gate_stats == GateStats::pre_topk ? r.probs : r.gates);
      if (gate_log) gate_log->push_back(r);
    }
  }

  const auto prior = uniform_task_prior(batch.tasks.size());
  std::vector<Tensor> mi_losses;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor mi = mi_loss_batch(gates[l], prior);
    stats.mi.push_back(-mi.item());
    mi_losses.push_back(mi);
  }
  Tensor total = total_loss(losses, mi_losses, weights);
  if (options.loss.balance_weight > 0.0 && layers > 0) {
    std::vector<Tensor> bal;
    for (std::size_t l = 0; l < layers; ++l) bal.push_back(balance_loss(gates[l], model.config.seq_len));
    Tensor b = ops::sum(ops::concat_rows(bal));
    stats.balance = b.item();
    total = ops::add(total, ops::scale(b, options.loss.balance_weight));
  }
  stats.total = total.item();
  if (!std::isfinite(stats.total)) {
    auto bad = first_nonfinite(optimizer.params());
    throw NumericAbort("non-finite loss; first non-finite parameter: " +
                       (bad.empty() ? std::string("none (all parameters finite)") : bad));
  }
  total.backward();
  if (auto bad = first_nonfinite(optimizer.params()); !bad.empty()) {
    throw NumericAbort("non-finite gradient; first offending parameter: " + bad);
  }
  stats.grad_norm = optimizer.clip_grad_norm(options.grad_clip);
  optimizer.step(lr);
  stats.lr = lr;

  if (ema) {
    std::vector<std::size_t> widths;
    for (const auto* layer : model.moe_layers()) widths.push_back(layer->n_slots);
    UsageAccumulator acc(layers, batch.tasks.size(), widths);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t t = 0; t < batch.tasks.size(); ++t) acc.accumulate(l, t, gates[l][t].data());
    }
    ema->update(acc);
  }
  return stats;
}

TrainResult train_model(ModSquadModel& model, LossWeights& weights, const Split& train,
                        const std::vector<TaskSpec>& specs, const TrainConfig& config,
                        const LossConfig& loss, const std::function<void(const StepStats&)>& on_step) {
  config.validate();
  const std::size_t per_step = std::min(config.samples_per_task, train.samples);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, train.samples / per_step);
  LrSchedule schedule{config.base_lr, config.warmup_epochs * steps_per_epoch, config.epochs * steps_per_epoch};

  auto params = model.parameters();
  params.push_back({"loss.log_var", weights.log_var, false});
  AdamW optimizer(params, config.weight_decay);
  Rng rng(config.seed);
  StepOptions options{loss, config.grad_clip};

  TrainResult result;
  std::vector<std::size_t> order(train.samples);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      MixedBatch batch;
      batch.data = train.select(std::span<const std::size_t>(order.data() + s * per_step, per_step));
      batch.tasks = model.task_ids;
      StepStats st = train_step(model, weights, batch, specs, optimizer, schedule.at(step), rng, options,
                                &result.ema);
      st.step = step++;
      if (on_step) on_step(st);
      result.history.push_back(std::move(st));
    }
  }
  return result;
}

EvalResult evaluate(const ModSquadModel& model, std::size_t task, const TaskSpec& spec, const Split& data,
                    ExpertCounter* counter, std::size_t batch) {
  if (data.samples == 0) throw ContractError("evaluate: empty dataset");
  std::vector<std::size_t> widths;
  for (const auto* layer : model.moe_layers()) widths.push_back(layer->n_slots);
  EvalResult res;
  res.usage = UsageAccumulator(widths.size(), 1, widths);
  res.higher_is_better = spec.kind == TaskKind::classification;

  ForwardContext ctx;
  ctx.mode = Mode::eval;
  ctx.counter = counter;
  const auto& targets = data.targets.at(task);
  double err_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.samples; begin += batch) {
    const std::size_t n = std::min(batch, data.samples - begin);
    std::span<const double> inputs(data.inputs.data() + begin * data.sample_size(), n * data.sample_size());
    auto fwd = model_forward(model, inputs, n, task, ctx);
    for (std::size_t l = 0; l < fwd.gate_log.size(); ++l) res.usage.accumulate(l, 0, fwd.gate_log[l].gates.data());
    const auto pred = fwd.predictions.data();
    const std::size_t od = fwd.predictions.cols();
    res.predictions.insert(res.predictions.end(), pred.begin(), pred.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (spec.kind == TaskKind::regression) {
        for (std::size_t o = 0; o < od; ++o) {
          const double diff = pred[i * od + o] - targets.values[(begin + i) * od + o];
          err_sum += diff * diff;
        }
      } else {
        const auto row = pred.subspan(i * od, od);
        const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        const int label = targets.labels[begin + i];
        correct += arg == label ? 1 : 0;
        double mx = *std::max_element(row.begin(), row.end()), z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        err_sum += -(row[static_cast<std::size_t>(label)] - mx - std::log(z));
      }
    }
  }
  if (spec.kind == TaskKind::regression) {
    const double n = static_cast<double>(data.samples * spec.out_dim);
    res.metric = err_sum / n;
    res.loss = res.metric;
  } else {
    res.metric = static_cast<double>(correct) / static_cast<double>(data.samples);
    res.loss = err_sum / static_cast<double>(data.samples);
  }
  return res;
}

DeltaT delta_t(std::span<const double> model_metrics, std::span<const double> baseline_metrics,
               const std::vector<bool>& higher_is_better) {
  const std::size_t n = model_metrics.size();
  if (baseline_metrics.size() != n || higher_is_better.size() != n || n == 0) {
    throw DimensionError("delta_t: metric vectors differ in length");
  }
  DeltaT d;
  for (std::size_t i = 0; i < n; ++i) {
    if (baseline_metrics[i] == 0.0) throw DomainError("delta_t: baseline metric of task " + std::to_string(i) + " is zero");
    const double rel = (model_metrics[i] - baseline_metrics[i]) / baseline_metrics[i];
    d.per_task.push_back(higher_is_better[i] ? rel : -rel);
    d.mean += d.per_task.back();
  }
  d.mean /= static_cast<double>(n);
  return d;
}

}  // namespace modsquad
