#include "modsquad/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "modsquad/mi.hpp"
#include "modsquad/moe.hpp"
#include "modsquad/ops.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

GradCheckReport grad_check(const GradCheckOptions& options) {
  ModelConfig mc;
  mc.d_in = 3;
  mc.seq_len = 3;
  mc.d_model = 6;
  mc.blocks = 1;
  mc.n_experts_attn = 2;
  mc.k_attn = 1;
  mc.n_experts_mlp = 2;
  mc.k_mlp = 2;
  mc.head_dim = 4;
  mc.mlp_hidden = 8;
  mc.flops_matched = false;

  Rng rng(options.seed);
  ModSquadModel model = ModSquadModel::init(mc, {2, 3}, rng);
  const std::vector<TaskSpec> specs = {{"reg", TaskKind::regression, 2, 0, false},
                                       {"cls", TaskKind::classification, 3, 0, false}};
  // Perturb zero-initialized parameters so every path carries signal.
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor.mutable_data()) v += std::normal_distribution<double>(0.0, 0.1)(rng);
  }
  LossWeights weights = LossWeights::init(2, options.w_mi);
  weights.log_var.mutable_data()[0] = 0.3;
  weights.log_var.mutable_data()[1] = -0.2;

  const std::size_t batch = 3;
  std::vector<double> inputs(batch * mc.seq_len * mc.d_in);
  for (double& v : inputs) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  TaskTargets reg, cls;
  for (std::size_t i = 0; i < batch * 2; ++i) reg.values.push_back(std::normal_distribution<double>(0.0, 1.0)(rng));
  cls.labels = {0, 2, 1};

  auto params = model.parameters();
  params.push_back({"loss.log_var", weights.log_var, false});

  auto loss_fn = [&]() {
    Rng noise(options.seed + 1);
    ForwardContext ctx;
    ctx.mode = Mode::train;
    ctx.rng = &noise;
    std::vector<Tensor> losses;
    std::vector<std::vector<Tensor>> gates(model.moe_layers().size());
    for (std::size_t t = 0; t < 2; ++t) {
      auto fwd = model_forward(model, inputs, batch, t, ctx);
      losses.push_back(task_loss(fwd.predictions, specs[t], t == 0 ? reg : cls));
      for (std::size_t l = 0; l < gates.size(); ++l) gates[l].push_back(fwd.gate_log[l].gates);
    }
    std::vector<Tensor> mi;
    const auto prior = uniform_task_prior(2);
    for (const auto& g : gates) mi.push_back(mi_loss_batch(g, prior));
    return total_loss(losses, mi, weights);
  };

  for (auto& p : params) p.tensor.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    std::vector<double> g(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  if (options.inject_fault) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name.find("routers") != std::string::npos) {
        for (double& g : analytic[i]) g *= 1.05;
        break;
      }
    }
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].tensor.mutable_data();
    std::vector<double> numeric(data.size());
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + options.step;
      const double up = loss_fn().item();
      data[j] = saved - options.step;
      const double down = loss_fn().item();
      data[j] = saved;
      numeric[j] = (up - down) / (2.0 * options.step);
    }
    std::vector<double> diff(data.size());
    for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = analytic[i][j] - numeric[j];
    GradCheckEntry e;
    e.name = params[i].name;
    e.size = data.size();
    e.analytic_norm = norm(analytic[i]);
    e.numeric_norm = norm(numeric);
    e.rel_error = norm(diff) / std::max({e.analytic_norm, e.numeric_norm, 1e-8});
    if (e.rel_error >= report.worst) {
      report.worst = e.rel_error;
      report.worst_name = e.name;
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.worst < options.tolerance;
  return report;
}

}  // namespace modsquad
