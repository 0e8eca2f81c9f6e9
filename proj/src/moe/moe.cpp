#include "modsquad/moe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "modsquad/errors.hpp"
#include "modsquad/ops.hpp"

namespace modsquad {

namespace {

Tensor linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng, true);
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_param(std::size_t n) { return Tensor::full({n}, 1.0, true); }

std::string layer_name(LayerKind kind) { return kind == LayerKind::attention ? "attn" : "mlp"; }

// Calls f(name, tensor&, decay) for every parameter in a fixed order.
template <typename Model, typename F>
void visit_params(Model& m, F&& f) {
  f("input.w", m.in_w, true);
  f("input.b", m.in_b, false);
  f("pos_embed", m.pos_embed, false);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string pre = "blocks." + std::to_string(b) + ".";
    f(pre + "ln1.gain", blk.ln1_gain, false);
    f(pre + "ln1.bias", blk.ln1_bias, false);
    f(pre + "ln2.gain", blk.ln2_gain, false);
    f(pre + "ln2.bias", blk.ln2_bias, false);
    if (blk.moe) {
      for (auto* layer : {&blk.attn, &blk.mlp}) {
        const std::string lp = pre + layer_name(layer->kind) + ".";
        for (std::size_t e = 0; e < layer->stored_experts(); ++e) {
          const std::string ep = lp + "experts." + std::to_string(layer->expert_ids[e]) + ".";
          if (layer->kind == LayerKind::attention) {
            auto& x = layer->attn_experts[e];
            f(ep + "w_q", x.w_q, true);
            f(ep + "w_k", x.w_k, true);
            f(ep + "w_v", x.w_v, true);
            f(ep + "w_o", x.w_o, true);
          } else {
            auto& x = layer->mlp_experts[e];
            f(ep + "w1", x.w1, true);
            f(ep + "b1", x.b1, false);
            f(ep + "w2", x.w2, true);
            f(ep + "b2", x.b2, false);
          }
        }
        for (std::size_t t = 0; t < layer->routers.size(); ++t) {
          const std::string rp = lp + "routers." + std::to_string(m.task_ids[t]) + ".";
          f(rp + "w_g", layer->routers[t].w_g, true);
          f(rp + "w_noise", layer->routers[t].w_noise, true);
        }
      }
    } else {
      f(pre + "attn.dense.w_q", blk.dense_attn.w_q, true);
      f(pre + "attn.dense.w_k", blk.dense_attn.w_k, true);
      f(pre + "attn.dense.w_v", blk.dense_attn.w_v, true);
      f(pre + "attn.dense.w_o", blk.dense_attn.w_o, true);
      f(pre + "mlp.dense.w1", blk.dense_mlp.w1, true);
      f(pre + "mlp.dense.b1", blk.dense_mlp.b1, false);
      f(pre + "mlp.dense.w2", blk.dense_mlp.w2, true);
      f(pre + "mlp.dense.b2", blk.dense_mlp.b2, false);
    }
  }
  f("final_ln.gain", m.final_gain, false);
  f("final_ln.bias", m.final_bias, false);
  for (std::size_t t = 0; t < m.task_embeddings.rows.size(); ++t) {
    f("task_embeddings." + std::to_string(m.task_ids[t]), m.task_embeddings.rows[t], false);
  }
  for (std::size_t t = 0; t < m.heads.size(); ++t) {
    const std::string hp = "heads." + std::to_string(m.task_ids[t]) + ".";
    f(hp + "w", m.heads[t].w, true);
    f(hp + "b", m.heads[t].b, false);
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model." + what);
  };
  need(d_in > 0, "d_in must be positive");
  need(seq_len > 0, "seq_len must be positive");
  need(d_model > 0, "d_model must be positive");
  need(blocks > 0, "blocks must be positive");
  need(moe_every >= 1, "moe_every must be >= 1");
  need(n_experts_attn >= 1 && k_attn >= 1 && k_attn <= n_experts_attn,
       "k_attn must lie in [1, n_experts_attn]");
  need(n_experts_mlp >= 1 && k_mlp >= 1 && k_mlp <= n_experts_mlp,
       "k_mlp must lie in [1, n_experts_mlp]");
  need(expert_head_dim() >= 1, "head_dim too small for k_attn");
  need(expert_hidden() >= 1, "mlp_hidden too small for k_mlp");
}

MlpExpert MlpExpert::init(std::size_t d_model, std::size_t hidden, Rng& rng) {
  MlpExpert e;
  e.w1 = linear_weight(d_model, hidden, rng);
  e.b1 = zeros_param(hidden);
  e.w2 = linear_weight(hidden, d_model, rng);
  e.b2 = zeros_param(d_model);
  return e;
}

Tensor MlpExpert::forward(const Tensor& z) const {
  Tensor h = ops::gelu(ops::add_row(ops::matmul(z, w1), b1));
  return ops::add_row(ops::matmul(h, w2), b2);
}

AttentionExpert AttentionExpert::init(std::size_t d_model, std::size_t d_head, Rng& rng) {
  AttentionExpert e;
  e.w_q = linear_weight(d_model, d_head, rng);
  e.w_k = linear_weight(d_model, d_head, rng);
  e.w_v = linear_weight(d_model, d_head, rng);
  e.w_o = linear_weight(d_head, d_model, rng);
  return e;
}

Tensor AttentionExpert::forward_rows(const Tensor& z, std::span<const std::size_t> rows,
                                     std::size_t seq_len) const {
  // Keys and values are only computed for sequences that own a query. Rows
  // are ascending, so their sequences arrive in order.
  std::vector<std::size_t> key_rows;
  std::vector<ops::KeySpan> spans;
  spans.reserve(rows.size());
  std::size_t last_seq = static_cast<std::size_t>(-1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i] <= rows[i - 1]) throw ContractError("attention query rows must ascend");
    const std::size_t s = rows[i] / seq_len;
    if (s != last_seq) {
      for (std::size_t t = 0; t < seq_len; ++t) key_rows.push_back(s * seq_len + t);
      last_seq = s;
    }
    spans.push_back({key_rows.size() - seq_len, seq_len});
  }
  Tensor q = ops::matmul(ops::gather_rows(z, rows), w_q);
  Tensor zk = key_rows.size() == z.rows() ? z : ops::gather_rows(z, key_rows);
  Tensor k = ops::matmul(zk, w_k);
  Tensor v = ops::matmul(zk, w_v);
  return ops::matmul(ops::segment_attention(q, k, v, spans), w_o);
}

Tensor attention_expert_forward(const AttentionExpert& expert, const Tensor& x) {
  std::vector<std::size_t> rows(x.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return expert.forward_rows(x, rows, x.rows());
}

std::vector<bool> MoELayer::available() const {
  if (expert_ids.size() == n_slots) return {};
  std::vector<bool> mask(n_slots, false);
  for (auto id : expert_ids) mask[id] = true;
  return mask;
}

void ExpertCounter::reset(std::size_t layers) {
  tokens.assign(layers, 0);
  evaluations.assign(layers, 0);
  per_expert.assign(layers, {});
}

MoEOutput moe_forward(const MoELayer& layer, const Tensor& x, std::size_t local_task,
                      const Tensor& task_embedding, std::size_t seq_len, ForwardContext& ctx) {
  if (local_task >= layer.routers.size()) {
    throw ContractError("unknown task index " + std::to_string(local_task) + " for a layer with " +
                        std::to_string(layer.routers.size()) + " routers");
  }
  RouteOptions opts;
  opts.renormalize = layer.renormalize;
  opts.available = layer.available();
  if (auto it = ctx.forced_gates.find(layer.layer_id); it != ctx.forced_gates.end()) {
    opts.forced = it->second;
  }
  MoEOutput out;
  out.route = route(x, layer.routers[local_task], layer.k, ctx.mode, ctx.rng, opts);

  const std::size_t tokens = x.rows(), d = x.cols();
  Tensor z = ops::add_row(x, task_embedding);

  std::vector<std::vector<std::size_t>> by_slot(layer.n_slots);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (auto j : out.route.selected[t]) by_slot[j].push_back(t);
  }

  if (ctx.counter) {
    auto& c = *ctx.counter;
    if (c.tokens.size() <= layer.layer_id) {
      c.tokens.resize(layer.layer_id + 1, 0);
      c.evaluations.resize(layer.layer_id + 1, 0);
      c.per_expert.resize(layer.layer_id + 1);
    }
    c.tokens[layer.layer_id] += tokens;
    c.per_expert[layer.layer_id].resize(layer.n_slots, 0);
  }

  std::vector<ops::RowScatter> parts;
  for (std::size_t e = 0; e < layer.stored_experts(); ++e) {
    const std::size_t slot = layer.expert_ids[e];
    const auto& rows = by_slot[slot];
    if (rows.empty()) continue;
    Tensor y = layer.kind == LayerKind::attention
                   ? layer.attn_experts[e].forward_rows(z, rows, seq_len)
                   : layer.mlp_experts[e].forward(ops::gather_rows(z, rows));
    parts.push_back({rows, ops::mul_col(y, ops::gather_column(out.route.gates, rows, slot))});
    if (ctx.counter) {
      ctx.counter->evaluations[layer.layer_id] += rows.size();
      ctx.counter->per_expert[layer.layer_id][slot] += rows.size();
    }
  }
  for (std::size_t j = 0; j < layer.n_slots; ++j) {
    if (!by_slot[j].empty() &&
        std::find(layer.expert_ids.begin(), layer.expert_ids.end(), j) == layer.expert_ids.end()) {
      throw ContractError("router selected a removed expert");
    }
  }
  out.y = ops::scatter_add_rows(tokens, d, parts);
  return out;
}

ModSquadModel ModSquadModel::init(const ModelConfig& config, const std::vector<std::size_t>& out_dims,
                                  Rng& rng) {
  config.validate();
  if (out_dims.empty()) throw ConfigError("model needs at least one task");
  ModSquadModel m;
  m.config = config;
  const std::size_t d = config.d_model;
  for (std::size_t t = 0; t < out_dims.size(); ++t) m.task_ids.push_back(t);
  m.out_dims = out_dims;
  m.in_w = linear_weight(config.d_in, d, rng);
  m.in_b = zeros_param(d);
  m.pos_embed = normal_tensor({config.seq_len, d}, 0.02, rng, true);
  std::size_t moe_index = 0;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    Block blk;
    blk.moe = config.block_is_moe(b);
    blk.ln1_gain = ones_param(d);
    blk.ln1_bias = zeros_param(d);
    blk.ln2_gain = ones_param(d);
    blk.ln2_bias = zeros_param(d);
    if (blk.moe) {
      auto make_layer = [&](LayerKind kind, std::size_t n, std::size_t k) {
        MoELayer layer;
        layer.kind = kind;
        layer.layer_id = moe_index++;
        layer.n_slots = n;
        layer.k = k;
        layer.renormalize = config.renormalize_gates;
        for (std::size_t e = 0; e < n; ++e) {
          layer.expert_ids.push_back(e);
          if (kind == LayerKind::attention) {
            layer.attn_experts.push_back(AttentionExpert::init(d, config.expert_head_dim(), rng));
          } else {
            layer.mlp_experts.push_back(MlpExpert::init(d, config.expert_hidden(), rng));
          }
        }
        for (std::size_t t = 0; t < out_dims.size(); ++t) layer.routers.push_back(RouterParams::init(d, n, rng));
        return layer;
      };
      blk.attn = make_layer(LayerKind::attention, config.n_experts_attn, config.k_attn);
      blk.mlp = make_layer(LayerKind::mlp, config.n_experts_mlp, config.k_mlp);
    } else {
      blk.dense_attn = AttentionExpert::init(d, config.head_dim, rng);
      blk.dense_mlp = MlpExpert::init(d, config.mlp_hidden, rng);
    }
    m.blocks.push_back(std::move(blk));
  }
  m.final_gain = ones_param(d);
  m.final_bias = zeros_param(d);
  m.task_embeddings = TaskEmbeddingTable::init(out_dims.size(), d, rng);
  for (auto od : out_dims) m.heads.push_back({linear_weight(d, od, rng), zeros_param(od)});
  return m;
}

std::size_t ModSquadModel::local_task(std::size_t task) const {
  auto it = std::find(task_ids.begin(), task_ids.end(), task);
  if (it == task_ids.end()) throw ContractError("task id " + std::to_string(task) + " out of range");
  return static_cast<std::size_t>(it - task_ids.begin());
}

std::vector<NamedParam> ModSquadModel::parameters() const {
  std::vector<NamedParam> out;
  visit_params(const_cast<ModSquadModel&>(*this), [&](const std::string& name, Tensor& t, bool decay) {
    out.push_back({name, t, decay});
  });
  return out;
}

std::vector<const MoELayer*> ModSquadModel::moe_layers() const {
  std::vector<const MoELayer*> out;
  for (const auto& b : blocks) {
    if (b.moe) {
      out.push_back(&b.attn);
      out.push_back(&b.mlp);
    }
  }
  return out;
}

std::vector<MoELayer*> ModSquadModel::moe_layers() {
  std::vector<MoELayer*> out;
  for (auto& b : blocks) {
    if (b.moe) {
      out.push_back(&b.attn);
      out.push_back(&b.mlp);
    }
  }
  return out;
}

std::size_t ModSquadModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::size_t ModSquadModel::add_task(std::size_t out_dim, Rng& rng) {
  const std::size_t id = *std::max_element(task_ids.begin(), task_ids.end()) + 1;
  const std::size_t d = config.d_model;
  for (auto* layer : moe_layers()) layer->routers.push_back(RouterParams::init(d, layer->n_slots, rng));
  task_embeddings.rows.push_back(normal_tensor({1, d}, 0.02, rng, true));
  heads.push_back({linear_weight(d, out_dim, rng), zeros_param(out_dim)});
  task_ids.push_back(id);
  out_dims.push_back(out_dim);
  return id;
}

ModSquadModel ModSquadModel::clone() const {
  ModSquadModel copy = *this;
  visit_params(copy, [](const std::string&, Tensor& t, bool) { t = t.clone_leaf(t.requires_grad()); });
  return copy;
}

ForwardResult model_forward(const ModSquadModel& model, std::span<const double> inputs,
                            std::size_t batch, std::size_t task, ForwardContext& ctx) {
  const auto& cfg = model.config;
  const std::size_t local = model.local_task(task);
  const std::size_t tokens = batch * cfg.seq_len;
  if (batch == 0 || inputs.size() != tokens * cfg.d_in) {
    throw DimensionError("model_forward: expected " + std::to_string(batch) + "x" +
                         std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.d_in) + " inputs, got " +
                         std::to_string(inputs.size()) + " values");
  }
  Tensor x = Tensor::from({tokens, cfg.d_in}, std::vector<double>(inputs.begin(), inputs.end()));
  Tensor h = ops::add_tiled(ops::add_row(ops::matmul(x, model.in_w), model.in_b), model.pos_embed);

  ForwardResult res;
  const Tensor& emb = model.task_embeddings.rows[local];
  for (const auto& blk : model.blocks) {
    Tensor a_in = ops::layer_norm(h, blk.ln1_gain, blk.ln1_bias);
    if (blk.moe) {
      auto a = moe_forward(blk.attn, a_in, local, emb, cfg.seq_len, ctx);
      h = ops::add(h, a.y);
      res.gate_log.push_back(std::move(a.route));
      auto m = moe_forward(blk.mlp, ops::layer_norm(h, blk.ln2_gain, blk.ln2_bias), local, emb,
                           cfg.seq_len, ctx);
      h = ops::add(h, m.y);
      res.gate_log.push_back(std::move(m.route));
    } else {
      std::vector<std::size_t> all(tokens);
      for (std::size_t i = 0; i < tokens; ++i) all[i] = i;
      h = ops::add(h, blk.dense_attn.forward_rows(a_in, all, cfg.seq_len));
      h = ops::add(h, blk.dense_mlp.forward(ops::layer_norm(h, blk.ln2_gain, blk.ln2_bias)));
    }
  }
  Tensor pooled = ops::mean_pool(ops::layer_norm(h, model.final_gain, model.final_bias), cfg.seq_len);
  const auto& head = model.heads[local];
  res.predictions = ops::add_row(ops::matmul(pooled, head.w), head.b);
  return res;
}

}  // namespace modsquad
