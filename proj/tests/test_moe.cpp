#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "modsquad/errors.hpp"
#include "modsquad/moe.hpp"
#include "support.hpp"

using namespace modsquad;
using modsquad::testing::max_abs_diff;
using modsquad::testing::uniform_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_in = 3;
  c.seq_len = 4;
  c.d_model = 8;
  c.blocks = 2;
  c.n_experts_attn = 4;
  c.k_attn = 2;
  c.n_experts_mlp = 5;
  c.k_mlp = 2;
  c.head_dim = 8;
  c.mlp_hidden = 12;
  return c;
}

std::vector<double> random_inputs(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = std::normal_distribution<double>(0.0, 1.0)(rng);
  return v;
}

Tensor eye_scaled(std::size_t d, double s) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = s;
  return Tensor::from({d, d}, v, true);
}

MoELayer mlp_layer(std::size_t d, std::size_t n, std::size_t k, std::size_t hidden, Rng& rng) {
  MoELayer layer;
  layer.kind = LayerKind::mlp;
  layer.n_slots = n;
  layer.k = k;
  for (std::size_t e = 0; e < n; ++e) {
    layer.expert_ids.push_back(e);
    layer.mlp_experts.push_back(MlpExpert::init(d, hidden, rng));
  }
  RouterParams r;
  r.w_g = uniform_tensor({d, n}, -1, 1, rng);
  r.w_noise = uniform_tensor({d, n}, -1, 1, rng);
  layer.routers.push_back(r);
  return layer;
}

// Dense single-head attention computed with plain loops.
std::vector<double> naive_attention(const AttentionExpert& e, const Tensor& x) {
  const std::size_t L = x.rows(), d = x.cols(), h = e.w_q.cols();
  auto proj = [&](const Tensor& w) {
    std::vector<double> out(L * h, 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < h; ++j)
        for (std::size_t c = 0; c < d; ++c) out[i * h + j] += x.at(i, c) * w.at(c, j);
    return out;
  };
  const auto q = proj(e.w_q), k = proj(e.w_k), v = proj(e.w_v);
  std::vector<double> ctx(L * h, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> s(L);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < h; ++c) dot += q[i * h + c] * k[j * h + c];
      s[j] = dot / std::sqrt(static_cast<double>(h));
      m = std::max(m, s[j]);
    }
    double z = 0.0;
    for (double& w : s) z += (w = std::exp(w - m));
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t c = 0; c < h; ++c) ctx[i * h + c] += s[j] / z * v[j * h + c];
  }
  std::vector<double> out(L * d, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t j = 0; j < h; ++j) out[i * d + c] += ctx[i * h + j] * e.w_o.at(j, c);
  return out;
}

}  // namespace

TEST_CASE("attention expert matches a naive dense computation") {
  Rng rng(1);
  AttentionExpert e = AttentionExpert::init(5, 3, rng);
  Tensor x = uniform_tensor({3, 5}, -1, 1, rng, false);
  Tensor y = attention_expert_forward(e, x);
  CHECK(max_abs_diff(y.data(), naive_attention(e, x)) < 1e-12);
}

TEST_CASE("single-token attention is the value path") {
  Rng rng(2);
  AttentionExpert e = AttentionExpert::init(4, 3, rng);
  Tensor x = uniform_tensor({1, 4}, -1, 1, rng, false);
  Tensor expected = ops::matmul(ops::matmul(x, e.w_v), e.w_o);
  CHECK(max_abs_diff(attention_expert_forward(e, x).data(), expected.data()) < 1e-14);
  e.w_q = uniform_tensor({4, 3}, -5, 5, rng);
  CHECK(max_abs_diff(attention_expert_forward(e, x).data(), expected.data()) < 1e-14);
}

TEST_CASE("identical tokens attend uniformly") {
  Rng rng(3);
  AttentionExpert e = AttentionExpert::init(4, 2, rng);
  Tensor row = uniform_tensor({1, 4}, -1, 1, rng, false);
  Tensor x = ops::concat_rows({row, row, row});
  Tensor y = attention_expert_forward(e, x);
  Tensor single = ops::matmul(ops::matmul(row, e.w_v), e.w_o);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(y.at(i, c) - single.at(0, c)) < 1e-14);
}

TEST_CASE("a one-expert layer is the dense expert applied to x plus the task embedding") {
  Rng rng(4);
  MoELayer layer = mlp_layer(4, 1, 1, 6, rng);
  Tensor x = uniform_tensor({5, 4}, -1, 1, rng, false);
  Tensor emb = uniform_tensor({1, 4}, -1, 1, rng, false);
  ForwardContext ctx;
  MoEOutput out = moe_forward(layer, x, 0, emb, 5, ctx);
  for (double g : out.route.gates.data()) CHECK(g == 1.0);
  Tensor ref = layer.mlp_experts[0].forward(ops::add_row(x, emb));
  CHECK(max_abs_diff(out.y.data(), ref.data()) < 1e-15);
}

TEST_CASE("a forced one-hot gate selects exactly that expert") {
  Rng rng(5);
  MoELayer layer = mlp_layer(4, 3, 1, 6, rng);
  Tensor x = uniform_tensor({5, 4}, -1, 1, rng, false);
  Tensor emb = uniform_tensor({1, 4}, -1, 1, rng, false);
  ForwardContext ctx;
  ctx.forced_gates[0] = {0.0, 0.0, 1.0};
  MoEOutput out = moe_forward(layer, x, 0, emb, 5, ctx);
  Tensor ref = layer.mlp_experts[2].forward(ops::add_row(x, emb));
  CHECK(max_abs_diff(out.y.data(), ref.data()) < 1e-15);
}

TEST_CASE("gate-weighted sum of linear experts") {
  const std::size_t d = 3;
  MoELayer layer;
  layer.kind = LayerKind::attention;
  layer.n_slots = 2;
  layer.k = 2;
  layer.expert_ids = {0, 1};
  for (double s : {2.0, -1.0}) {
    AttentionExpert e;
    e.w_q = eye_scaled(d, 1.0);
    e.w_k = eye_scaled(d, 1.0);
    e.w_v = eye_scaled(d, 1.0);
    e.w_o = eye_scaled(d, s);
    layer.attn_experts.push_back(e);
  }
  layer.routers.push_back({Tensor::zeros({d, 2}, true), Tensor::zeros({d, 2}, true)});
  Tensor x = Tensor::from({2, d}, {1.0, -2.0, 0.5, 3.0, 0.25, -1.0});
  ForwardContext ctx;
  ctx.forced_gates[0] = {0.75, 0.25};
  MoEOutput out = moe_forward(layer, x, 0, Tensor::zeros({1, d}), 1, ctx);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(out.y.at(i) - 1.25 * x.at(i)) < 1e-15);
}

TEST_CASE("unknown task index is a contract error") {
  Rng rng(6);
  MoELayer layer = mlp_layer(4, 3, 1, 6, rng);
  ForwardContext ctx;
  CHECK_THROWS_AS(moe_forward(layer, Tensor::zeros({2, 4}), 1, Tensor::zeros({1, 4}), 2, ctx), ContractError);

  ModSquadModel m = ModSquadModel::init(small_config(), {2, 3}, rng);
  std::vector<double> in(2 * 4 * 3, 0.1);
  CHECK_THROWS_AS(model_forward(m, in, 2, 2, ctx), ContractError);
}

TEST_CASE("model forward shapes and gate logs") {
  Rng rng(7);
  ModelConfig c = small_config();
  c.seq_len = 8;
  ModSquadModel m = ModSquadModel::init(c, {4, 1, 2}, rng);
  const auto in = random_inputs(2 * 8 * 3, rng);
  ForwardContext ctx;
  ForwardResult r0 = model_forward(m, in, 2, 0, ctx);
  CHECK(r0.predictions.shape() == Shape{2, 4});
  CHECK(r0.gate_log.size() == 4);
  CHECK(model_forward(m, in, 2, 1, ctx).predictions.shape() == Shape{2, 1});
  ForwardResult r2 = model_forward(m, in, 2, 2, ctx);
  CHECK(r2.predictions.shape() == Shape{2, 2});
  CHECK(max_abs_diff(r0.gate_log[0].gates.data(), r2.gate_log[0].gates.data()) > 0.0);

  for (auto& h : m.heads) {
    for (double& v : h.w.mutable_data()) v = 0.0;
  }
  const Tensor zero = model_forward(m, in, 2, 0, ctx).predictions;
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("flops matching divides expert widths by k") {
  ModelConfig c = small_config();
  CHECK(c.expert_head_dim() == 4);
  CHECK(c.expert_hidden() == 6);
  c.flops_matched = false;
  CHECK(c.expert_head_dim() == 8);
  c.k_mlp = 6;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("expert evaluations per token equal k regardless of N") {
  for (std::size_t n : {2u, 4u, 8u, 16u}) {
    ModelConfig c = small_config();
    c.n_experts_attn = n;
    c.n_experts_mlp = n;
    c.k_attn = 2;
    c.k_mlp = 1;
    c.head_dim = 4;
    Rng rng(8);
    ModSquadModel m = ModSquadModel::init(c, {2}, rng);
    const auto in = random_inputs(3 * 4 * 3, rng);
    ExpertCounter counter;
    ForwardContext ctx;
    ctx.counter = &counter;
    model_forward(m, in, 3, 0, ctx);
    const auto layers = m.moe_layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      CHECK(counter.tokens[l] == 12);
      CHECK(counter.evaluations[l] == layers[l]->k * 12);
    }
  }
}

TEST_CASE("unselected experts receive no gradient") {
  Rng rng(9);
  MoELayer layer = mlp_layer(4, 4, 1, 6, rng);
  Tensor x = uniform_tensor({3, 4}, -1, 1, rng, false);
  ForwardContext ctx;
  MoEOutput out = moe_forward(layer, x, 0, Tensor::zeros({1, 4}), 3, ctx);
  ops::sum(out.y).backward();
  std::vector<bool> used(4, false);
  for (const auto& s : out.route.selected)
    for (auto j : s) used[j] = true;
  for (std::size_t e = 0; e < 4; ++e) {
    if (used[e]) continue;
    CHECK_FALSE(layer.mlp_experts[e].w1.has_grad());
  }
}

TEST_CASE("swapping two experts and their router columns leaves outputs unchanged") {
  Rng rng(10);
  ModSquadModel m = ModSquadModel::init(small_config(), {2, 3}, rng);
  const auto in = random_inputs(2 * 4 * 3, rng);
  ForwardContext ctx;
  const auto before = model_forward(m, in, 2, 1, ctx).predictions;

  ModSquadModel p = m.clone();
  for (auto* layer : p.moe_layers()) {
    if (layer->kind == LayerKind::mlp) std::swap(layer->mlp_experts[0], layer->mlp_experts[3]);
    else std::swap(layer->attn_experts[0], layer->attn_experts[3]);
    for (auto& r : layer->routers) {
      for (Tensor* w : {&r.w_g, &r.w_noise}) {
        auto d = w->mutable_data();
        const std::size_t n = w->cols();
        for (std::size_t row = 0; row < w->rows(); ++row) std::swap(d[row * n], d[row * n + 3]);
      }
    }
  }
  const auto after = model_forward(p, in, 2, 1, ctx).predictions;
  CHECK(max_abs_diff(before.data(), after.data()) < 1e-12);
}

TEST_CASE("clone is independent and add_task keeps existing outputs") {
  Rng rng(11);
  ModSquadModel m = ModSquadModel::init(small_config(), {2, 3}, rng);
  const auto in = random_inputs(2 * 4 * 3, rng);
  ForwardContext ctx;
  const auto ref = model_forward(m, in, 2, 0, ctx).predictions;

  ModSquadModel c = m.clone();
  c.in_w.mutable_data()[0] += 1.0;
  CHECK(max_abs_diff(model_forward(m, in, 2, 0, ctx).predictions.data(), ref.data()) == 0.0);

  const std::size_t before = m.parameter_count();
  const std::size_t id = m.add_task(5, rng);
  CHECK(id == 2);
  CHECK(m.num_tasks() == 3);
  CHECK(model_forward(m, in, 2, 2, ctx).predictions.shape() == Shape{2, 5});
  CHECK(max_abs_diff(model_forward(m, in, 2, 0, ctx).predictions.data(), ref.data()) == 0.0);
  const std::size_t routers = 2 * (2 * 8 * 4) + 2 * (2 * 8 * 5);
  CHECK(m.parameter_count() - before == routers + 8 + 8 * 5 + 5);
}

TEST_CASE("parameter names are unique and cover every group") {
  Rng rng(12);
  ModSquadModel m = ModSquadModel::init(small_config(), {2, 3}, rng);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) names.insert(p.name);
  CHECK(names.size() == m.parameters().size());
  CHECK(names.count("blocks.1.mlp.routers.1.w_g") == 1);
  CHECK(names.count("blocks.0.attn.experts.3.w_o") == 1);
  CHECK(names.count("task_embeddings.0") == 1);
  CHECK(names.count("heads.1.w") == 1);
}
