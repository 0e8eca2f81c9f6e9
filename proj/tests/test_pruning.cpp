#include <doctest.h>

#include <cmath>
#include <numeric>

#include "modsquad/errors.hpp"
#include "modsquad/pruning.hpp"
#include "support.hpp"

using namespace modsquad;

namespace {

UsageStats one_layer(std::vector<double> freq) {
  UsageStats s;
  s.tasks = {0};
  s.experts = {freq.size()};
  s.layers = {std::move(freq)};
  return s;
}

std::vector<std::size_t> kept_by_theta(const std::vector<double>& freq, std::size_t k, double theta) {
  return threshold_spec(one_layer(freq), 0, {k}, theta).layers[0].kept;
}

struct Fixture {
  SyntheticBenchmark bench;
  ModSquadModel model;
  Split data;

  Fixture() : bench(config()) {
    ModelConfig c;
    c.d_in = bench.config().d_in;
    c.seq_len = bench.config().seq_len;
    c.d_model = 12;
    c.blocks = 2;
    c.n_experts_attn = 4;
    c.k_attn = 2;
    c.n_experts_mlp = 6;
    c.k_mlp = 2;
    c.head_dim = 8;
    c.mlp_hidden = 12;
    Rng rng(1);
    model = ModSquadModel::init(c, bench.out_dims(bench.trained_task_ids()), rng);
    data = bench.test_split();
  }

  static BenchmarkConfig config() {
    BenchmarkConfig bc;
    bc.d_in = 4;
    bc.seq_len = 3;
    bc.train_samples = 32;
    bc.test_samples = 50;
    return bc;
  }

  // Zero gating weights make every logit tie, so only the lowest slots are used.
  void zero_router(std::size_t task) {
    for (auto* layer : model.moe_layers()) {
      for (double& v : layer->routers[model.local_task(task)].w_g.mutable_data()) v = 0.0;
    }
  }
};

}  // namespace

TEST_CASE("threshold rule reference cases") {
  const auto a = threshold_spec(one_layer({0.5, 0.3, 0.008, 0.0}), 0, {2}, 0.01);
  CHECK(a.layers[0].kept == std::vector<std::size_t>{0, 1});
  CHECK(a.layers[0].k_adjusted == 2);
  const auto b = threshold_spec(one_layer({0.97, 0.03, 0.0, 0.0}), 0, {2}, 0.05);
  CHECK(b.layers[0].kept == std::vector<std::size_t>{0});
  CHECK(b.layers[0].k_adjusted == 1);
  CHECK(b.layers[0].original_k == 2);
  CHECK(kept_by_theta({0.5, 0.3, 0.2, 0.0}, 2, 0.0) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("threshold above every frequency keeps the argmax with a warning") {
  std::vector<std::string> warnings;
  const auto s = threshold_spec(one_layer({0.3, 0.4, 0.3, 0.0}), 0, {2}, 0.5, &warnings);
  CHECK(s.layers[0].kept == std::vector<std::size_t>{1});
  CHECK(s.layers[0].k_adjusted == 1);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("keeping most used expert 1") != std::string::npos);
}

TEST_CASE("invalid policy parameters") {
  const UsageStats s = one_layer({0.5, 0.5});
  CHECK_THROWS_AS(threshold_spec(s, 0, {1}, -0.1), ConfigError);
  CHECK_THROWS_AS(threshold_spec(s, 0, {1}, 1.5), ConfigError);
  CHECK_THROWS_AS(top_share_spec(s, 0, {1}, 0.0), ConfigError);
  CHECK_THROWS_AS(top_share_spec(s, 0, {1}, 101.0), ConfigError);
  CHECK_THROWS_AS(threshold_spec(s, 0, {1, 1}, 0.1), DimensionError);
  CHECK_THROWS_AS(threshold_spec(s, 3, {1}, 0.1), ContractError);
}

TEST_CASE("top share keeps the ceiling of the share, ties to the lower index") {
  const std::vector<double> f8 = {0.05, 0.2, 0.05, 0.3, 0.1, 0.1, 0.1, 0.1};
  CHECK(top_share_spec(one_layer(f8), 0, {4}, 50).layers[0].kept == std::vector<std::size_t>{1, 3, 4, 5});
  CHECK(top_share_spec(one_layer(f8), 0, {4}, 40).layers[0].kept.size() == 4);
  CHECK(top_share_spec(one_layer(f8), 0, {4}, 37.5).layers[0].kept.size() == 3);
  const auto single = top_share_spec(one_layer(f8), 0, {4}, 1).layers[0];
  CHECK(single.kept == std::vector<std::size_t>{3});
  CHECK(single.k_adjusted == 1);
  const auto all = top_share_spec(one_layer(f8), 0, {4}, 100).layers[0];
  CHECK(all.kept.size() == 8);
  CHECK(all.k_adjusted == 4);
  const std::vector<double> hot = {0.0, 0.0, 1.0, 0.0};
  CHECK(top_share_spec(one_layer(hot), 0, {2}, 25).layers[0].kept == std::vector<std::size_t>{2});
}

TEST_CASE("threshold kept sets shrink as theta grows and re-thresholding is idempotent") {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 10;
    std::vector<double> f(n);
    for (double& v : f) v = rng() % 3 == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
    f[rng() % n] += 0.1;
    const double s = std::accumulate(f.begin(), f.end(), 0.0);
    for (double& v : f) v /= s;
    const double t1 = std::uniform_real_distribution<double>(0, 0.3)(rng);
    const double t2 = t1 + std::uniform_real_distribution<double>(0, 0.3)(rng);
    const auto k1 = kept_by_theta(f, 2, t1), k2 = kept_by_theta(f, 2, t2);
    CHECK(std::includes(k1.begin(), k1.end(), k2.begin(), k2.end()));

    std::vector<double> g(n, 0.0);
    double kept_mass = 0.0;
    for (auto i : k1) kept_mass += f[i];
    for (auto i : k1) g[i] = f[i] / kept_mass;
    CHECK(kept_by_theta(g, 2, t1) == k1);
    CHECK(kept_by_theta(f, 2, t1) == k1);
  }
}

TEST_CASE("usage frequencies are distributions and follow tie-broken routing") {
  Fixture fx;
  const auto stats = usage_frequency(fx.model, {0, 1, 2, 3}, fx.data);
  for (std::size_t l = 0; l < stats.layers.size(); ++l) {
    for (std::size_t t = 0; t < 4; ++t) {
      auto f = stats.frequency(l, t);
      CHECK(std::abs(std::accumulate(f.begin(), f.end(), 0.0) - 1.0) < 1e-9);
      for (double v : f) CHECK(v >= 0.0);
    }
  }
  fx.zero_router(2);
  const auto tied = usage_frequency(fx.model, 2, fx.data);
  for (std::size_t l = 0; l < tied.layers.size(); ++l) {
    auto f = tied.frequency(l, 2);
    CHECK(f[0] == 0.5);
    CHECK(f[1] == 0.5);
    for (std::size_t i = 2; i < f.size(); ++i) CHECK(f[i] == 0.0);
  }
  for (auto* layer : fx.model.moe_layers()) layer->k = layer->n_slots;
  const auto uniform = usage_frequency(fx.model, 2, fx.data);
  for (std::size_t l = 0; l < uniform.layers.size(); ++l) {
    for (double v : uniform.frequency(l, 2)) {
      CHECK(std::abs(v - 1.0 / static_cast<double>(uniform.experts[l])) < 1e-12);
    }
  }
  Split empty;
  CHECK_THROWS_AS(usage_frequency(fx.model, 0, empty), ContractError);
}

TEST_CASE("theta zero pruning removes only unused experts and is output-equivalent") {
  Fixture fx;
  fx.zero_router(1);
  const auto stats = usage_frequency(fx.model, 1, fx.data);
  PruneResult r = prune_threshold(fx.model, 1, stats, 0.0);
  for (const auto& l : r.spec.layers) {
    CHECK(l.kept == std::vector<std::size_t>{0, 1});
    CHECK(l.k_adjusted == 2);
  }
  CHECK(r.warnings.empty());
  CHECK(r.model.task_ids == std::vector<std::size_t>{1});
  const auto rep = verify_equivalence(fx.model, r.model, 1, fx.bench.tasks()[1], fx.data);
  CHECK(rep.max_abs_output_diff < 1e-9);
  CHECK(rep.metric_full == rep.metric_pruned);
  CHECK(rep.params_pruned < rep.params_full);
  CHECK(rep.expert_params_pruned < rep.expert_params_full);
  CHECK(rep.removed_expert_evaluations == 0);
}

TEST_CASE("theta zero on an untouched model is exactly equivalent") {
  Fixture fx;
  const auto stats = usage_frequency(fx.model, 3, fx.data);
  PruneResult r = prune_threshold(fx.model, 3, stats, 0.0);
  const auto rep = verify_equivalence(fx.model, r.model, 3, fx.bench.tasks()[3], fx.data);
  CHECK(rep.max_abs_output_diff < 1e-9);
  const auto again = usage_frequency(r.model, 3, fx.data);
  CHECK(threshold_spec(again, 3, {2, 2, 2, 2}, 0.0).layers[0].kept == r.spec.layers[0].kept);
}

TEST_CASE("pruned models never evaluate removed experts and keep output shapes") {
  Fixture fx;
  const auto stats = usage_frequency(fx.model, 0, fx.data);
  PruneResult r = prune_top_share(fx.model, 0, stats, 50);
  const auto layers = r.model.moe_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    CHECK(layers[l]->stored_experts() == r.spec.layers[l].kept.size());
    CHECK(layers[l]->k <= fx.model.moe_layers()[l]->k);
    CHECK(layers[l]->routers.size() == 1);
  }
  ExpertCounter counter;
  const auto res = evaluate(r.model, 0, fx.bench.tasks()[0], fx.data, &counter);
  CHECK(res.predictions.size() == fx.data.samples * fx.bench.tasks()[0].out_dim);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto mask = layers[l]->available();
    for (std::size_t slot = 0; slot < mask.size(); ++slot) {
      if (!mask[slot]) CHECK(counter.per_expert[l][slot] == 0);
    }
    CHECK(counter.evaluations[l] == layers[l]->k * counter.tokens[l]);
  }
  const auto rep = verify_equivalence(fx.model, r.model, 0, fx.bench.tasks()[0], fx.data);
  CHECK(rep.removed_expert_evaluations == 0);
  CHECK_THROWS_AS(verify_equivalence(fx.model, r.model, 1, fx.bench.tasks()[1], fx.data), ContractError);
}

TEST_CASE("keeping every expert only drops the other tasks' parameters") {
  Fixture fx;
  const auto stats = usage_frequency(fx.model, 2, fx.data);
  PruneResult r = prune_top_share(fx.model, 2, stats, 100);
  CHECK(expert_parameter_count(r.model) == expert_parameter_count(fx.model));
  const auto rep = verify_equivalence(fx.model, r.model, 2, fx.bench.tasks()[2], fx.data);
  CHECK(rep.max_abs_output_diff == 0.0);
}

TEST_CASE("relative degradation direction") {
  EquivalenceReport r;
  r.metric_full = 0.8;
  r.metric_pruned = 0.76;
  r.higher_is_better = true;
  CHECK(std::abs(r.relative_degradation() - 0.05) < 1e-12);
  r.higher_is_better = false;
  CHECK(std::abs(r.relative_degradation() + 0.05) < 1e-12);
  r.metric_full = 0.0;
  CHECK_THROWS_AS(r.relative_degradation(), DomainError);
}

TEST_CASE("stats from an EMA accumulator") {
  UsageAccumulator acc(1, 2, {3});
  acc.accumulate(0, 0, std::vector<double>{1, 1, 0});
  acc.accumulate(0, 1, std::vector<double>{0, 0, 2});
  UsageEma ema;
  ema.update(acc);
  const auto s = UsageStats::from_ema(ema, {5, 7}, {3});
  CHECK(s.frequency(0, 7)[2] == 1.0);
  CHECK(s.frequency(0, 5)[0] == 0.5);
  CHECK_THROWS_AS(UsageStats::from_ema(UsageEma{}, {0}, {3}), ContractError);
  CHECK_THROWS_AS(UsageStats::from_accumulator(acc, {0}), DimensionError);
}
