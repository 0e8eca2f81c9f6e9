#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modsquad/errors.hpp"
#include "modsquad/training.hpp"
#include "support.hpp"

using namespace modsquad;

namespace {

ModelConfig tiny_model(const BenchmarkConfig& bc) {
  ModelConfig c;
  c.d_in = bc.d_in;
  c.seq_len = bc.seq_len;
  c.d_model = 12;
  c.blocks = 1;
  c.n_experts_attn = 3;
  c.k_attn = 2;
  c.n_experts_mlp = 4;
  c.k_mlp = 2;
  c.head_dim = 8;
  c.mlp_hidden = 16;
  return c;
}

BenchmarkConfig tiny_bench() {
  BenchmarkConfig bc;
  bc.d_in = 4;
  bc.seq_len = 3;
  bc.train_samples = 96;
  bc.test_samples = 40;
  return bc;
}

std::vector<StepStats> run_steps(std::size_t steps, std::uint64_t seed, double w_mi = 0.001) {
  SyntheticBenchmark bench(tiny_bench());
  Rng rng(seed);
  auto ids = bench.trained_task_ids();
  ModSquadModel model = ModSquadModel::init(tiny_model(bench.config()), bench.out_dims(ids), rng);
  LossWeights w = LossWeights::init(ids.size(), w_mi);
  TrainConfig tc;
  tc.epochs = steps / 12;
  tc.warmup_epochs = 0;
  tc.base_lr = 1e-3;
  tc.samples_per_task = 8;
  tc.seed = seed;
  LossConfig lc;
  lc.w_mi = w_mi;
  return train_model(model, w, bench.train_split(), bench.tasks(), tc, lc).history;
}

}  // namespace

TEST_CASE("learning-rate schedule endpoints") {
  LrSchedule s{2e-4, 10, 100};
  CHECK(s.at(0) == 0.0);
  CHECK(std::abs(s.at(5) - 1e-4) < 1e-18);
  CHECK(s.at(10) == 2e-4);
  CHECK(std::abs(s.at(55) - 1e-4) < 1e-15);
  CHECK(s.at(99) < 1e-3 * 2e-4);
  CHECK(s.at(100) == 0.0);
  for (std::size_t i = 10; i < 100; ++i) CHECK(s.at(i + 1) <= s.at(i));
  LrSchedule flat{1.0, 0, 4};
  CHECK(flat.at(0) == 1.0);
}

TEST_CASE("AdamW matches a hand-computed two-step update") {
  Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
  AdamW opt({{"w", w, true}}, 0.1);
  const double lr = 0.01;

  w.mutable_grad()[0] = 0.5;
  w.mutable_grad()[1] = -0.25;
  opt.step(lr);
  // First step: m_hat = g, v_hat = g^2.
  const double w0 = 1.0 - lr * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0);
  const double w1 = -2.0 - lr * (-0.25 / (0.25 + 1e-8) + 0.1 * -2.0);
  CHECK(std::abs(w.at(0) - w0) < 1e-15);
  CHECK(std::abs(w.at(1) - w1) < 1e-15);

  w.mutable_grad()[0] = 0.2;
  w.mutable_grad()[1] = 0.0;
  opt.step(lr);
  auto second = [&](double g1, double g2, double prev) {
    const double m = 0.9 * 0.1 * g1 + 0.1 * g2;
    const double v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    const double mh = m / (1.0 - 0.81), vh = v / (1.0 - 0.999 * 0.999);
    return prev - lr * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * prev);
  };
  CHECK(std::abs(w.at(0) - second(0.5, 0.2, w0)) < 1e-15);
  CHECK(std::abs(w.at(1) - second(-0.25, 0.0, w1)) < 1e-15);
  CHECK(opt.steps() == 2);
}

TEST_CASE("AdamW with zero gradient applies only weight decay") {
  Tensor decayed = Tensor::from({2}, {1.0, -3.0}, true);
  Tensor plain = Tensor::from({2}, {1.0, -3.0}, true);
  Tensor frozen = Tensor::from({1}, {4.0}, false);
  AdamW opt({{"a", decayed, true}, {"b", plain, false}, {"c", frozen, true}}, 0.05);
  opt.zero_grad();
  decayed.mutable_grad();
  plain.mutable_grad();
  opt.step(0.1);
  CHECK(decayed.at(0) == 1.0 - 0.1 * 0.05 * 1.0);
  CHECK(decayed.at(1) == -3.0 - 0.1 * 0.05 * -3.0);
  CHECK(plain.at(0) == 1.0);
  CHECK(plain.at(1) == -3.0);
  CHECK(frozen.at(0) == 4.0);

  AdamW none({{"a", plain, true}}, 0.0);
  none.step(0.1);
  CHECK(plain.at(0) == 1.0);
}

TEST_CASE("global gradient clipping") {
  Tensor a = Tensor::from({2}, {0, 0}, true);
  Tensor b = Tensor::from({1}, {0}, true);
  AdamW opt({{"a", a, false}, {"b", b, false}}, 0.0);
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  CHECK(opt.clip_grad_norm(1.0) == 5.0);
  CHECK(std::abs(a.grad()[0] - 0.6) < 1e-15);
  CHECK(std::abs(b.grad()[0] - 0.8) < 1e-15);
  CHECK(opt.clip_grad_norm(10.0) == doctest::Approx(1.0));
  CHECK(std::abs(b.grad()[0] - 0.8) < 1e-15);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.validate();
  c.warmup_epochs = c.epochs;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.base_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.theta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("benchmark generation is deterministic and group-structured") {
  SyntheticBenchmark bench(tiny_bench());
  const Split a = bench.train_split(), b = bench.train_split();
  CHECK(a.inputs == b.inputs);
  for (std::size_t t = 0; t < bench.tasks().size(); ++t) {
    CHECK(a.targets[t].values == b.targets[t].values);
    CHECK(a.targets[t].labels == b.targets[t].labels);
  }
  CHECK(bench.generate(SplitKind::test, 10).inputs != bench.generate(SplitKind::train, 10).inputs);
  CHECK(bench.generate(SplitKind::train, 10, 1).inputs != bench.generate(SplitKind::train, 10, 0).inputs);
  CHECK_THROWS_AS(bench.generate(SplitKind::train, 0), ContractError);

  CHECK(bench.tasks().size() == 5);
  CHECK(bench.trained_task_ids() == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(bench.heldout_task_ids() == std::vector<std::size_t>{4});
  CHECK(bench.feature_overlap(0, 1) == 1.0);
  CHECK(bench.feature_overlap(0, 2) == 0.0);
  CHECK(bench.feature_overlap(4, 0) == 1.0);
  CHECK(bench.tasks()[1].kind == TaskKind::classification);
}

TEST_CASE("noise-free regression targets are linear in the group latent") {
  BenchmarkConfig bc = tiny_bench();
  bc.noise_std = 0.0;
  SyntheticBenchmark bench(bc);
  const Split s = bench.generate(SplitKind::train, 30);
  const std::size_t dl = bc.d_latent, od = bc.regression_dim;
  // Least squares of task 0 targets on latent(group 0), solved by normal equations.
  std::vector<double> ata(dl * dl, 0.0), aty(dl * od, 0.0);
  std::vector<std::vector<double>> z;
  for (std::size_t i = 0; i < s.samples; ++i) {
    z.push_back(bench.latent(0, std::span<const double>(s.inputs.data() + i * s.sample_size(), s.sample_size())));
    for (std::size_t a = 0; a < dl; ++a) {
      for (std::size_t b = 0; b < dl; ++b) ata[a * dl + b] += z[i][a] * z[i][b];
      for (std::size_t o = 0; o < od; ++o) aty[a * od + o] += z[i][a] * s.targets[0].values[i * od + o];
    }
  }
  for (std::size_t c = 0; c < dl; ++c) {
    for (std::size_t r = c + 1; r < dl; ++r) {
      const double f = ata[r * dl + c] / ata[c * dl + c];
      for (std::size_t k = 0; k < dl; ++k) ata[r * dl + k] -= f * ata[c * dl + k];
      for (std::size_t o = 0; o < od; ++o) aty[r * od + o] -= f * aty[c * od + o];
    }
  }
  std::vector<double> coef(dl * od, 0.0);
  for (std::size_t c = dl; c-- > 0;) {
    for (std::size_t o = 0; o < od; ++o) {
      double v = aty[c * od + o];
      for (std::size_t k = c + 1; k < dl; ++k) v -= ata[c * dl + k] * coef[k * od + o];
      coef[c * od + o] = v / ata[c * dl + c];
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < s.samples; ++i) {
    for (std::size_t o = 0; o < od; ++o) {
      double y = 0.0;
      for (std::size_t a = 0; a < dl; ++a) y += z[i][a] * coef[a * od + o];
      worst = std::max(worst, std::abs(y - s.targets[0].values[i * od + o]));
    }
  }
  CHECK(worst < 1e-9);

  const Split again = SyntheticBenchmark(bc).generate(SplitKind::train, 30);
  CHECK(again.targets[0].values == s.targets[0].values);
  CHECK(again.targets[1].labels == s.targets[1].labels);
}

TEST_CASE("training reduces the loss on a noise-free benchmark") {
  BenchmarkConfig bc = tiny_bench();
  bc.noise_std = 0.0;
  SyntheticBenchmark bench(bc);
  Rng rng(3);
  auto ids = bench.trained_task_ids();
  ModSquadModel model = ModSquadModel::init(tiny_model(bc), bench.out_dims(ids), rng);
  LossWeights w = LossWeights::init(ids.size(), 0.001);
  TrainConfig tc;
  tc.epochs = 5;
  tc.warmup_epochs = 0;
  tc.base_lr = 1e-3;
  tc.samples_per_task = 8;
  LossConfig lc;
  auto hist = train_model(model, w, bench.train_split(), bench.tasks(), tc, lc).history;
  REQUIRE(hist.size() == 60);
  auto task_sum = [](const StepStats& s) { return std::accumulate(s.task_loss.begin(), s.task_loss.end(), 0.0); };
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += task_sum(hist[i]);
    last += task_sum(hist[40 + i]);
  }
  CHECK(last < first);
  for (const auto& s : hist) CHECK(std::isfinite(s.total));
}

TEST_CASE("training with a fixed seed is bit-reproducible") {
  const auto a = run_steps(12, 5), b = run_steps(12, 5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].total == b[i].total);
    CHECK(a[i].task_loss == b[i].task_loss);
    CHECK(a[i].mi == b[i].mi);
  }
  const auto c = run_steps(12, 6);
  CHECK(c[3].total != a[3].total);
}

TEST_CASE("frozen routers with no MI term stay fixed") {
  SyntheticBenchmark bench(tiny_bench());
  Rng rng(4);
  auto ids = bench.trained_task_ids();
  ModSquadModel model = ModSquadModel::init(tiny_model(bench.config()), bench.out_dims(ids), rng);
  std::vector<std::vector<double>> before;
  for (auto* layer : model.moe_layers()) {
    for (auto& r : layer->routers) {
      r.w_g.set_requires_grad(false);
      r.w_noise.set_requires_grad(false);
      before.emplace_back(r.w_g.data().begin(), r.w_g.data().end());
    }
  }
  LossWeights w = LossWeights::init(ids.size(), 0.0);
  TrainConfig tc;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  tc.base_lr = 1e-3;
  LossConfig lc;
  lc.w_mi = 0.0;
  train_model(model, w, bench.train_split(), bench.tasks(), tc, lc);
  std::size_t i = 0;
  for (auto* layer : model.moe_layers()) {
    for (auto& r : layer->routers) CHECK(std::vector<double>(r.w_g.data().begin(), r.w_g.data().end()) == before[i++]);
  }
}

TEST_CASE("a non-finite parameter aborts the step and is named") {
  SyntheticBenchmark bench(tiny_bench());
  Rng rng(5);
  auto ids = bench.trained_task_ids();
  ModSquadModel model = ModSquadModel::init(tiny_model(bench.config()), bench.out_dims(ids), rng);
  model.heads[0].b.mutable_data()[0] = std::nan("");
  LossWeights w = LossWeights::init(ids.size(), 0.001);
  auto params = model.parameters();
  AdamW opt(params, 0.0);
  MixedBatch batch{bench.generate(SplitKind::train, 4), ids};
  try {
    train_step(model, w, batch, bench.tasks(), opt, 1e-3, rng, {});
    FAIL("expected NumericAbort");
  } catch (const NumericAbort& e) {
    CHECK(std::string(e.what()).find("heads.0.b") != std::string::npos);
  }
}

TEST_CASE("evaluation metrics") {
  SyntheticBenchmark bench(tiny_bench());
  Rng rng(6);
  auto ids = bench.trained_task_ids();
  ModSquadModel model = ModSquadModel::init(tiny_model(bench.config()), bench.out_dims(ids), rng);
  Split test = bench.test_split();

  SUBCASE("perfect predictor has zero error") {
    EvalResult r = evaluate(model, 0, bench.tasks()[0], test);
    test.targets[0].values = r.predictions;
    CHECK(evaluate(model, 0, bench.tasks()[0], test).metric == 0.0);
  }
  SUBCASE("constant predictor scores the majority share of class 0") {
    for (double& v : model.heads[1].w.mutable_data()) v = 0.0;
    EvalResult r = evaluate(model, 1, bench.tasks()[1], test);
    const auto zeros = std::count(test.targets[1].labels.begin(), test.targets[1].labels.end(), 0);
    CHECK(r.metric == static_cast<double>(zeros) / static_cast<double>(test.samples));
    CHECK(r.higher_is_better);
    CHECK(std::abs(r.loss - std::log(2.0)) < 1e-12);
  }
  SUBCASE("metric is invariant to sample order and batch size") {
    std::vector<std::size_t> perm(test.samples);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    const Split rev = test.select(perm);
    for (std::size_t t : {0u, 1u}) {
      const double m = evaluate(model, t, bench.tasks()[t], test).metric;
      CHECK(std::abs(evaluate(model, t, bench.tasks()[t], rev, nullptr, 7).metric - m) < 1e-12);
    }
  }
  SUBCASE("usage rows are distributions") {
    EvalResult r = evaluate(model, 2, bench.tasks()[2], test);
    for (std::size_t l = 0; l < r.usage.layers(); ++l) {
      auto row = r.usage.conditional(l, 0);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) < 1e-12);
    }
  }
  Split empty;
  CHECK_THROWS_AS(evaluate(model, 0, bench.tasks()[0], empty), ContractError);
}

TEST_CASE("relative improvement with sign correction") {
  const std::vector<double> same = {0.5, 1.0};
  DeltaT zero = delta_t(same, same, {true, false});
  CHECK(zero.per_task[0] == 0.0);
  CHECK(zero.mean == 0.0);
  DeltaT d = delta_t(std::vector<double>{0.55, 0.9}, std::vector<double>{0.5, 1.0}, {true, false});
  CHECK(std::abs(d.per_task[0] - 0.1) < 1e-12);
  CHECK(std::abs(d.per_task[1] - 0.1) < 1e-12);
  CHECK(std::abs(d.mean - 0.1) < 1e-12);
  CHECK_THROWS_AS(delta_t(std::vector<double>{1.0}, std::vector<double>{0.0}, {true}), DomainError);
}
