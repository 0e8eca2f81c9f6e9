#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "modsquad/errors.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

namespace {

constexpr double kProjectionGain = 1.5;
constexpr std::size_t kScaleProbe = 4096;

Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return Rng(seq);
}

}  // namespace

void BenchmarkConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("data." + what);
  };
  need(n_groups >= 1, "n_groups must be >= 1");
  need(tasks_per_group >= 1, "tasks_per_group must be >= 1");
  need(d_in >= 1 && seq_len >= 1 && d_latent >= 1, "dimensions must be positive");
  need(regression_dim >= 1, "regression_dim must be positive");
  need(train_samples >= 1 && test_samples >= 1, "sample counts must be positive");
  need(noise_std >= 0.0, "noise_std must be >= 0");
}

Split Split::select(std::span<const std::size_t> indices) const {
  Split out;
  out.samples = indices.size();
  out.seq_len = seq_len;
  out.d_in = d_in;
  const std::size_t sz = sample_size();
  out.inputs.reserve(indices.size() * sz);
  for (auto i : indices) {
    out.inputs.insert(out.inputs.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * sz),
                      inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * sz));
  }
  out.targets.resize(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& src = targets[t];
    auto& dst = out.targets[t];
    if (!src.labels.empty()) {
      for (auto i : indices) dst.labels.push_back(src.labels[i]);
    }
    if (!src.values.empty()) {
      const std::size_t od = src.values.size() / samples;
      for (auto i : indices) {
        dst.values.insert(dst.values.end(), src.values.begin() + static_cast<std::ptrdiff_t>(i * od),
                          src.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * od));
      }
    }
  }
  return out;
}

SyntheticBenchmark::SyntheticBenchmark(BenchmarkConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = stream(config_.seed, 0xB0, 0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double pscale = kProjectionGain / std::sqrt(static_cast<double>(config_.d_in));
  for (std::size_t g = 0; g < config_.n_groups; ++g) {
    std::vector<double> p(config_.d_in * config_.d_latent);
    for (auto& v : p) v = normal(rng) * pscale;
    projections_.push_back(std::move(p));
  }

  for (std::size_t g = 0; g < config_.n_groups; ++g) {
    for (std::size_t i = 0; i < config_.tasks_per_group; ++i) {
      TaskSpec spec;
      spec.group = g;
      spec.kind = i % 2 == 0 ? TaskKind::regression : TaskKind::classification;
      spec.out_dim = spec.kind == TaskKind::regression ? config_.regression_dim : 2;
      spec.name = "g" + std::to_string(g) + (spec.kind == TaskKind::regression ? "_reg" : "_cls") +
                  std::to_string(i / 2);
      tasks_.push_back(spec);
    }
  }
  for (std::size_t h = 0; h < config_.heldout_tasks; ++h) {
    TaskSpec spec;
    spec.group = h % config_.n_groups;
    spec.kind = TaskKind::regression;
    spec.out_dim = config_.regression_dim;
    spec.heldout = true;
    spec.name = "g" + std::to_string(spec.group) + "_new" + std::to_string(h);
    tasks_.push_back(spec);
  }

  for (const auto& spec : tasks_) {
    const std::size_t cols = spec.kind == TaskKind::regression ? spec.out_dim : 1;
    std::vector<double> r(config_.d_latent * cols);
    for (auto& v : r) v = normal(rng);
    readouts_.push_back(std::move(r));
  }

  // Unit target variance for regression tasks, measured on a fixed probe.
  target_scale_.assign(tasks_.size(), 1.0);
  Rng probe = stream(config_.seed, 0xB1, 0);
  std::vector<double> sample(config_.seq_len * config_.d_in);
  std::vector<double> sum(tasks_.size(), 0.0), sum_sq(tasks_.size(), 0.0);
  std::vector<std::size_t> n(tasks_.size(), 0);
  for (std::size_t s = 0; s < kScaleProbe; ++s) {
    for (auto& v : sample) v = normal(probe);
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      if (tasks_[t].kind != TaskKind::regression) continue;
      auto z = latent(tasks_[t].group, sample);
      const std::size_t od = tasks_[t].out_dim;
      for (std::size_t o = 0; o < od; ++o) {
        double y = 0.0;
        for (std::size_t k = 0; k < config_.d_latent; ++k) y += z[k] * readouts_[t][k * od + o];
        sum[t] += y;
        sum_sq[t] += y * y;
        ++n[t];
      }
    }
  }
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    if (n[t] == 0) continue;
    const double mu = sum[t] / static_cast<double>(n[t]);
    const double var = sum_sq[t] / static_cast<double>(n[t]) - mu * mu;
    target_scale_[t] = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  }
}

std::vector<std::size_t> SyntheticBenchmark::trained_task_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    if (!tasks_[t].heldout) ids.push_back(t);
  }
  return ids;
}

std::vector<std::size_t> SyntheticBenchmark::heldout_task_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    if (tasks_[t].heldout) ids.push_back(t);
  }
  return ids;
}

std::vector<std::size_t> SyntheticBenchmark::out_dims(std::span<const std::size_t> task_ids) const {
  std::vector<std::size_t> dims;
  for (auto t : task_ids) dims.push_back(tasks_.at(t).out_dim);
  return dims;
}

std::vector<double> SyntheticBenchmark::latent(std::size_t group, std::span<const double> sample) const {
  const auto& p = projections_.at(group);
  const std::size_t din = config_.d_in, dl = config_.d_latent;
  std::vector<double> z(dl, 0.0);
  for (std::size_t t = 0; t < config_.seq_len; ++t) {
    for (std::size_t k = 0; k < dl; ++k) {
      double a = 0.0;
      for (std::size_t i = 0; i < din; ++i) a += sample[t * din + i] * p[i * dl + k];
      z[k] += std::tanh(a);
    }
  }
  for (auto& v : z) v /= static_cast<double>(config_.seq_len);
  return z;
}

double SyntheticBenchmark::feature_overlap(std::size_t task_a, std::size_t task_b) const {
  return tasks_.at(task_a).group == tasks_.at(task_b).group ? 1.0 : 0.0;
}

void SyntheticBenchmark::targets_for(const std::vector<double>& z, std::size_t task, TaskTargets& out,
                                     Rng& noise) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& spec = tasks_[task];
  const auto& r = readouts_[task];
  if (spec.kind == TaskKind::regression) {
    for (std::size_t o = 0; o < spec.out_dim; ++o) {
      double y = 0.0;
      for (std::size_t k = 0; k < config_.d_latent; ++k) y += z[k] * r[k * spec.out_dim + o];
      y *= target_scale_[task];
      if (config_.noise_std > 0.0) y += config_.noise_std * normal(noise);
      out.values.push_back(y);
    }
  } else {
    double s = 0.0;
    for (std::size_t k = 0; k < config_.d_latent; ++k) s += z[k] * r[k];
    if (config_.noise_std > 0.0) s += config_.noise_std * normal(noise);
    out.labels.push_back(s > 0.0 ? 1 : 0);
  }
}

Split SyntheticBenchmark::generate(SplitKind kind, std::size_t count, std::uint64_t seed_offset) const {
  if (count == 0) throw ContractError("generate: count must be positive");
  Rng rng = stream(config_.seed, 0xD0 + static_cast<std::uint64_t>(kind), seed_offset);
  Rng noise = stream(config_.seed, 0xE0 + static_cast<std::uint64_t>(kind), seed_offset);
  std::normal_distribution<double> normal(0.0, 1.0);
  Split s;
  s.samples = count;
  s.seq_len = config_.seq_len;
  s.d_in = config_.d_in;
  s.inputs.resize(count * s.sample_size());
  for (auto& v : s.inputs) v = normal(rng);
  s.targets.resize(tasks_.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::span<const double> sample(s.inputs.data() + i * s.sample_size(), s.sample_size());
    std::vector<std::vector<double>> z(config_.n_groups);
    for (std::size_t g = 0; g < config_.n_groups; ++g) z[g] = latent(g, sample);
    for (std::size_t t = 0; t < tasks_.size(); ++t) targets_for(z[tasks_[t].group], t, s.targets[t], noise);
  }
  return s;
}

}  // namespace modsquad
