#include "modsquad/routing.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "modsquad/errors.hpp"
#include "modsquad/ops.hpp"

namespace modsquad {

namespace {
constexpr double kInitStd = 0.02;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

RouterParams RouterParams::init(std::size_t d_model, std::size_t n_experts, Rng& rng) {
  RouterParams r;
  r.w_g = normal_tensor({d_model, n_experts}, kInitStd, rng, true);
  r.w_noise = normal_tensor({d_model, n_experts}, kInitStd, rng, true);
  return r;
}

TaskEmbeddingTable TaskEmbeddingTable::init(std::size_t n_tasks, std::size_t d_model, Rng& rng) {
  TaskEmbeddingTable t;
  for (std::size_t i = 0; i < n_tasks; ++i) t.rows.push_back(normal_tensor({1, d_model}, kInitStd, rng, true));
  return t;
}

GateVector RouteResult::gate_vector(std::size_t token) const {
  const std::size_t n = gates.cols();
  GateVector g;
  g.weights.assign(gates.data().begin() + token * n, gates.data().begin() + (token + 1) * n);
  g.selected = selected.at(token);
  return g;
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k,
                                      const std::vector<bool>& available) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (available.empty() || available[i]) idx.push_back(i);
  }
  if (k < 1 || k > idx.size()) {
    throw ConfigError("top-k of " + std::to_string(k) + " over " + std::to_string(idx.size()) +
                      " selectable experts");
  }
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

RouteResult route(const Tensor& x, const RouterParams& router, std::size_t k, Mode mode, Rng* rng,
                  const RouteOptions& options) {
  const std::size_t n = router.n_experts();
  if (k < 1 || k > n) {
    throw ConfigError("top-k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
  }
  const std::size_t tokens = x.rows();
  RouteResult r;

  if (!options.forced.empty()) {
    if (options.forced.size() != n) throw DimensionError("forced gate has wrong width");
    std::vector<double> g(tokens * n);
    std::vector<std::size_t> sel;
    for (std::size_t j = 0; j < n; ++j) {
      if (options.forced[j] != 0.0) sel.push_back(j);
    }
    for (std::size_t t = 0; t < tokens; ++t) std::copy(options.forced.begin(), options.forced.end(), g.begin() + t * n);
    r.gates = Tensor::from({tokens, n}, g);
    r.probs = r.gates;
    r.logits = r.gates;
    r.selected.assign(tokens, sel);
    return r;
  }

  Tensor logits = ops::matmul(x, router.w_g);
  if (mode == Mode::train) {
    if (!rng) throw ContractError("train-mode routing needs a random generator");
    Tensor eps = normal_tensor({tokens, n}, 1.0, *rng, false);
    logits = ops::add(logits, ops::mul(eps, ops::softplus(ops::matmul(x, router.w_noise))));
  }
  r.logits = logits;
  r.probs = ops::softmax(logits);

  std::vector<double> mask(tokens * n, 0.0);
  r.selected.resize(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    r.selected[t] = select_top_k(logits.data().subspan(t * n, n), k, options.available);
    for (auto j : r.selected[t]) mask[t * n + j] = 1.0;
  }
  Tensor gates = ops::mul(r.probs, Tensor::from({tokens, n}, std::move(mask)));
  if (options.renormalize) gates = ops::mul_col(gates, ops::reciprocal(ops::sum_cols(gates)));
  r.gates = gates;
  return r;
}

}  // namespace modsquad
