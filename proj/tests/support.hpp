#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <random>
#include <vector>

#include "modsquad/ops.hpp"
#include "modsquad/routing.hpp"
#include "modsquad/tensor.hpp"

namespace modsquad::testing {

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Contracts a tensor with fixed random weights so every output entry matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = uniform_tensor(y.shape(), -1.0, 1.0, rng, false);
  return ops::sum(ops::mul(y, w));
}

// Worst per-leaf relative error ||g_analytic - g_numeric|| / max(norms, floor)
// between backward() and central differences of f.
inline double fd_rel_error(const std::vector<Tensor>& leaves, const std::function<Tensor()>& f,
                           double step = 1e-5, double floor = 1e-12) {
  for (auto t : leaves) t.zero_grad();
  f().backward();
  double worst = 0.0;
  for (auto leaf : leaves) {
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto data = leaf.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + step;
      const double up = f().item();
      data[j] = saved - step;
      const double down = f().item();
      data[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      diff2 += (analytic[j] - numeric) * (analytic[j] - numeric);
      a2 += analytic[j] * analytic[j];
      n2 += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor}));
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace modsquad::testing
