#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "modsquad/tensor.hpp"

namespace modsquad {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

// Tensor of the given shape with i.i.d. normal(0, stddev^2) entries.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad);

// Gating network of one task in one MoE layer.
struct RouterParams {
  Tensor w_g;      // [d_model x N]
  Tensor w_noise;  // [d_model x N]

  static RouterParams init(std::size_t d_model, std::size_t n_experts, Rng& rng);
  std::size_t n_experts() const { return w_g.cols(); }
};

// One learnable embedding row per task, added to expert inputs.
struct TaskEmbeddingTable {
  std::vector<Tensor> rows;  // each [1 x d_model]

  static TaskEmbeddingTable init(std::size_t n_tasks, std::size_t d_model, Rng& rng);
  std::size_t size() const { return rows.size(); }
};

// Expert weights of a single token.
struct GateVector {
  std::vector<double> weights;         // length N, zero outside `selected`
  std::vector<std::size_t> selected;   // ascending expert indices
};

struct RouteOptions {
  // Divide surviving gates by their sum (ablation; default follows TopK(Softmax)).
  bool renormalize = false;
  // Experts allowed to be selected; empty means all. Masked experts still
  // take part in the softmax.
  std::vector<bool> available;
  // Test hook: fixed gate vector applied to every token, bypassing the router.
  std::vector<double> forced;
};

struct RouteResult {
  Tensor logits;  // [tokens x N], noise included
  Tensor probs;   // softmax(logits), before TopK
  Tensor gates;   // TopK(probs): differentiable through surviving entries only
  std::vector<std::vector<std::size_t>> selected;  // per token, ascending

  std::size_t tokens() const { return selected.size(); }
  GateVector gate_vector(std::size_t token) const;
};

// Indices of the k largest scores among available entries; ties go to the
// lowest index. Result is ascending.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k,
                                      const std::vector<bool>& available = {});

// Noisy top-k routing of every row of x [tokens x d_model]. In train mode
// logits get eps * softplus(x W_noise) with eps ~ N(0,1) drawn per token per
// expert from `rng`; eval mode uses eps = 0 and ignores rng.
RouteResult route(const Tensor& x, const RouterParams& router, std::size_t k, Mode mode, Rng* rng,
                  const RouteOptions& options = {});

}  // namespace modsquad
