#include "modsquad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "modsquad/errors.hpp"

namespace modsquad::ops {

namespace {

using detail::Node;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Gradient buffer of input i, or nullptr when that input needs none.
double* grad_of(Node& self, std::size_t i) {
  Node& p = parent(self, i);
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

void check_finite([[maybe_unused]] const std::vector<double>& v,
                  [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError(std::string("non-finite output from ") + op);
  }
#endif
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

// C[m x n] += A[m x k] . B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += G[m x n] . B[k x n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T . G[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  check_finite(out, name);
  return Tensor::make(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    double* gx = grad_of(self, 0);
    const auto& xv = parent(self, 0).data;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = parent(self, 0).data.data();
    const double* bv = parent(self, 1).data.data();
    if (double* ga = grad_of(self, 0)) gemm_nt(self.grad.data(), bv, ga, m, n, k);
    if (double* gb = grad_of(self, 1)) gemm_tn(av, self.grad.data(), gb, m, k, n);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = parent(self, 0).data;
    const auto& bv = parent(self, 1).data;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor::make(a.shape(), std::move(out), {a}, [factor](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + value;
  return Tensor::make(a.shape(), std::move(out), {a}, [](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError("mul_scalar: expected one-element factor, got " + shape_str(s.shape()));
  }
  const double sv = s.item();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  return Tensor::make(a.shape(), std::move(out), {a, s}, [](Node& self) {
    const auto& av = parent(self, 0).data;
    const double sv = parent(self, 1).data[0];
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
    }
    if (double* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * av[i];
      g[0] += acc;
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t n = a.cols();
  if (row.numel() != n) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not fit " +
                         shape_str(a.shape()));
  }
  const std::size_t m = a.rows();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + row.data()[j];
  }
  return Tensor::make(a.shape(), std::move(out), {a, row}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor add_tiled(const Tensor& a, const Tensor& p) {
  const std::size_t n = a.cols();
  if (p.cols() != n) {
    throw DimensionError("add_tiled: " + shape_str(p.shape()) + " does not tile " +
                         shape_str(a.shape()));
  }
  const std::size_t m = a.rows(), period = p.rows();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t r = i % period;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + p.data()[r * n + j];
  }
  return Tensor::make(a.shape(), std::move(out), {a, p}, [m, n, period](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = i % period;
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& c) {
  const std::size_t m = a.rows(), n = a.cols();
  if (c.numel() != m) {
    throw DimensionError("mul_col: " + shape_str(c.shape()) + " does not scale rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] * c.data()[i];
  }
  return Tensor::make(a.shape(), std::move(out), {a, c}, [m, n](Node& self) {
    const auto& av = parent(self, 0).data;
    const auto& cv = parent(self, 1).data;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * cv[i];
      }
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * av[i * n + j];
        g[i] += s;
      }
    }
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double* o = out.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  check_finite(out, "softmax");
  return Tensor::make(x.shape(), std::move(out), {x}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  check_finite(out, "log_softmax");
  return Tensor::make(x.shape(), std::move(out), {x}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += gy[j] - std::exp(y[j]) * s;
    }
  });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        // logistic sigmoid, branch-stable
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, "gelu", [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor reciprocal(const Tensor& x) {
  for (double v : x.data()) {
    if (v == 0.0) throw DomainError("reciprocal of zero");
  }
  return unary(
      x, "reciprocal", [](double v) { return 1.0 / v; },
      [](double v, double) { return -1.0 / (v * v); });
}

Tensor xlogx(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw DomainError("xlogx of negative value " + std::to_string(v));
  }
  return unary(
      x, "xlogx", [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; },
      [](double v, double) { return v > 0.0 ? std::log(v) + 1.0 : 0.0; });
}

namespace {

// Shared layer-norm core; gain/bias may be undefined.
Tensor layer_norm_impl(const Tensor& x, const Tensor* gain, const Tensor* bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain && (gain->numel() != n || bias->numel() != n)) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  }
  std::vector<double> xhat(x.numel()), inv_std(m), out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[i];
      xhat[i * n + j] = h;
      out[i * n + j] = gain ? h * gain->data()[j] + bias->data()[j] : h;
    }
  }
  std::vector<Tensor> inputs{x};
  if (gain) {
    inputs.push_back(*gain);
    inputs.push_back(*bias);
  }
  const bool affine = gain != nullptr;
  return Tensor::make(
      x.shape(), std::move(out), std::move(inputs),
      [m, n, affine, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const double* gv = affine ? parent(self, 1).data.data() : nullptr;
        if (affine) {
          double* ggain = grad_of(self, 1);
          double* gbias = grad_of(self, 2);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              if (ggain) ggain[j] += self.grad[i * n + j] * xhat[i * n + j];
              if (gbias) gbias[j] += self.grad[i * n + j];
            }
          }
        }
        double* gx = grad_of(self, 0);
        if (!gx) return;
        std::vector<double> dh(n);
        for (std::size_t i = 0; i < m; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = self.grad[i * n + j] * (gv ? gv[j] : 1.0);
            s1 += dh[j];
            s2 += dh[j] * xhat[i * n + j];
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += inv_std[i] * (dh[j] - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
          }
        }
      });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  return layer_norm_impl(x, &gain, &bias);
}

Tensor layer_norm(const Tensor& x) { return layer_norm_impl(x, nullptr, nullptr); }

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make({1}, {s}, {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    const std::size_t n = parent(self, 0).data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_rows(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  }
  return Tensor::make({1, n}, std::move(out), {x}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
    }
  });
}

Tensor sum_cols(const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i] += x.data()[i * n + j];
  }
  return Tensor::make({m, 1}, std::move(out), {x}, [m, n](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
    }
  });
}

Tensor mean_pool(const Tensor& x, std::size_t group) {
  const std::size_t m = x.rows(), n = x.cols();
  if (group == 0 || m % group != 0) {
    throw DimensionError("mean_pool: " + std::to_string(m) + " rows not divisible by " +
                         std::to_string(group));
  }
  const std::size_t g = m / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(g * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[(i / group) * n + j] += x.data()[i * n + j] * inv;
  }
  return Tensor::make({g, n}, std::move(out), {x}, [m, n, group, inv](Node& self) {
    double* gx = grad_of(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[(i / group) * n + j] * inv;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make(std::move(shape), std::move(out), {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = xs.front().cols();
  std::size_t m = 0;
  for (const auto& x : xs) {
    if (x.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(xs.front().shape()) +
                           " vs " + shape_str(x.shape()));
    }
    m += x.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
  return Tensor::make({m, n}, std::move(out), xs, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t len = parent(self, p).data.size();
      if (double* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols();
  if (begin >= end || end > x.rows()) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return Tensor::make({end - begin, n}, std::move(out), {x}, [begin, n](Node& self) {
    double* g = grad_of(self, 0) + begin * n;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols(), m = x.rows();
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(x.data().begin() + rows[i] * n, n, out.begin() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t count = idx.size();
  return Tensor::make({count, n}, std::move(out), {x}, [n, idx = std::move(idx)](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
    }
  });
}

Tensor gather_column(const Tensor& x, std::span<const std::size_t> rows, std::size_t col) {
  const std::size_t n = x.cols(), m = x.rows();
  if (rows.empty()) throw DimensionError("gather_column: empty index list");
  if (col >= n) throw DimensionError("gather_column: column out of range");
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_column: row index out of range");
    out[i] = x.data()[rows[i] * n + col];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t count = idx.size();
  return Tensor::make({count, 1}, std::move(out), {x},
                      [n, col, idx = std::move(idx)](Node& self) {
                        double* g = grad_of(self, 0);
                        for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i] * n + col] += self.grad[i];
                      });
}

Tensor scatter_add_rows(std::size_t total_rows, std::size_t n, const std::vector<RowScatter>& parts) {
  std::vector<double> out(total_rows * n, 0.0);
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> index;
  for (const auto& part : parts) {
    if (part.values.cols() != n || part.values.rows() != part.rows.size()) {
      throw DimensionError("scatter_add_rows: part " + shape_str(part.values.shape()) +
                           " does not match " + std::to_string(part.rows.size()) + " rows of width " +
                           std::to_string(n));
    }
    for (std::size_t i = 0; i < part.rows.size(); ++i) {
      if (part.rows[i] >= total_rows) throw DimensionError("scatter_add_rows: row out of range");
      for (std::size_t j = 0; j < n; ++j) out[part.rows[i] * n + j] += part.values.data()[i * n + j];
    }
    inputs.push_back(part.values);
    index.push_back(part.rows);
  }
  return Tensor::make({total_rows, n}, std::move(out), std::move(inputs),
                      [n, index = std::move(index)](Node& self) {
                        for (std::size_t p = 0; p < index.size(); ++p) {
                          double* g = grad_of(self, p);
                          if (!g) continue;
                          const auto& rows = index[p];
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[rows[i] * n + j];
                          }
                        }
                      });
}

Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::span<const KeySpan> spans) {
  require_matrix(q, "segment_attention");
  require_matrix(k, "segment_attention");
  require_matrix(v, "segment_attention");
  const std::size_t nq = q.rows(), d = q.cols(), dv = v.cols();
  if (k.cols() != d || v.rows() != k.rows() || spans.size() != nq) {
    throw DimensionError("segment_attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const double scl = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<KeySpan> sp(spans.begin(), spans.end());
  std::vector<std::size_t> offsets(nq + 1, 0);
  for (std::size_t i = 0; i < nq; ++i) {
    if (sp[i].length == 0 || sp[i].begin + sp[i].length > k.rows()) {
      throw DimensionError("segment_attention: key span out of range");
    }
    offsets[i + 1] = offsets[i] + sp[i].length;
  }
  std::vector<double> probs(offsets[nq]);
  std::vector<double> out(nq * dv, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  for (std::size_t i = 0; i < nq; ++i) {
    double* p = probs.data() + offsets[i];
    const std::size_t len = sp[i].length;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < len; ++t) {
      const double* kr = kd + (sp[i].begin + t) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qd[i * d + c] * kr[c];
      p[t] = s * scl;
      mx = std::max(mx, p[t]);
    }
    double z = 0.0;
    for (std::size_t t = 0; t < len; ++t) z += (p[t] = std::exp(p[t] - mx));
    for (std::size_t t = 0; t < len; ++t) {
      p[t] /= z;
      const double* vr = vd + (sp[i].begin + t) * dv;
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += p[t] * vr[c];
    }
  }
  return Tensor::make(
      {nq, dv}, std::move(out), {q, k, v},
      [nq, d, dv, scl, sp = std::move(sp), offsets = std::move(offsets),
       probs = std::move(probs)](Node& self) {
        const double* qd = parent(self, 0).data.data();
        const double* kd = parent(self, 1).data.data();
        const double* vd = parent(self, 2).data.data();
        double* gq = grad_of(self, 0);
        double* gk = grad_of(self, 1);
        double* gv = grad_of(self, 2);
        std::vector<double> dp;
        for (std::size_t i = 0; i < nq; ++i) {
          const double* p = probs.data() + offsets[i];
          const double* go = self.grad.data() + i * dv;
          const std::size_t len = sp[i].length;
          dp.assign(len, 0.0);
          double dot = 0.0;
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t row = sp[i].begin + t;
            double s = 0.0;
            for (std::size_t c = 0; c < dv; ++c) s += go[c] * vd[row * dv + c];
            dp[t] = s;
            dot += s * p[t];
            if (gv) {
              for (std::size_t c = 0; c < dv; ++c) gv[row * dv + c] += p[t] * go[c];
            }
          }
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t row = sp[i].begin + t;
            const double ds = p[t] * (dp[t] - dot) * scl;
            if (gq) {
              for (std::size_t c = 0; c < d; ++c) gq[i * d + c] += ds * kd[row * d + c];
            }
            if (gk) {
              for (std::size_t c = 0; c < d; ++c) gk[row * d + c] += ds * qd[i * d + c];
            }
          }
        }
      });
}

Tensor mse_loss(const Tensor& pred, std::span<const double> target) {
  if (target.size() != pred.numel()) {
    throw DimensionError("mse_loss: " + std::to_string(target.size()) + " targets for prediction " +
                         shape_str(pred.shape()));
  }
  const std::size_t n = pred.numel();
  double s = 0.0;
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = pred.data()[i] - target[i];
    s += diff[i] * diff[i];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return Tensor::make({1}, {s * inv}, {pred}, [inv, diff = std::move(diff)](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < diff.size(); ++i) g[i] += self.grad[0] * 2.0 * diff[i] * inv;
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  Tensor lp = log_softmax(logits);
  std::vector<double> picked(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw DimensionError("cross_entropy: label out of range");
    }
    picked[i * n + static_cast<std::size_t>(labels[i])] = -1.0 / static_cast<double>(m);
  }
  return sum(mul(lp, Tensor::from(logits.shape(), std::move(picked))));
}

}  // namespace modsquad::ops
