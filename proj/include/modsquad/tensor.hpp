#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace modsquad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One record of the define-by-run graph. Nodes are numbered in creation
// order; backward visits reachable nodes in strictly decreasing order.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode gradient support.
//
// A Tensor is a shared handle: copies alias the same storage. Parameters are
// leaves created with requires_grad=true; every op result that depends on one
// records how to push gradients back to its inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Size of the last axis; rows() is numel()/cols().
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful for leaves (parameters, optimizer).
  std::span<double> mutable_data();
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Fresh leaf holding a copy of the values, no history.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  // Populates grad on every requires_grad leaf reachable from this scalar.
  void backward() const;

  // Identity of the underlying storage.
  const void* id() const { return node_.get(); }

  // Op construction (used by ops.cpp).
  static Tensor make(Shape shape, std::vector<double> values,
                     std::vector<Tensor> inputs,
                     std::function<void(detail::Node&)> backward_fn);
  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

}  // namespace modsquad
