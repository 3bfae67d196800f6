#pragma once

// Reverse-mode differentiable tensor. Every op that touches a tensor with
// requires_grad records a node; backward() replays the reachable nodes in
// descending creation order, which is a reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace treetf {

using Shape = std::vector<std::int64_t>;

/// Shapes that cannot be combined by an op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an op (sqrt/log of a negative).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the graph: backward twice, backward on a non-scalar, etc.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::int64_t numel_of(const Shape& s);

class Tensor;

namespace detail {

struct TensorImpl;

struct Node {
  std::uint64_t seq = 0;
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient after backward(); zeros if this tensor received none.
  std::span<const double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Backpropagate from a single-element tensor.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;

  bool is_leaf() const { return impl_->node == nullptr; }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_tensor(Shape shape, std::vector<double> data);
};

Tensor make_tensor(Shape shape, std::vector<double> data);

/// Scoped switch that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

namespace detail {

/// Registers `out` as produced by `inputs` when any input requires grad.
void record(Tensor& out, std::vector<Tensor> inputs, const char* name,
            std::function<void(const TensorImpl& out)> backward);

/// Gradient accumulator for an input, or nullptr when it does not need one.
inline double* grad_of(const std::shared_ptr<TensorImpl>& t) {
  return t->requires_grad ? t->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace treetf
