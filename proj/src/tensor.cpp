#include "treetf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace treetf {

namespace {

std::atomic<std::uint64_t> g_node_seq{0};
thread_local int t_no_grad_depth = 0;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor make_tensor(Shape shape, std::vector<double> data) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel_of(shape);
  Tensor t = make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  Tensor t = make_tensor(std::move(shape), std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const { return make_tensor(impl_->shape, impl_->data); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw GraphError("backward() requires a single-element output, got " + shape_str(shape()));
  }
  if (!impl_->requires_grad) throw GraphError("backward() on a tensor that does not require grad");

  // Collect every tensor reachable through recorded nodes.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!t->node || !seen.insert(t).second) continue;
    if (t->node->consumed) {
      throw GraphError("backward() called twice on the same graph; run a new forward first");
    }
    order.push_back(t);
    for (auto& in : t->node->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->node->seq > b->node->seq; });

  impl_->grad_buffer()[0] += 1.0;
  for (auto* t : order) {
    auto& node = *t->node;
    if (!t->grad.empty()) node.backward(*t);
    node.consumed = true;
    node.backward = nullptr;
    if (t != impl_.get()) t->grad.clear();
  }
}

NoGradGuard::NoGradGuard() { ++t_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --t_no_grad_depth; }
bool grad_enabled() { return t_no_grad_depth == 0; }

namespace detail {

void record(Tensor& out, std::vector<Tensor> inputs, const char* name,
            std::function<void(const TensorImpl& out)> backward) {
  if (!grad_enabled()) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return;
  auto node = std::make_shared<Node>();
  node->seq = g_node_seq.fetch_add(1);
  node->name = name;
  for (auto& t : inputs) {
    if (t.defined()) node->inputs.push_back(t.impl_ptr());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
}

}  // namespace detail

}  // namespace treetf
