#include "worldgen/tensor.hpp"

#include <cmath>
#include <sstream>

namespace worldgen {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

void check_finite(const char* op, const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, float v, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (auto& x : t.node().value) x = v;
  check_finite("full", t.node().value);
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("from_data: " + shape_str(shape) + " does not match data length " + std::to_string(data.size()));
  check_finite("from_data", data);
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, float scale, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (auto& x : t.node().value) x = scale * static_cast<float>(rng.normal());
  return t;
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, float bound, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (auto& x : t.node().value) x = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

std::span<float> Tensor::values_mut() {
  TensorNode& n = node();
  if (n.backprop) throw std::runtime_error("mutating a non-leaf tensor");
  return n.value;
}

std::span<const float> Tensor::grad() const {
  node().ensure_grad();
  return node().grad;
}

float Tensor::scalar() const {
  if (numel() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

void Tensor::zero_grad() {
  auto& g = node().grad;
  g.assign(node().value.size(), 0.0f);
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(shape()));
  TensorNode* root = n_.get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS to get a topological order.
  std::vector<TensorNode*> order;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  root->mark = 1;
  stack.push_back({root, 0});
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->requires_grad && p->mark == 0) {
        p->mark = 1;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) {
    n->mark = 0;
    n->ensure_grad();
  }
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

Tensor make_op(const char* op, Shape shape, std::vector<float> value,
               std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop) {
  if (static_cast<int64_t>(value.size()) != shape_numel(shape))
    throw ShapeError(std::string("op '") + op + "': value size mismatch for " + shape_str(shape));
  check_finite(op, value);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const Tensor& p : parents) needs = needs || p.requires_grad();
  if (needs && grad_enabled()) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

}  // namespace worldgen
