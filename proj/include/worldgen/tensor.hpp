#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "worldgen/rng.hpp"

namespace worldgen {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated lazily, same extent as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // pushes this->grad into parents
  const char* op = "leaf";
  int mark = 0;  // scratch for topological sort

  void ensure_grad();
};

// Gradient recording is on by default; sampling loops disable it to avoid
// building throwaway graphs.
bool grad_enabled();

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;

 private:
  bool prev_;
};

// Dense row-major f32 tensor with an optional autograd tape. Value semantics
// on the handle; the node (storage + grad) is shared.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<float> data, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, float scale = 1.0f, bool requires_grad = false);
  // Uniform in (-bound, bound); the default layer init.
  static Tensor rand_uniform(const Shape& shape, Rng& rng, float bound, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int dim(int i) const { return node().shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node().value.size()); }
  bool requires_grad() const { return node().requires_grad; }

  std::span<const float> values() const { return node().value; }
  // Direct mutation is only legal on leaves (parameter loading, test setup).
  std::span<float> values_mut();
  std::span<const float> grad() const;

  float scalar() const;
  float at(int64_t i) const { return node().value[static_cast<size_t>(i)]; }

  void zero_grad();
  // Reverse-mode sweep from a scalar; accumulates into .grad of every
  // reachable node that requires grad.
  void backward() const;

  std::shared_ptr<TensorNode> node_ptr() const { return n_; }
  TensorNode& node() const {
    if (!n_) throw std::runtime_error("use of undefined tensor");
    return *n_;
  }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Builds an op node: checks finiteness of `value`, wires parents, and attaches
// the backward closure only when grad recording is live.
Tensor make_op(const char* op, Shape shape, std::vector<float> value,
               std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop);

void check_finite(const char* op, const std::vector<float>& v);

}  // namespace worldgen
