#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "worldgen/tensor.hpp"

namespace worldgen {

// A named trainable tensor. grad lives on the tensor's node.
struct Parameter {
  std::string name;
  Tensor tensor;
};

class ParamStore {
 public:
  Tensor create(const std::string& name, const Shape& shape);
  Tensor create_uniform(const std::string& name, const Shape& shape, Rng& rng, float bound);
  Tensor create_randn(const std::string& name, const Shape& shape, Rng& rng, float scale);
  Tensor create_full(const std::string& name, const Shape& shape, float v);

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  const Parameter* find(const std::string& name) const;
  int64_t total_size() const;

  void zero_grads();
  // FNV-1a over the raw f32 bytes of every parameter whose name passes the
  // filter (nullptr = all). Used by the freeze-contract tests.
  uint64_t value_hash(const std::function<bool(const std::string&)>& filter = nullptr) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

class Adam {
 public:
  Adam(ParamStore& store, float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

  // Restrict updates to parameters whose name passes the predicate.
  void set_trainable(const std::function<bool(const std::string&)>& pred);
  void set_lr(float lr) { lr_ = lr; }
  void step();
  void zero_grads() { store_.zero_grads(); }

 private:
  ParamStore& store_;
  float lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  struct State {
    std::vector<float> m, v;
  };
  std::vector<State> state_;
  std::vector<uint8_t> trainable_;
};

}  // namespace worldgen
