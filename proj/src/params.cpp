#include "worldgen/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace worldgen {

Tensor ParamStore::create(const std::string& name, const Shape& shape) {
  if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
  index_[name] = params_.size();
  params_.push_back({name, t});
  return t;
}

Tensor ParamStore::create_uniform(const std::string& name, const Shape& shape, Rng& rng, float bound) {
  Tensor t = create(name, shape);
  for (auto& v : t.node().value) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

Tensor ParamStore::create_randn(const std::string& name, const Shape& shape, Rng& rng, float scale) {
  Tensor t = create(name, shape);
  for (auto& v : t.node().value) v = scale * static_cast<float>(rng.normal());
  return t;
}

Tensor ParamStore::create_full(const std::string& name, const Shape& shape, float v) {
  Tensor t = create(name, shape);
  for (auto& x : t.node().value) x = v;
  return t;
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

uint64_t ParamStore::value_hash(const std::function<bool(const std::string&)>& filter) const {
  uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* data, size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    if (filter && !filter(p.name)) continue;
    feed(p.name.data(), p.name.size());
    feed(p.tensor.values().data(), p.tensor.values().size() * sizeof(float));
  }
  return h;
}

Adam::Adam(ParamStore& store, float lr, float beta1, float beta2, float eps)
    : store_(store), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  state_.resize(store.params().size());
  trainable_.assign(store.params().size(), 1);
  for (size_t i = 0; i < state_.size(); ++i) {
    size_t n = store.params()[i].tensor.node().value.size();
    state_[i].m.assign(n, 0.0f);
    state_[i].v.assign(n, 0.0f);
  }
}

void Adam::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (size_t i = 0; i < trainable_.size(); ++i)
    trainable_[i] = pred(store_.params()[i].name) ? 1 : 0;
}

void Adam::step() {
  t_ += 1;
  double bc1 = 1.0 - std::pow(static_cast<double>(b1_), static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(static_cast<double>(b2_), static_cast<double>(t_));
  for (size_t i = 0; i < state_.size(); ++i) {
    if (!trainable_[i]) continue;
    auto& p = store_.params()[i];
    TensorNode& n = p.tensor.node();
    n.ensure_grad();
    auto& m = state_[i].m;
    auto& v = state_[i].v;
    for (size_t j = 0; j < n.value.size(); ++j) {
      float g = n.grad[j];
      m[j] = b1_ * m[j] + (1.0f - b1_) * g;
      v[j] = b2_ * v[j] + (1.0f - b2_) * g * g;
      float mhat = static_cast<float>(m[j] / bc1);
      float vhat = static_cast<float>(v[j] / bc2);
      n.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace worldgen
