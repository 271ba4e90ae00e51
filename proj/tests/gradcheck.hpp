#pragma once

#include <functional>
#include <vector>

#include "worldgen/ops.hpp"
#include "worldgen/rng.hpp"

namespace worldgen::testing {

// Central finite differences against the recorded backward pass.
// The functional maps the given leaf tensors to an output tensor; the scalar
// objective is sum(R .* out) with a fixed random R so every output coordinate
// contributes. Returns max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-8).
inline double gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                        std::vector<Tensor> inputs, Rng& rng, double h = 1e-3) {
  Tensor out = f(inputs);
  Tensor r = Tensor::randn(out.shape(), rng);
  Tensor loss = sum(mul(out, r));
  for (auto& t : inputs) t.zero_grad();
  loss.backward();

  std::vector<std::vector<float>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto eval = [&]() -> double {
    NoGradScope ng;
    Tensor o = f(inputs);
    double acc = 0.0;
    auto ov = o.values();
    auto rv = r.values();
    for (size_t i = 0; i < ov.size(); ++i) acc += static_cast<double>(ov[i]) * rv[i];
    return acc;
  };

  double max_abs = 1e-8, max_err = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto vals = inputs[ti].values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      float orig = vals[i];
      vals[i] = orig + static_cast<float>(h);
      double lp = eval();
      vals[i] = orig - static_cast<float>(h);
      double lm = eval();
      vals[i] = orig;
      double num = (lp - lm) / (2.0 * h);
      double ana = analytic[ti][i];
      max_abs = std::max({max_abs, std::abs(ana), std::abs(num)});
      max_err = std::max(max_err, std::abs(ana - num));
    }
  }
  return max_err / max_abs;
}

}  // namespace worldgen::testing
