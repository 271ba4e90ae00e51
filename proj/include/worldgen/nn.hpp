#pragma once

#include <string>

#include "worldgen/ops.hpp"
#include "worldgen/params.hpp"

namespace worldgen {

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
         bool bias = true, bool zero_init = false);
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 1;
  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng,
              int stride = 1, int pad = 1, bool zero_init = false);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Conv3dLayer {
  Tensor w, b;
  int sd = 1, sh = 1, sw = 1, pd = 1, ph = 1, pw = 1;
  Conv3dLayer() = default;
  Conv3dLayer(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng,
              int sd = 1, int sh = 1, int sw = 1, int pd = 1, int ph = 1, int pw = 1);
  Tensor forward(const Tensor& x) const { return conv3d(x, w, b, sd, sh, sw, pd, ph, pw); }
};

struct GroupNormLayer {
  Tensor gamma, beta;
  int groups = 8;
  float eps = 1e-5f;
  GroupNormLayer() = default;
  GroupNormLayer(ParamStore& ps, const std::string& name, int channels, int groups);
  Tensor forward(const Tensor& x) const { return group_norm(x, groups, eps, gamma, beta); }
};

// Multi-head attention over token tensors [B, L, C]; no projection biases.
struct MultiHeadAttention {
  Tensor wq, wk, wv, wo;
  int heads = 4;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int channels, int heads, Rng& rng,
                     bool zero_out_proj = false);
  Tensor forward(const Tensor& q_src, const Tensor& kv_src) const;
};

// Spec-facing free function: attention(q_src, kv_src, heads, params).
Tensor attention(const Tensor& q_src, const Tensor& kv_src, int heads, const MultiHeadAttention& params);

struct FeedForward {
  Linear fc1, fc2;
  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& name, int channels, int mult, Rng& rng,
              bool zero_out = false);
  Tensor forward(const Tensor& tokens) const;  // [B,L,C]
};

// [N,C,H,W] <-> [N, H*W, C]
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& t, int h, int w);
// GroupNorm over channels applied per token.
Tensor norm_tokens(const Tensor& tokens, const GroupNormLayer& gn);

// Sinusoidal embedding rows for a batch of diffusion steps, [N, 2*n_freqs].
Tensor timestep_embedding(const std::vector<float>& t01, int n_freqs);

struct TimeMlp {
  Linear fc1, fc2;
  TimeMlp() = default;
  TimeMlp(ParamStore& ps, const std::string& name, int in, int dim, Rng& rng);
  Tensor forward(const Tensor& emb) const;  // [N,in] -> [N,dim]
};

// GN -> SiLU -> conv -> (+time) -> GN -> SiLU -> conv, residual skip.
struct ResBlock2d {
  GroupNormLayer gn1, gn2;
  Conv2dLayer conv1, conv2, skip;
  Linear temb_proj;
  bool has_skip = false;
  bool has_temb = false;
  ResBlock2d() = default;
  ResBlock2d(ParamStore& ps, const std::string& name, int in, int out, int temb_dim, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& temb) const;  // temb [N,temb_dim] or undefined
};

}  // namespace worldgen
