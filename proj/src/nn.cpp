#include "worldgen/nn.hpp"

#include <cmath>

namespace worldgen {

namespace {
float fan_in_bound(int fan_in) { return std::sqrt(1.0f / static_cast<float>(fan_in)); }
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
               bool bias, bool zero_init) {
  if (zero_init)
    w = ps.create(name + ".w", {out, in});
  else
    w = ps.create_uniform(name + ".w", {out, in}, rng, fan_in_bound(in));
  if (bias) b = ps.create(name + ".b", {out});
}

Conv2dLayer::Conv2dLayer(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng,
                         int stride_, int pad_, bool zero_init)
    : stride(stride_), pad(pad_) {
  if (zero_init)
    w = ps.create(name + ".w", {out, in, k, k});
  else
    w = ps.create_uniform(name + ".w", {out, in, k, k}, rng, fan_in_bound(in * k * k));
  b = ps.create(name + ".b", {out});
}

Conv3dLayer::Conv3dLayer(ParamStore& ps, const std::string& name, int in, int out, int k, Rng& rng,
                         int sd_, int sh_, int sw_, int pd_, int ph_, int pw_)
    : sd(sd_), sh(sh_), sw(sw_), pd(pd_), ph(ph_), pw(pw_) {
  w = ps.create_uniform(name + ".w", {out, in, k, k, k}, rng, fan_in_bound(in * k * k * k));
  b = ps.create(name + ".b", {out});
}

GroupNormLayer::GroupNormLayer(ParamStore& ps, const std::string& name, int channels, int groups_)
    : groups(groups_) {
  gamma = ps.create_full(name + ".gamma", {channels}, 1.0f);
  beta = ps.create(name + ".beta", {channels});
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, int channels,
                                       int heads_, Rng& rng, bool zero_out_proj)
    : heads(heads_) {
  float bound = fan_in_bound(channels);
  wq = ps.create_uniform(name + ".wq", {channels, channels}, rng, bound);
  wk = ps.create_uniform(name + ".wk", {channels, channels}, rng, bound);
  wv = ps.create_uniform(name + ".wv", {channels, channels}, rng, bound);
  if (zero_out_proj)
    wo = ps.create(name + ".wo", {channels, channels});
  else
    wo = ps.create_uniform(name + ".wo", {channels, channels}, rng, bound);
}

Tensor MultiHeadAttention::forward(const Tensor& q_src, const Tensor& kv_src) const {
  return attention(q_src, kv_src, heads, *this);
}

Tensor attention(const Tensor& q_src, const Tensor& kv_src, int heads, const MultiHeadAttention& p) {
  if (q_src.ndim() != 3 || kv_src.ndim() != 3)
    throw ShapeError("attention: expects [B,L,C] tokens");
  int B = q_src.dim(0), Lq = q_src.dim(1), C = q_src.dim(2);
  int Lkv = kv_src.dim(1);
  if (kv_src.dim(0) != B) throw ShapeError("attention: batch mismatch");
  if (kv_src.dim(2) != C) throw ShapeError("attention: channel mismatch");
  if (C % heads != 0) throw ShapeError("attention: channels not divisible by heads");
  int dh = C / heads;

  auto split_heads = [&](const Tensor& t, int L) {
    // [B*L, C] -> [B*heads, L, dh]
    Tensor x = reshape(t, {B, L, heads, dh});
    x = permute(x, {0, 2, 1, 3});
    return reshape(x, {B * heads, L, dh});
  };
  Tensor q = split_heads(linear(reshape(q_src, {B * Lq, C}), p.wq, Tensor()), Lq);
  Tensor k = split_heads(linear(reshape(kv_src, {B * Lkv, C}), p.wk, Tensor()), Lkv);
  Tensor v = split_heads(linear(reshape(kv_src, {B * Lkv, C}), p.wv, Tensor()), Lkv);

  Tensor logits = scale(bmm(q, k, /*transpose_b=*/true), 1.0f / std::sqrt(static_cast<float>(dh)));
  Tensor attn = softmax_lastdim(logits);
  Tensor o = bmm(attn, v);  // [B*heads, Lq, dh]
  o = reshape(o, {B, heads, Lq, dh});
  o = permute(o, {0, 2, 1, 3});
  o = reshape(o, {B * Lq, C});
  o = linear(o, p.wo, Tensor());
  return reshape(o, {B, Lq, C});
}

FeedForward::FeedForward(ParamStore& ps, const std::string& name, int channels, int mult, Rng& rng,
                         bool zero_out) {
  fc1 = Linear(ps, name + ".fc1", channels, channels * mult, rng);
  fc2 = Linear(ps, name + ".fc2", channels * mult, channels, rng, /*bias=*/true, /*zero_init=*/zero_out);
}

Tensor FeedForward::forward(const Tensor& tokens) const {
  int B = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  Tensor x = reshape(tokens, {B * L, C});
  x = fc2.forward(silu(fc1.forward(x)));
  return reshape(x, {B, L, C});
}

Tensor to_tokens(const Tensor& x) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {N, H * W, C});
}

Tensor from_tokens(const Tensor& t, int h, int w) {
  int N = t.dim(0), C = t.dim(2);
  Tensor x = reshape(t, {N, h, w, C});
  return permute(x, {0, 3, 1, 2});
}

Tensor norm_tokens(const Tensor& tokens, const GroupNormLayer& gn) {
  int B = tokens.dim(0), L = tokens.dim(1), C = tokens.dim(2);
  Tensor x = reshape(tokens, {B * L, C});
  x = gn.forward(x);
  return reshape(x, {B, L, C});
}

Tensor timestep_embedding(const std::vector<float>& t01, int n_freqs) {
  int N = static_cast<int>(t01.size());
  std::vector<float> rows(static_cast<size_t>(N) * 2 * n_freqs);
  for (int i = 0; i < N; ++i) {
    double omega = 3.14159265358979323846;
    for (int k = 0; k < n_freqs; ++k) {
      rows[static_cast<size_t>(i) * 2 * n_freqs + 2 * k] = static_cast<float>(std::sin(omega * t01[static_cast<size_t>(i)]));
      rows[static_cast<size_t>(i) * 2 * n_freqs + 2 * k + 1] = static_cast<float>(std::cos(omega * t01[static_cast<size_t>(i)]));
      omega *= 2.0;
    }
  }
  return Tensor::from_data({N, 2 * n_freqs}, std::move(rows));
}

TimeMlp::TimeMlp(ParamStore& ps, const std::string& name, int in, int dim, Rng& rng) {
  fc1 = Linear(ps, name + ".fc1", in, dim, rng);
  fc2 = Linear(ps, name + ".fc2", dim, dim, rng);
}

Tensor TimeMlp::forward(const Tensor& emb) const { return fc2.forward(silu(fc1.forward(emb))); }

ResBlock2d::ResBlock2d(ParamStore& ps, const std::string& name, int in, int out, int temb_dim, Rng& rng) {
  gn1 = GroupNormLayer(ps, name + ".gn1", in, std::min(8, in));
  conv1 = Conv2dLayer(ps, name + ".conv1", in, out, 3, rng, 1, 1);
  gn2 = GroupNormLayer(ps, name + ".gn2", out, std::min(8, out));
  conv2 = Conv2dLayer(ps, name + ".conv2", out, out, 3, rng, 1, 1);
  if (in != out) {
    skip = Conv2dLayer(ps, name + ".skip", in, out, 1, rng, 1, 0);
    has_skip = true;
  }
  if (temb_dim > 0) {
    temb_proj = Linear(ps, name + ".temb", temb_dim, out, rng);
    has_temb = true;
  }
}

Tensor ResBlock2d::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv1.forward(silu(gn1.forward(x)));
  if (has_temb && temb.defined()) h = add_channels_nc(h, temb_proj.forward(silu(temb)));
  h = conv2.forward(silu(gn2.forward(h)));
  Tensor s = has_skip ? skip.forward(x) : x;
  return add(h, s);
}

}  // namespace worldgen
