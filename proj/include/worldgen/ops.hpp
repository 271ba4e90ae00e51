#pragma once

#include <vector>

#include "worldgen/tensor.hpp"

namespace worldgen {

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
// a*x + b*y, shapes equal
Tensor lincomb(float a, const Tensor& x, float b, const Tensor& y);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Layout
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// Linear algebra (Eigen-backed)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[M,K], w[N,K], b[N] or undefined
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);  // a[B,M,K], b[B,K,N] (or [B,N,K])
Tensor softmax_lastdim(const Tensor& x);

// Convolution (cross-correlation semantics)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor conv2d_hw(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h, int stride_w, int pad_h, int pad_w);
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              int sd, int sh, int sw, int pd, int ph, int pw);
Tensor upsample_nearest2d(const Tensor& x, int fh, int fw);
Tensor upsample_nearest3d(const Tensor& x, int fd, int fh, int fw);

// Normalization
Tensor group_norm(const Tensor& x, int groups, float eps, const Tensor& gamma, const Tensor& beta);

// Reductions / losses
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
// Weighted squared error: sum(w*(a-b)^2)/sum(w); 0 when sum(w)==0. w is not differentiated.
Tensor masked_mse(const Tensor& a, const Tensor& b, const std::vector<float>& w);
// logits [M,C]; loss = sum_i w[id_i]*(LSE_i - logit[i,id_i]) / sum_i w[id_i]
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& ids,
                            const std::vector<float>& class_weights);

// Embeddings / gathers
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor scatter_rows_add(const Tensor& base, const Tensor& rows, const std::vector<int>& idx);

// Broadcast add of per-sample channel vectors: x[N,C,...] + e[N,C]
Tensor add_channels_nc(const Tensor& x, const Tensor& e);

// out[b*times + t] = x[b] along axis 0
Tensor repeat_interleave0(const Tensor& x, int times);

// out[c,h,w] = sum_d gate[c,d] * f[c,d,h,w]
Tensor depth_gate_sum(const Tensor& f, const Tensor& gate);

// [sin(w0 x), cos(w0 x), ...], w_k = 2^k * pi. Throws on non-finite x.
Tensor fourier_embed(double x, int n_freqs);

// volume [C,Z,H,W], points in continuous voxel coords (z,y,x), 3*P doubles.
// Out-of-range points yield the zero vector.
Tensor trilinear_sample(const Tensor& volume, const std::vector<double>& points);

// Submanifold 3x3x3 conv: output only at occupied sites, gathering only
// occupied neighbors; off-mask output stays exactly zero.
Tensor sparse_conv3d(const Tensor& x, const std::vector<uint8_t>& mask,
                     const Tensor& w, const Tensor& b);

}  // namespace worldgen
