#include "worldgen/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace worldgen {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

std::vector<float>* grad_of(const std::shared_ptr<TensorNode>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return &n->grad;
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

Shape same_shape_check(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return a.shape();
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return lincomb(1.0f, a, 1.0f, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return lincomb(1.0f, a, -1.0f, b); }

Tensor lincomb(float ca, const Tensor& a, float cb, const Tensor& b) {
  Shape s = same_shape_check("lincomb", a, b);
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ca * av[i] + cb * bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_op("lincomb", s, std::move(out), {a, b}, [pa, pb, ca, cb](TensorNode& self) {
    if (auto* ga = grad_of(pa))
      for (size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += ca * self.grad[i];
    if (auto* gb = grad_of(pb))
      for (size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += cb * self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape s = same_shape_check("mul", a, b);
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_op("mul", s, std::move(out), {a, b}, [pa, pb](TensorNode& self) {
    if (auto* ga = grad_of(pa))
      for (size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += pb->value[i] * self.grad[i];
    if (auto* gb = grad_of(pb))
      for (size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += pa->value[i] * self.grad[i];
  });
}

Tensor scale(const Tensor& x, float s) {
  const auto& xv = x.node().value;
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = s * xv[i];
  auto px = x.node_ptr();
  return make_op("scale", x.shape(), std::move(out), {x}, [px, s](TensorNode& self) {
    if (auto* g = grad_of(px))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, float s) {
  const auto& xv = x.node().value;
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + s;
  auto px = x.node_ptr();
  return make_op("add_scalar", x.shape(), std::move(out), {x}, [px](TensorNode& self) {
    if (auto* g = grad_of(px))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto& xv = x.node().value;
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-xv[i]));
  auto px = x.node_ptr();
  std::vector<float> saved = out;
  return make_op("sigmoid", x.shape(), std::move(out), {x}, [px, saved = std::move(saved)](TensorNode& self) {
    if (auto* g = grad_of(px))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += saved[i] * (1.0f - saved[i]) * self.grad[i];
  });
}

Tensor silu(const Tensor& x) {
  const auto& xv = x.node().value;
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    float s = 1.0f / (1.0f + std::exp(-xv[i]));
    out[i] = xv[i] * s;
  }
  auto px = x.node_ptr();
  return make_op("silu", x.shape(), std::move(out), {x}, [px](TensorNode& self) {
    if (auto* g = grad_of(px)) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        float v = px->value[i];
        float s = 1.0f / (1.0f + std::exp(-v));
        (*g)[i] += (s + v * s * (1.0f - s)) * self.grad[i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape_numel(shape) == x.numel(), "reshape",
          "numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<float> out(x.node().value);
  auto px = x.node_ptr();
  return make_op("reshape", shape, std::move(out), {x}, [px](TensorNode& self) {
    if (auto* g = grad_of(px))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// dst[i] = src[perm_index(i)] given source strides permuted into dst order.
void permute_copy(const float* src, float* dst, const Shape& out_shape,
                  const std::vector<int64_t>& src_strides_in_out_order) {
  size_t rank = out_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t src_off = 0;
  int64_t n = shape_numel(out_shape);
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = src[src_off];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      src_off += src_strides_in_out_order[ud];
      if (idx[ud] < out_shape[ud]) break;
      src_off -= static_cast<int64_t>(idx[ud]) * src_strides_in_out_order[ud];
      idx[ud] = 0;
    }
  }
}

void permute_accumulate(const float* src, float* dst, const Shape& src_iter_shape,
                        const std::vector<int64_t>& dst_strides_in_src_order) {
  // dst[mapped] += src[i]
  size_t rank = src_iter_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t dst_off = 0;
  int64_t n = shape_numel(src_iter_shape);
  for (int64_t i = 0; i < n; ++i) {
    dst[dst_off] += src[i];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      dst_off += dst_strides_in_src_order[ud];
      if (idx[ud] < src_iter_shape[ud]) break;
      dst_off -= static_cast<int64_t>(idx[ud]) * dst_strides_in_src_order[ud];
      idx[ud] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const Shape& in = x.shape();
  require(axes.size() == in.size(), "permute", "axes rank mismatch");
  Shape out_shape(in.size());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in[static_cast<size_t>(axes[i])];
  auto in_strides = row_major_strides(in);
  std::vector<int64_t> strides_in_out_order(in.size());
  for (size_t i = 0; i < axes.size(); ++i) strides_in_out_order[i] = in_strides[static_cast<size_t>(axes[i])];

  std::vector<float> out(static_cast<size_t>(x.numel()));
  permute_copy(x.node().value.data(), out.data(), out_shape, strides_in_out_order);

  auto px = x.node_ptr();
  return make_op("permute", out_shape, std::move(out), {x},
                 [px, out_shape, strides_in_out_order](TensorNode& self) {
                   if (auto* g = grad_of(px))
                     permute_accumulate(self.grad.data(), g->data(), out_shape, strides_in_out_order);
                 });
}

namespace {
// Decompose shape around an axis into outer, extent, inner.
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& ext, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  ext = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat", "empty input list");
  Shape out_shape = xs[0].shape();
  int64_t total_ext = 0;
  for (const Tensor& t : xs) {
    Shape s = t.shape();
    require(static_cast<size_t>(axis) < s.size(), "concat", "axis out of range");
    Shape a = s, b = out_shape;
    a[static_cast<size_t>(axis)] = b[static_cast<size_t>(axis)] = 0;
    require(a == b, "concat", "incompatible shapes");
    total_ext += s[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(total_ext);
  int64_t outer, ext_out, inner;
  axis_split(out_shape, axis, outer, ext_out, inner);

  std::vector<float> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t off_ext = 0;
  for (const Tensor& t : xs) {
    int64_t ext = t.dim(axis);
    const float* src = t.node().value.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * ext * inner, src + (o + 1) * ext * inner,
                out.data() + (o * ext_out + off_ext) * inner);
    }
    off_ext += ext;
  }

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::vector<int64_t> exts;
  for (const Tensor& t : xs) {
    parents.push_back(t.node_ptr());
    exts.push_back(t.dim(axis));
  }
  return make_op("concat", out_shape, std::move(out), xs,
                 [parents, exts, outer, ext_out, inner](TensorNode& self) {
                   int64_t off = 0;
                   for (size_t k = 0; k < parents.size(); ++k) {
                     int64_t ext = exts[k];
                     if (auto* g = grad_of(parents[k])) {
                       for (int64_t o = 0; o < outer; ++o) {
                         const float* sg = self.grad.data() + (o * ext_out + off) * inner;
                         float* dg = g->data() + o * ext * inner;
                         for (int64_t i = 0; i < ext * inner; ++i) dg[i] += sg[i];
                       }
                     }
                     off += ext;
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const Shape& in = x.shape();
  require(static_cast<size_t>(axis) < in.size(), "slice", "axis out of range");
  require(start >= 0 && len >= 0 && start + len <= in[static_cast<size_t>(axis)], "slice", "range out of bounds");
  Shape out_shape = in;
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer, ext, inner;
  axis_split(in, axis, outer, ext, inner);

  std::vector<float> out(static_cast<size_t>(shape_numel(out_shape)));
  const float* src = x.node().value.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * ext + start) * inner, src + (o * ext + start + len) * inner,
              out.data() + o * len * inner);

  auto px = x.node_ptr();
  return make_op("slice", out_shape, std::move(out), {x},
                 [px, outer, ext, inner, start, len](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (int64_t o = 0; o < outer; ++o) {
                       const float* sg = self.grad.data() + o * len * inner;
                       float* dg = g->data() + (o * ext + start) * inner;
                       for (int64_t i = 0; i < len * inner; ++i) dg[i] += sg[i];
                     }
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 2 && w.ndim() == 2, "linear", "expects 2-d input and weight");
  int64_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
  require(w.dim(1) == k, "linear", "weight in-features mismatch");
  if (b.defined()) require(b.ndim() == 1 && b.dim(0) == n, "linear", "bias shape mismatch");

  std::vector<float> out(static_cast<size_t>(m * n));
  {
    MapCM X(x.node().value.data(), m, k);
    MapCM W(w.node().value.data(), n, k);
    MapM O(out.data(), m, n);
    O.noalias() = X * W.transpose();
    if (b.defined()) O.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.node().value.data(), n);
  }
  auto px = x.node_ptr(), pw = w.node_ptr();
  auto pb = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op("linear", {static_cast<int>(m), static_cast<int>(n)}, std::move(out), parents,
                 [px, pw, pb, m, k, n](TensorNode& self) {
                   MapCM G(self.grad.data(), m, n);
                   if (auto* gx = grad_of(px)) {
                     MapCM W(pw->value.data(), n, k);
                     MapM GX(gx->data(), m, k);
                     GX.noalias() += G * W;
                   }
                   if (auto* gw = grad_of(pw)) {
                     MapCM X(px->value.data(), m, k);
                     MapM GW(gw->data(), n, k);
                     GW.noalias() += G.transpose() * X;
                   }
                   if (pb) {
                     if (auto* gb = grad_of(pb)) {
                       Eigen::Map<Eigen::RowVectorXf> GB(gb->data(), n);
                       GB += G.colwise().sum();
                     }
                   }
                 });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require(a.ndim() == 3 && b.ndim() == 3, "bmm", "expects 3-d inputs");
  int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
  require(b.dim(0) == B, "bmm", "batch mismatch");
  int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
  require(bk == k, "bmm", "inner extent mismatch");

  std::vector<float> out(static_cast<size_t>(B * m * n));
  for (int64_t i = 0; i < B; ++i) {
    MapCM A(a.node().value.data() + i * m * k, m, k);
    MapM O(out.data() + i * m * n, m, n);
    if (transpose_b) {
      MapCM Bm(b.node().value.data() + i * n * k, n, k);
      O.noalias() = A * Bm.transpose();
    } else {
      MapCM Bm(b.node().value.data() + i * k * n, k, n);
      O.noalias() = A * Bm;
    }
  }
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_op("bmm", {static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)}, std::move(out),
                 {a, b}, [pa, pb, B, m, k, n, transpose_b](TensorNode& self) {
                   auto* ga = grad_of(pa);
                   auto* gb = grad_of(pb);
                   for (int64_t i = 0; i < B; ++i) {
                     MapCM G(self.grad.data() + i * m * n, m, n);
                     MapCM A(pa->value.data() + i * m * k, m, k);
                     if (transpose_b) {
                       MapCM Bm(pb->value.data() + i * n * k, n, k);
                       if (ga) {
                         MapM GA(ga->data() + i * m * k, m, k);
                         GA.noalias() += G * Bm;
                       }
                       if (gb) {
                         MapM GB(gb->data() + i * n * k, n, k);
                         GB.noalias() += G.transpose() * A;
                       }
                     } else {
                       MapCM Bm(pb->value.data() + i * k * n, k, n);
                       if (ga) {
                         MapM GA(ga->data() + i * m * k, m, k);
                         GA.noalias() += G * Bm.transpose();
                       }
                       if (gb) {
                         MapM GB(gb->data() + i * k * n, k, n);
                         GB.noalias() += A.transpose() * G;
                       }
                     }
                   }
                 });
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  int64_t L = s.back();
  int64_t rows = x.numel() / L;
  const auto& xv = x.node().value;
  std::vector<float> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * L;
    float* o = out.data() + r * L;
    float mx = in[0];
    for (int64_t i = 1; i < L; ++i) mx = std::max(mx, in[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < L; ++i) {
      o[i] = std::exp(in[i] - mx);
      denom += o[i];
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int64_t i = 0; i < L; ++i) o[i] *= inv;
  }
  auto px = x.node_ptr();
  std::vector<float> saved = out;
  return make_op("softmax", s, std::move(out), {x},
                 [px, L, rows, saved = std::move(saved)](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (int64_t r = 0; r < rows; ++r) {
                       const float* sm = saved.data() + r * L;
                       const float* go = self.grad.data() + r * L;
                       double dot = 0.0;
                       for (int64_t i = 0; i < L; ++i) dot += static_cast<double>(sm[i]) * go[i];
                       float* gi = g->data() + r * L;
                       for (int64_t i = 0; i < L; ++i)
                         gi[i] += sm[i] * (go[i] - static_cast<float>(dot));
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Convolutions: im2col + GEMM. The column matrix is rebuilt in the backward
// pass instead of being saved; time beats memory at these sizes.
// ---------------------------------------------------------------------------

namespace {

void im2col2d(const float* x, int C, int H, int W, int kh, int kw, int sh, int sw,
              int ph, int pw, int Ho, int Wo, float* cols) {
  // cols: [C*kh*kw, Ho*Wo]
  int64_t plane = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        float* dst = cols + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * plane;
        const float* src = x + static_cast<int64_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * sh - ph + ki;
          if (iy < 0 || iy >= H) {
            std::fill(dst + static_cast<int64_t>(oy) * Wo, dst + (static_cast<int64_t>(oy) + 1) * Wo, 0.0f);
            continue;
          }
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * sw - pw + kj;
            dst[static_cast<int64_t>(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[static_cast<int64_t>(iy) * W + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im2d(const float* cols, int C, int H, int W, int kh, int kw, int sh, int sw,
              int ph, int pw, int Ho, int Wo, float* gx) {
  int64_t plane = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const float* src = cols + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * plane;
        float* dst = gx + static_cast<int64_t>(c) * H * W;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * sh - ph + ki;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * sw - pw + kj;
            if (ix >= 0 && ix < W) dst[static_cast<int64_t>(iy) * W + ix] += src[static_cast<int64_t>(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

void im2col3d(const float* x, int C, int D, int H, int W, int k, int sd, int sh, int sw,
              int pd, int ph, int pw, int Do, int Ho, int Wo, float* cols) {
  // cols: [C*k^3, Do*Ho*Wo]
  int64_t plane = static_cast<int64_t>(Do) * Ho * Wo;
  for (int c = 0; c < C; ++c) {
    const float* src = x + static_cast<int64_t>(c) * D * H * W;
    for (int kz = 0; kz < k; ++kz)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          float* dst = cols + (((static_cast<int64_t>(c) * k + kz) * k + ki) * k + kj) * plane;
          for (int oz = 0; oz < Do; ++oz) {
            int iz = oz * sd - pd + kz;
            for (int oy = 0; oy < Ho; ++oy) {
              int iy = oy * sh - ph + ki;
              float* drow = dst + (static_cast<int64_t>(oz) * Ho + oy) * Wo;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                std::fill(drow, drow + Wo, 0.0f);
                continue;
              }
              const float* srow = src + (static_cast<int64_t>(iz) * H + iy) * W;
              for (int ox = 0; ox < Wo; ++ox) {
                int ix = ox * sw - pw + kj;
                drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0f;
              }
            }
          }
        }
  }
}

void col2im3d(const float* cols, int C, int D, int H, int W, int k, int sd, int sh, int sw,
              int pd, int ph, int pw, int Do, int Ho, int Wo, float* gx) {
  int64_t plane = static_cast<int64_t>(Do) * Ho * Wo;
  for (int c = 0; c < C; ++c) {
    float* dst = gx + static_cast<int64_t>(c) * D * H * W;
    for (int kz = 0; kz < k; ++kz)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          const float* src = cols + (((static_cast<int64_t>(c) * k + kz) * k + ki) * k + kj) * plane;
          for (int oz = 0; oz < Do; ++oz) {
            int iz = oz * sd - pd + kz;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              int iy = oy * sh - ph + ki;
              if (iy < 0 || iy >= H) continue;
              const float* srow = src + (static_cast<int64_t>(oz) * Ho + oy) * Wo;
              float* drow = dst + (static_cast<int64_t>(iz) * H + iy) * W;
              for (int ox = 0; ox < Wo; ++ox) {
                int ix = ox * sw - pw + kj;
                if (ix >= 0 && ix < W) drow[ix] += srow[ox];
              }
            }
          }
        }
  }
}

}  // namespace

Tensor conv2d_hw(const Tensor& x, const Tensor& w, const Tensor& b,
                 int sh, int sw, int ph, int pw) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv2d", "expects x[N,C,H,W], w[O,C,kh,kw]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == C, "conv2d", "channel mismatch");
  int Ho = (H + 2 * ph - kh) / sh + 1;
  int Wo = (W + 2 * pw - kw) / sw + 1;
  require(Ho > 0 && Wo > 0, "conv2d", "empty output");
  if (b.defined()) require(b.numel() == O, "conv2d", "bias mismatch");

  int64_t ckk = static_cast<int64_t>(C) * kh * kw;
  int64_t plane = static_cast<int64_t>(Ho) * Wo;
  std::vector<float> out(static_cast<size_t>(N) * O * plane);
  std::vector<float> cols(static_cast<size_t>(ckk) * plane);
  MapCM Wm(w.node().value.data(), O, ckk);
  for (int nidx = 0; nidx < N; ++nidx) {
    im2col2d(x.node().value.data() + static_cast<int64_t>(nidx) * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
             cols.data());
    MapCM Cm(cols.data(), ckk, plane);
    MapM Om(out.data() + static_cast<int64_t>(nidx) * O * plane, O, plane);
    Om.noalias() = Wm * Cm;
    if (b.defined())
      Om.colwise() += Eigen::Map<const Eigen::VectorXf>(b.node().value.data(), O);
  }

  auto px = x.node_ptr(), pw_ = w.node_ptr();
  auto pb = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op("conv2d", {N, O, Ho, Wo}, std::move(out), parents,
                 [px, pw_, pb, N, C, H, W, O, kh, kw, sh, sw, ph, pw, Ho, Wo, ckk, plane](TensorNode& self) {
                   auto* gx = grad_of(px);
                   auto* gw = grad_of(pw_);
                   std::vector<float>* gb = pb ? grad_of(pb) : nullptr;
                   std::vector<float> cols(static_cast<size_t>(ckk) * plane);
                   std::vector<float> gcols(static_cast<size_t>(ckk) * plane);
                   MapCM Wm(pw_->value.data(), O, ckk);
                   for (int nidx = 0; nidx < N; ++nidx) {
                     MapCM G(self.grad.data() + static_cast<int64_t>(nidx) * O * plane, O, plane);
                     if (gw) {
                       im2col2d(px->value.data() + static_cast<int64_t>(nidx) * C * H * W, C, H, W, kh, kw, sh, sw,
                                ph, pw, Ho, Wo, cols.data());
                       MapM GW(gw->data(), O, ckk);
                       MapCM Cm(cols.data(), ckk, plane);
                       GW.noalias() += G * Cm.transpose();
                     }
                     if (gx) {
                       MapM GC(gcols.data(), ckk, plane);
                       GC.noalias() = Wm.transpose() * G;
                       col2im2d(gcols.data(), C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
                                gx->data() + static_cast<int64_t>(nidx) * C * H * W);
                     }
                     if (gb) {
                       for (int o = 0; o < O; ++o) {
                         double acc = 0.0;
                         const float* row = self.grad.data() + (static_cast<int64_t>(nidx) * O + o) * plane;
                         for (int64_t i = 0; i < plane; ++i) acc += row[i];
                         (*gb)[static_cast<size_t>(o)] += static_cast<float>(acc);
                       }
                     }
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  return conv2d_hw(x, w, b, stride, stride, pad, pad);
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b,
              int sd, int sh, int sw, int pd, int ph, int pw) {
  require(x.ndim() == 5 && w.ndim() == 5, "conv3d", "expects x[N,C,D,H,W], w[O,C,k,k,k]");
  int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  int O = w.dim(0), k = w.dim(2);
  require(w.dim(1) == C && w.dim(3) == k && w.dim(4) == k, "conv3d", "kernel must be cubic");
  int Do = (D + 2 * pd - k) / sd + 1;
  int Ho = (H + 2 * ph - k) / sh + 1;
  int Wo = (W + 2 * pw - k) / sw + 1;
  require(Do > 0 && Ho > 0 && Wo > 0, "conv3d", "empty output");
  if (b.defined()) require(b.numel() == O, "conv3d", "bias mismatch");

  int64_t ckkk = static_cast<int64_t>(C) * k * k * k;
  int64_t plane = static_cast<int64_t>(Do) * Ho * Wo;
  std::vector<float> out(static_cast<size_t>(N) * O * plane);
  std::vector<float> cols(static_cast<size_t>(ckkk) * plane);
  MapCM Wm(w.node().value.data(), O, ckkk);
  for (int nidx = 0; nidx < N; ++nidx) {
    im2col3d(x.node().value.data() + static_cast<int64_t>(nidx) * C * D * H * W, C, D, H, W, k, sd, sh, sw, pd, ph,
             pw, Do, Ho, Wo, cols.data());
    MapCM Cm(cols.data(), ckkk, plane);
    MapM Om(out.data() + static_cast<int64_t>(nidx) * O * plane, O, plane);
    Om.noalias() = Wm * Cm;
    if (b.defined())
      Om.colwise() += Eigen::Map<const Eigen::VectorXf>(b.node().value.data(), O);
  }

  auto px = x.node_ptr(), pw_ = w.node_ptr();
  auto pb = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op("conv3d", {N, O, Do, Ho, Wo}, std::move(out), parents,
                 [px, pw_, pb, N, C, D, H, W, O, k, sd, sh, sw, pd, ph, pw, Do, Ho, Wo, ckkk, plane](TensorNode& self) {
                   auto* gx = grad_of(px);
                   auto* gw = grad_of(pw_);
                   std::vector<float>* gb = pb ? grad_of(pb) : nullptr;
                   std::vector<float> cols(static_cast<size_t>(ckkk) * plane);
                   std::vector<float> gcols(static_cast<size_t>(ckkk) * plane);
                   MapCM Wm(pw_->value.data(), O, ckkk);
                   for (int nidx = 0; nidx < N; ++nidx) {
                     MapCM G(self.grad.data() + static_cast<int64_t>(nidx) * O * plane, O, plane);
                     if (gw) {
                       im2col3d(px->value.data() + static_cast<int64_t>(nidx) * C * D * H * W, C, D, H, W, k, sd, sh,
                                sw, pd, ph, pw, Do, Ho, Wo, cols.data());
                       MapM GW(gw->data(), O, ckkk);
                       MapCM Cm(cols.data(), ckkk, plane);
                       GW.noalias() += G * Cm.transpose();
                     }
                     if (gx) {
                       MapM GC(gcols.data(), ckkk, plane);
                       GC.noalias() = Wm.transpose() * G;
                       col2im3d(gcols.data(), C, D, H, W, k, sd, sh, sw, pd, ph, pw, Do, Ho, Wo,
                                gx->data() + static_cast<int64_t>(nidx) * C * D * H * W);
                     }
                     if (gb) {
                       for (int o = 0; o < O; ++o) {
                         double acc = 0.0;
                         const float* row = self.grad.data() + (static_cast<int64_t>(nidx) * O + o) * plane;
                         for (int64_t i = 0; i < plane; ++i) acc += row[i];
                         (*gb)[static_cast<size_t>(o)] += static_cast<float>(acc);
                       }
                     }
                   }
                 });
}

Tensor upsample_nearest2d(const Tensor& x, int fh, int fw) {
  require(x.ndim() == 4, "upsample2d", "expects [N,C,H,W]");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Ho = H * fh, Wo = W * fw;
  std::vector<float> out(static_cast<size_t>(N) * C * Ho * Wo);
  const float* src = x.node().value.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const float* sp = src + nc * H * W;
    float* dp = out.data() + nc * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xq = 0; xq < Wo; ++xq) dp[static_cast<int64_t>(y) * Wo + xq] = sp[static_cast<int64_t>(y / fh) * W + xq / fw];
  }
  auto px = x.node_ptr();
  return make_op("upsample2d", {N, C, Ho, Wo}, std::move(out), {x},
                 [px, N, C, H, W, fh, fw, Ho, Wo](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
                       const float* sg = self.grad.data() + nc * Ho * Wo;
                       float* dg = g->data() + nc * H * W;
                       for (int y = 0; y < Ho; ++y)
                         for (int xq = 0; xq < Wo; ++xq)
                           dg[static_cast<int64_t>(y / fh) * W + xq / fw] += sg[static_cast<int64_t>(y) * Wo + xq];
                     }
                   }
                 });
}

Tensor upsample_nearest3d(const Tensor& x, int fd, int fh, int fw) {
  require(x.ndim() == 5, "upsample3d", "expects [N,C,D,H,W]");
  int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  int Do = D * fd, Ho = H * fh, Wo = W * fw;
  std::vector<float> out(static_cast<size_t>(N) * C * Do * Ho * Wo);
  const float* src = x.node().value.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const float* sp = src + nc * D * H * W;
    float* dp = out.data() + nc * Do * Ho * Wo;
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xq = 0; xq < Wo; ++xq)
          dp[(static_cast<int64_t>(z) * Ho + y) * Wo + xq] =
              sp[(static_cast<int64_t>(z / fd) * H + y / fh) * W + xq / fw];
  }
  auto px = x.node_ptr();
  return make_op("upsample3d", {N, C, Do, Ho, Wo}, std::move(out), {x},
                 [px, N, C, D, H, W, fd, fh, fw, Do, Ho, Wo](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
                       const float* sg = self.grad.data() + nc * Do * Ho * Wo;
                       float* dg = g->data() + nc * D * H * W;
                       for (int z = 0; z < Do; ++z)
                         for (int y = 0; y < Ho; ++y)
                           for (int xq = 0; xq < Wo; ++xq)
                             dg[(static_cast<int64_t>(z / fd) * H + y / fh) * W + xq / fw] +=
                                 sg[(static_cast<int64_t>(z) * Ho + y) * Wo + xq];
                     }
                   }
                 });
}

Tensor group_norm(const Tensor& x, int groups, float eps, const Tensor& gamma, const Tensor& beta) {
  require(x.ndim() >= 2, "group_norm", "expects [N,C,...]");
  int N = x.dim(0), C = x.dim(1);
  require(C % groups == 0, "group_norm", "channels not divisible by groups");
  require(eps > 0.0f, "group_norm", "eps must be positive");
  require(gamma.numel() == C && beta.numel() == C, "group_norm", "affine shape mismatch");
  int64_t S = x.numel() / (static_cast<int64_t>(N) * C);
  int cpg = C / groups;
  int64_t gsize = static_cast<int64_t>(cpg) * S;

  const auto& xv = x.node().value;
  const auto& gv = gamma.node().value;
  const auto& bv = beta.node().value;
  std::vector<float> out(xv.size());
  std::vector<float> xhat(xv.size());
  std::vector<float> inv_sigma(static_cast<size_t>(N) * groups);
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const float* base = xv.data() + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
      double m = 0.0;
      for (int64_t i = 0; i < gsize; ++i) m += base[i];
      m /= static_cast<double>(gsize);
      double var = 0.0;
      for (int64_t i = 0; i < gsize; ++i) {
        double d = base[i] - m;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      double inv = 1.0 / std::sqrt(var + eps);
      inv_sigma[static_cast<size_t>(n) * groups + g] = static_cast<float>(inv);
      int64_t off = (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
      for (int c = 0; c < cpg; ++c) {
        float ga = gv[static_cast<size_t>(g * cpg + c)];
        float be = bv[static_cast<size_t>(g * cpg + c)];
        for (int64_t i = 0; i < S; ++i) {
          int64_t j = off + static_cast<int64_t>(c) * S + i;
          float xh = static_cast<float>((xv[static_cast<size_t>(j)] - m) * inv);
          xhat[static_cast<size_t>(j)] = xh;
          out[static_cast<size_t>(j)] = xh * ga + be;
        }
      }
    }
  }
  auto px = x.node_ptr(), pg = gamma.node_ptr(), pb = beta.node_ptr();
  return make_op("group_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [px, pg, pb, N, C, groups, cpg, S, gsize, xhat = std::move(xhat),
                  inv_sigma = std::move(inv_sigma)](TensorNode& self) {
                   auto* gx = grad_of(px);
                   auto* gg = grad_of(pg);
                   auto* gb = grad_of(pb);
                   const auto& gv = pg->value;
                   for (int n = 0; n < N; ++n) {
                     for (int g = 0; g < groups; ++g) {
                       int64_t off = (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
                       if (gx) {
                         // dxhat = dout * gamma; dx = inv_sigma*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                         double s1 = 0.0, s2 = 0.0;
                         for (int c = 0; c < cpg; ++c) {
                           float ga = gv[static_cast<size_t>(g * cpg + c)];
                           for (int64_t i = 0; i < S; ++i) {
                             int64_t j = off + static_cast<int64_t>(c) * S + i;
                             double dxh = static_cast<double>(self.grad[static_cast<size_t>(j)]) * ga;
                             s1 += dxh;
                             s2 += dxh * xhat[static_cast<size_t>(j)];
                           }
                         }
                         double m1 = s1 / static_cast<double>(gsize);
                         double m2 = s2 / static_cast<double>(gsize);
                         float inv = inv_sigma[static_cast<size_t>(n) * groups + g];
                         for (int c = 0; c < cpg; ++c) {
                           float ga = gv[static_cast<size_t>(g * cpg + c)];
                           for (int64_t i = 0; i < S; ++i) {
                             int64_t j = off + static_cast<int64_t>(c) * S + i;
                             double dxh = static_cast<double>(self.grad[static_cast<size_t>(j)]) * ga;
                             (*gx)[static_cast<size_t>(j)] += static_cast<float>(
                                 inv * (dxh - m1 - static_cast<double>(xhat[static_cast<size_t>(j)]) * m2));
                           }
                         }
                       }
                       if (gg || gb) {
                         for (int c = 0; c < cpg; ++c) {
                           double sg = 0.0, sb = 0.0;
                           for (int64_t i = 0; i < S; ++i) {
                             int64_t j = off + static_cast<int64_t>(c) * S + i;
                             sg += static_cast<double>(self.grad[static_cast<size_t>(j)]) * xhat[static_cast<size_t>(j)];
                             sb += self.grad[static_cast<size_t>(j)];
                           }
                           if (gg) (*gg)[static_cast<size_t>(g * cpg + c)] += static_cast<float>(sg);
                           if (gb) (*gb)[static_cast<size_t>(g * cpg + c)] += static_cast<float>(sb);
                         }
                       }
                     }
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.node().value) acc += v;
  auto px = x.node_ptr();
  return make_op("sum", {1}, {static_cast<float>(acc)}, {x}, [px](TensorNode& self) {
    if (auto* g = grad_of(px)) {
      float go = self.grad[0];
      for (auto& v : *g) v += go;
    }
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.node().value) acc += v;
  int64_t n = x.numel();
  acc /= static_cast<double>(n);
  auto px = x.node_ptr();
  return make_op("mean", {1}, {static_cast<float>(acc)}, {x}, [px, n](TensorNode& self) {
    if (auto* g = grad_of(px)) {
      float go = self.grad[0] / static_cast<float>(n);
      for (auto& v : *g) v += go;
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  same_shape_check("mse", a, b);
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - bv[i];
    acc += d * d;
  }
  int64_t n = a.numel();
  acc /= static_cast<double>(n);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_op("mse", {1}, {static_cast<float>(acc)}, {a, b}, [pa, pb, n](TensorNode& self) {
    float go = self.grad[0] * 2.0f / static_cast<float>(n);
    auto* ga = grad_of(pa);
    auto* gb = grad_of(pb);
    for (size_t i = 0; i < pa->value.size(); ++i) {
      float d = pa->value[i] - pb->value[i];
      if (ga) (*ga)[i] += go * d;
      if (gb) (*gb)[i] -= go * d;
    }
  });
}

Tensor masked_mse(const Tensor& a, const Tensor& b, const std::vector<float>& w) {
  same_shape_check("masked_mse", a, b);
  require(w.size() == a.node().value.size(), "masked_mse", "weight length mismatch");
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  double acc = 0.0, wsum = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - bv[i];
    acc += w[i] * d * d;
    wsum += w[i];
  }
  double denom = wsum > 0.0 ? wsum : 1.0;
  float loss = static_cast<float>(acc / denom);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_op("masked_mse", {1}, {loss}, {a, b}, [pa, pb, w, denom](TensorNode& self) {
    float go = self.grad[0] * 2.0f / static_cast<float>(denom);
    auto* ga = grad_of(pa);
    auto* gb = grad_of(pb);
    for (size_t i = 0; i < pa->value.size(); ++i) {
      float d = w[i] * (pa->value[i] - pb->value[i]);
      if (ga) (*ga)[i] += go * d;
      if (gb) (*gb)[i] -= go * d;
    }
  });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& ids,
                            const std::vector<float>& class_weights) {
  require(logits.ndim() == 2, "cross_entropy", "expects [M,C] logits");
  int64_t M = logits.dim(0), C = logits.dim(1);
  require(static_cast<int64_t>(ids.size()) == M, "cross_entropy", "target count mismatch");
  std::vector<float> cw = class_weights;
  if (cw.empty()) cw.assign(static_cast<size_t>(C), 1.0f);
  require(static_cast<int64_t>(cw.size()) == C, "cross_entropy", "class weight count mismatch");

  const auto& lv = logits.node().value;
  double acc = 0.0, wsum = 0.0;
  for (int64_t i = 0; i < M; ++i) {
    int id = ids[static_cast<size_t>(i)];
    require(id >= 0 && id < C, "cross_entropy", "target id out of range");
    const float* row = lv.data() + i * C;
    float mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double se = 0.0;
    for (int64_t c = 0; c < C; ++c) se += std::exp(static_cast<double>(row[c]) - mx);
    double lse = mx + std::log(se);
    double w = cw[static_cast<size_t>(id)];
    acc += w * (lse - row[id]);
    wsum += w;
  }
  double denom = wsum > 0.0 ? wsum : 1.0;
  auto pl = logits.node_ptr();
  return make_op("cross_entropy", {1}, {static_cast<float>(acc / denom)}, {logits},
                 [pl, ids, cw, M, C, denom](TensorNode& self) {
                   if (auto* g = grad_of(pl)) {
                     float go = self.grad[0] / static_cast<float>(denom);
                     for (int64_t i = 0; i < M; ++i) {
                       int id = ids[static_cast<size_t>(i)];
                       float w = cw[static_cast<size_t>(id)];
                       const float* row = pl->value.data() + i * C;
                       float mx = row[0];
                       for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
                       double se = 0.0;
                       for (int64_t c = 0; c < C; ++c) se += std::exp(static_cast<double>(row[c]) - mx);
                       float* gr = g->data() + i * C;
                       for (int64_t c = 0; c < C; ++c) {
                         float p = static_cast<float>(std::exp(static_cast<double>(row[c]) - mx) / se);
                         gr[c] += go * w * (p - (c == id ? 1.0f : 0.0f));
                       }
                     }
                   }
                 });
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  require(table.ndim() == 2, "embedding", "expects [K,C] table");
  int64_t K = table.dim(0), C = table.dim(1);
  int64_t M = static_cast<int64_t>(ids.size());
  std::vector<float> out(static_cast<size_t>(M * C));
  const auto& tv = table.node().value;
  for (int64_t i = 0; i < M; ++i) {
    int id = ids[static_cast<size_t>(i)];
    require(id >= 0 && id < K, "embedding", "id out of range");
    std::copy(tv.data() + id * C, tv.data() + (id + 1) * C, out.data() + i * C);
  }
  auto pt = table.node_ptr();
  return make_op("embedding", {static_cast<int>(M), static_cast<int>(C)}, std::move(out), {table},
                 [pt, ids, C](TensorNode& self) {
                   if (auto* g = grad_of(pt)) {
                     for (size_t i = 0; i < ids.size(); ++i) {
                       const float* sg = self.grad.data() + static_cast<int64_t>(i) * C;
                       float* dg = g->data() + static_cast<int64_t>(ids[i]) * C;
                       for (int64_t c = 0; c < C; ++c) dg[c] += sg[c];
                     }
                   }
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  require(x.ndim() == 2, "gather_rows", "expects [M,C]");
  int64_t M = x.dim(0), C = x.dim(1);
  std::vector<float> out(idx.size() * static_cast<size_t>(C));
  const auto& xv = x.node().value;
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < M, "gather_rows", "index out of range");
    std::copy(xv.data() + static_cast<int64_t>(idx[i]) * C, xv.data() + static_cast<int64_t>(idx[i] + 1) * C,
              out.data() + static_cast<int64_t>(i) * C);
  }
  auto px = x.node_ptr();
  return make_op("gather_rows", {static_cast<int>(idx.size()), static_cast<int>(C)}, std::move(out), {x},
                 [px, idx, C](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (size_t i = 0; i < idx.size(); ++i) {
                       const float* sg = self.grad.data() + static_cast<int64_t>(i) * C;
                       float* dg = g->data() + static_cast<int64_t>(idx[i]) * C;
                       for (int64_t c = 0; c < C; ++c) dg[c] += sg[c];
                     }
                   }
                 });
}

Tensor scatter_rows_add(const Tensor& base, const Tensor& rows, const std::vector<int>& idx) {
  require(base.ndim() == 2 && rows.ndim() == 2, "scatter_rows_add", "expects 2-d tensors");
  int64_t C = base.dim(1);
  require(rows.dim(1) == C, "scatter_rows_add", "feature width mismatch");
  require(static_cast<size_t>(rows.dim(0)) == idx.size(), "scatter_rows_add", "row count mismatch");
  std::vector<float> out(base.node().value);
  const auto& rv = rows.node().value;
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < base.dim(0), "scatter_rows_add", "index out of range");
    float* dst = out.data() + static_cast<int64_t>(idx[i]) * C;
    const float* src = rv.data() + static_cast<int64_t>(i) * C;
    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
  }
  auto pb = base.node_ptr(), pr = rows.node_ptr();
  return make_op("scatter_rows_add", base.shape(), std::move(out), {base, rows},
                 [pb, pr, idx, C](TensorNode& self) {
                   if (auto* g = grad_of(pb))
                     for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                   if (auto* g = grad_of(pr)) {
                     for (size_t i = 0; i < idx.size(); ++i) {
                       const float* sg = self.grad.data() + static_cast<int64_t>(idx[i]) * C;
                       float* dg = g->data() + static_cast<int64_t>(i) * C;
                       for (int64_t c = 0; c < C; ++c) dg[c] += sg[c];
                     }
                   }
                 });
}

Tensor add_channels_nc(const Tensor& x, const Tensor& e) {
  require(x.ndim() >= 2 && e.ndim() == 2, "add_channels_nc", "expects x[N,C,...] and e[N,C]");
  int N = x.dim(0), C = x.dim(1);
  require(e.dim(0) == N && e.dim(1) == C, "add_channels_nc", "shape mismatch");
  int64_t S = x.numel() / (static_cast<int64_t>(N) * C);
  const auto& xv = x.node().value;
  const auto& ev = e.node().value;
  std::vector<float> out(xv.size());
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    float add = ev[static_cast<size_t>(nc)];
    for (int64_t i = 0; i < S; ++i) out[static_cast<size_t>(nc * S + i)] = xv[static_cast<size_t>(nc * S + i)] + add;
  }
  auto px = x.node_ptr(), pe = e.node_ptr();
  return make_op("add_channels_nc", x.shape(), std::move(out), {x, e}, [px, pe, N, C, S](TensorNode& self) {
    if (auto* g = grad_of(px))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(pe)) {
      for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        double acc = 0.0;
        for (int64_t i = 0; i < S; ++i) acc += self.grad[static_cast<size_t>(nc * S + i)];
        (*g)[static_cast<size_t>(nc)] += static_cast<float>(acc);
      }
    }
  });
}

Tensor repeat_interleave0(const Tensor& x, int times) {
  require(x.ndim() >= 1 && times >= 1, "repeat_interleave0", "bad arguments");
  int B = x.dim(0);
  int64_t inner = x.numel() / B;
  Shape out_shape = x.shape();
  out_shape[0] = B * times;
  std::vector<float> out(static_cast<size_t>(x.numel()) * times);
  const float* src = x.node().value.data();
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < times; ++t)
      std::copy(src + b * inner, src + (b + 1) * inner,
                out.data() + (static_cast<int64_t>(b) * times + t) * inner);
  auto px = x.node_ptr();
  return make_op("repeat_interleave0", out_shape, std::move(out), {x},
                 [px, B, times, inner](TensorNode& self) {
                   if (auto* g = grad_of(px)) {
                     for (int b = 0; b < B; ++b)
                       for (int t = 0; t < times; ++t) {
                         const float* sg = self.grad.data() + (static_cast<int64_t>(b) * times + t) * inner;
                         float* dg = g->data() + b * inner;
                         for (int64_t i = 0; i < inner; ++i) dg[i] += sg[i];
                       }
                   }
                 });
}

Tensor depth_gate_sum(const Tensor& f, const Tensor& gate) {
  require(f.ndim() == 4 && gate.ndim() == 2, "depth_gate_sum", "expects f[C,D,H,W], gate[C,D]");
  int C = f.dim(0), D = f.dim(1), H = f.dim(2), W = f.dim(3);
  require(gate.dim(0) == C && gate.dim(1) == D, "depth_gate_sum", "gate shape mismatch");
  int64_t plane = static_cast<int64_t>(H) * W;
  const auto& fv = f.node().value;
  const auto& gv = gate.node().value;
  std::vector<float> out(static_cast<size_t>(C) * plane, 0.0f);
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < D; ++d) {
      float gval = gv[static_cast<size_t>(c) * D + d];
      const float* src = fv.data() + (static_cast<int64_t>(c) * D + d) * plane;
      float* dst = out.data() + static_cast<int64_t>(c) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] += gval * src[i];
    }
  auto pf = f.node_ptr(), pg = gate.node_ptr();
  return make_op("depth_gate_sum", {C, H, W}, std::move(out), {f, gate},
                 [pf, pg, C, D, plane](TensorNode& self) {
                   auto* gf = grad_of(pf);
                   auto* gg = grad_of(pg);
                   for (int c = 0; c < C; ++c)
                     for (int d = 0; d < D; ++d) {
                       float gval = pg->value[static_cast<size_t>(c) * D + d];
                       const float* go = self.grad.data() + static_cast<int64_t>(c) * plane;
                       const float* src = pf->value.data() + (static_cast<int64_t>(c) * D + d) * plane;
                       if (gf) {
                         float* dst = gf->data() + (static_cast<int64_t>(c) * D + d) * plane;
                         for (int64_t i = 0; i < plane; ++i) dst[i] += gval * go[i];
                       }
                       if (gg) {
                         double acc = 0.0;
                         for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(go[i]) * src[i];
                         (*gg)[static_cast<size_t>(c) * D + d] += static_cast<float>(acc);
                       }
                     }
                 });
}

Tensor fourier_embed(double x, int n_freqs) {
  if (!std::isfinite(x)) throw NumericError("fourier_embed: non-finite input");
  require(n_freqs >= 1, "fourier_embed", "n_freqs must be >= 1");
  std::vector<float> out(static_cast<size_t>(2 * n_freqs));
  double omega = 3.14159265358979323846;
  for (int k = 0; k < n_freqs; ++k) {
    out[static_cast<size_t>(2 * k)] = static_cast<float>(std::sin(omega * x));
    out[static_cast<size_t>(2 * k + 1)] = static_cast<float>(std::cos(omega * x));
    omega *= 2.0;
  }
  return Tensor::from_data({2 * n_freqs}, std::move(out));
}

Tensor trilinear_sample(const Tensor& volume, const std::vector<double>& points) {
  require(volume.ndim() == 4, "trilinear_sample", "expects [C,Z,H,W]");
  require(points.size() % 3 == 0, "trilinear_sample", "points must be P*3 values");
  int C = volume.dim(0), Z = volume.dim(1), H = volume.dim(2), W = volume.dim(3);
  int64_t P = static_cast<int64_t>(points.size() / 3);
  int64_t plane = static_cast<int64_t>(Z) * H * W;
  const auto& vv = volume.node().value;

  // Per point: 8 corner offsets + weights; empty when out of range.
  struct CornerSet {
    int64_t idx[8];
    float w[8];
    int count = 0;
  };
  auto corners = std::make_shared<std::vector<CornerSet>>(static_cast<size_t>(P));
  std::vector<float> out(static_cast<size_t>(P) * C, 0.0f);
  for (int64_t p = 0; p < P; ++p) {
    double z = points[static_cast<size_t>(3 * p)];
    double y = points[static_cast<size_t>(3 * p + 1)];
    double x = points[static_cast<size_t>(3 * p + 2)];
    if (!(z >= 0.0 && z <= Z - 1 && y >= 0.0 && y <= H - 1 && x >= 0.0 && x <= W - 1)) continue;
    int z0 = std::min(static_cast<int>(z), Z - 2 < 0 ? 0 : Z - 2);
    int y0 = std::min(static_cast<int>(y), H - 2 < 0 ? 0 : H - 2);
    int x0 = std::min(static_cast<int>(x), W - 2 < 0 ? 0 : W - 2);
    double fz = z - z0, fy = y - y0, fx = x - x0;
    CornerSet& cs = (*corners)[static_cast<size_t>(p)];
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int zi = z0 + dz, yi = y0 + dy, xi = x0 + dx;
          if (zi >= Z || yi >= H || xi >= W) continue;
          double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
          if (w == 0.0) continue;
          cs.idx[cs.count] = (static_cast<int64_t>(zi) * H + yi) * W + xi;
          cs.w[cs.count] = static_cast<float>(w);
          cs.count++;
        }
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      const float* chan = vv.data() + static_cast<int64_t>(c) * plane;
      for (int k = 0; k < cs.count; ++k) acc += static_cast<double>(cs.w[k]) * chan[cs.idx[k]];
      out[static_cast<size_t>(p * C + c)] = static_cast<float>(acc);
    }
  }
  auto pv = volume.node_ptr();
  return make_op("trilinear_sample", {static_cast<int>(P), C}, std::move(out), {volume},
                 [pv, corners, P, C, plane](TensorNode& self) {
                   if (auto* g = grad_of(pv)) {
                     for (int64_t p = 0; p < P; ++p) {
                       const CornerSet& cs = (*corners)[static_cast<size_t>(p)];
                       for (int c = 0; c < C; ++c) {
                         float go = self.grad[static_cast<size_t>(p * C + c)];
                         if (go == 0.0f) continue;
                         float* chan = g->data() + static_cast<int64_t>(c) * plane;
                         for (int k = 0; k < cs.count; ++k) chan[cs.idx[k]] += cs.w[k] * go;
                       }
                     }
                   }
                 });
}

Tensor sparse_conv3d(const Tensor& x, const std::vector<uint8_t>& mask,
                     const Tensor& w, const Tensor& b) {
  require(x.ndim() == 4 && w.ndim() == 5, "sparse_conv3d", "expects x[C,Z,H,W], w[O,C,3,3,3]");
  int C = x.dim(0), Z = x.dim(1), H = x.dim(2), W = x.dim(3);
  int O = w.dim(0);
  require(w.dim(1) == C && w.dim(2) == 3 && w.dim(3) == 3 && w.dim(4) == 3, "sparse_conv3d", "kernel must be [O,C,3,3,3]");
  int64_t vox = static_cast<int64_t>(Z) * H * W;
  require(static_cast<int64_t>(mask.size()) == vox, "sparse_conv3d", "mask size mismatch");
  if (b.defined()) require(b.numel() == O, "sparse_conv3d", "bias mismatch");

  // Gather (site, kernel-slot, neighbor) triples once; forward and backward share them.
  struct Link {
    int64_t site;
    int64_t neighbor;
    int slot;
  };
  auto sites = std::make_shared<std::vector<int64_t>>();
  auto links = std::make_shared<std::vector<Link>>();
  for (int z = 0; z < Z; ++z)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        int64_t s = (static_cast<int64_t>(z) * H + y) * W + xx;
        if (!mask[static_cast<size_t>(s)]) continue;
        sites->push_back(s);
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              int nz = z + dz, ny = y + dy, nx = xx + dx;
              if (nz < 0 || nz >= Z || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
              int64_t n = (static_cast<int64_t>(nz) * H + ny) * W + nx;
              if (!mask[static_cast<size_t>(n)]) continue;
              links->push_back({s, n, ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1)});
            }
      }

  const auto& xv = x.node().value;
  const auto& wv = w.node().value;
  std::vector<float> out(static_cast<size_t>(O) * vox, 0.0f);
  for (const auto& ln : *links) {
    for (int o = 0; o < O; ++o) {
      const float* wrow = wv.data() + (static_cast<int64_t>(o) * C) * 27;
      float* dst = &out[static_cast<size_t>(o * vox + ln.site)];
      double acc = 0.0;
      for (int c = 0; c < C; ++c)
        acc += static_cast<double>(wrow[static_cast<int64_t>(c) * 27 + ln.slot]) * xv[static_cast<size_t>(c * vox + ln.neighbor)];
      *dst += static_cast<float>(acc);
    }
  }
  if (b.defined()) {
    const auto& bv = b.node().value;
    for (int o = 0; o < O; ++o)
      for (int64_t s : *sites) out[static_cast<size_t>(o * vox + s)] += bv[static_cast<size_t>(o)];
  }

  auto px = x.node_ptr(), pw = w.node_ptr();
  auto pb = b.defined() ? b.node_ptr() : nullptr;
  std::vector<Tensor> parents = {x, w};
  if (b.defined()) parents.push_back(b);
  return make_op("sparse_conv3d", {O, Z, H, W}, std::move(out), parents,
                 [px, pw, pb, sites, links, C, O, vox](TensorNode& self) {
                   auto* gx = grad_of(px);
                   auto* gw = grad_of(pw);
                   std::vector<float>* gb = pb ? grad_of(pb) : nullptr;
                   const auto& xv = px->value;
                   const auto& wv = pw->value;
                   for (const auto& ln : *links) {
                     for (int o = 0; o < O; ++o) {
                       float go = self.grad[static_cast<size_t>(o * vox + ln.site)];
                       if (go == 0.0f) continue;
                       for (int c = 0; c < C; ++c) {
                         int64_t widx = (static_cast<int64_t>(o) * C + c) * 27 + ln.slot;
                         if (gx) (*gx)[static_cast<size_t>(c * vox + ln.neighbor)] += wv[static_cast<size_t>(widx)] * go;
                         if (gw) (*gw)[static_cast<size_t>(widx)] += xv[static_cast<size_t>(c * vox + ln.neighbor)] * go;
                       }
                     }
                   }
                   if (gb) {
                     for (int o = 0; o < O; ++o) {
                       double acc = 0.0;
                       for (int64_t s : *sites) acc += self.grad[static_cast<size_t>(o * vox + s)];
                       (*gb)[static_cast<size_t>(o)] += static_cast<float>(acc);
                     }
                   }
                 });
}

}  // namespace worldgen
