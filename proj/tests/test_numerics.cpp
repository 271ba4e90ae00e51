#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "worldgen/nn.hpp"
#include "worldgen/ops.hpp"

using namespace worldgen;
using worldgen::testing::gradcheck;

namespace {

Tensor rand_t(const Shape& s, Rng& rng, bool rg = true) { return Tensor::randn(s, rng, 1.0f, rg); }

double max_rel_over_trials(const std::function<double(Rng&)>& trial, uint64_t seed, int n = 10) {
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    Rng rng(seed + static_cast<uint64_t>(i));
    worst = std::max(worst, trial(rng));
  }
  return worst;
}

}  // namespace

TEST_CASE("fourier_embed analytic values") {
  Tensor a = fourier_embed(0.0, 2);
  CHECK(a.at(0) == doctest::Approx(0.0));
  CHECK(a.at(1) == doctest::Approx(1.0));
  CHECK(a.at(2) == doctest::Approx(0.0));
  CHECK(a.at(3) == doctest::Approx(1.0));

  Tensor b = fourier_embed(0.5, 1);
  CHECK(b.at(0) == doctest::Approx(1.0));
  CHECK(b.at(1) == doctest::Approx(0.0).epsilon(1e-6));

  // independent per-component transcendental evaluation
  Tensor c = fourier_embed(0.3, 4);
  double pi = 3.14159265358979323846;
  for (int k = 0; k < 4; ++k) {
    double w = std::pow(2.0, k) * pi;
    CHECK(c.at(2 * k) == doctest::Approx(std::sin(w * 0.3)).epsilon(1e-6));
    CHECK(c.at(2 * k + 1) == doctest::Approx(std::cos(w * 0.3)).epsilon(1e-6));
  }

  CHECK_THROWS_AS(fourier_embed(std::nan(""), 2), NumericError);
}

TEST_CASE("group_norm moments and affine behavior") {
  Rng rng(7);
  Tensor gamma = Tensor::full({8}, 1.0f);
  Tensor beta = Tensor::zeros({8});

  // constant input -> zero output
  Tensor c = Tensor::full({2, 8, 3}, 5.0f);
  Tensor out = group_norm(c, 2, 1e-5f, gamma, beta);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::abs(out.at(i)) < 1e-4);

  // scale=0, shift=b -> constant b
  Tensor g0 = Tensor::zeros({8});
  Tensor b2 = Tensor::full({8}, 2.5f);
  Tensor x = rand_t({2, 8, 4, 4}, rng, false);
  Tensor out2 = group_norm(x, 2, 1e-5f, g0, b2);
  for (int64_t i = 0; i < out2.numel(); ++i) CHECK(out2.at(i) == doctest::Approx(2.5f));

  // recompute per-group moments directly
  Tensor out3 = group_norm(x, 2, 1e-6f, gamma, beta);
  int cpg = 4, S = 16;
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      double m = 0, v = 0;
      for (int c2 = 0; c2 < cpg; ++c2)
        for (int s = 0; s < S; ++s) m += out3.at(((n * 8) + g * cpg + c2) * S + s);
      m /= cpg * S;
      for (int c2 = 0; c2 < cpg; ++c2)
        for (int s = 0; s < S; ++s) {
          double d = out3.at(((n * 8) + g * cpg + c2) * S + s) - m;
          v += d * d;
        }
      v /= cpg * S;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(v - 1.0) < 1e-4);
    }

  // invariance to per-group affine input transform (a>0) before learned affine
  Tensor gamma_r = rand_t({8}, rng, false);
  Tensor beta_r = rand_t({8}, rng, false);
  Tensor y1 = group_norm(x, 2, 1e-6f, gamma_r, beta_r);
  std::vector<float> xs(x.values().begin(), x.values().end());
  // group 0 -> 3x+1, group 1 -> 0.5x-2
  for (int n = 0; n < 2; ++n)
    for (int c2 = 0; c2 < 8; ++c2)
      for (int s = 0; s < S; ++s) {
        size_t i = static_cast<size_t>((n * 8 + c2) * S + s);
        xs[i] = c2 < 4 ? 3.0f * xs[i] + 1.0f : 0.5f * xs[i] - 2.0f;
      }
  Tensor y2 = group_norm(Tensor::from_data({2, 8, 4, 4}, xs), 2, 1e-6f, gamma_r, beta_r);
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == doctest::Approx(y2.at(i)).epsilon(1e-5));

  CHECK_THROWS_AS(group_norm(x, 3, 1e-5f, gamma, beta), ShapeError);
}

TEST_CASE("attention oracle cases") {
  Rng rng(11);
  int C = 4, heads = 2;
  ParamStore ps;
  MultiHeadAttention mha(ps, "attn", C, heads, rng);

  SUBCASE("single kv token: weights are exactly 1, output is the projected value") {
    Tensor q = rand_t({1, 3, C}, rng, false);
    Tensor kv = rand_t({1, 1, C}, rng, false);
    Tensor out = attention(q, kv, heads, mha);
    // expected: wo * (wv * kv) for every query position
    std::vector<float> v(C), o(C);
    for (int n = 0; n < C; ++n) {
      double acc = 0;
      for (int k = 0; k < C; ++k) acc += mha.wv.at(n * C + k) * kv.at(k);
      v[static_cast<size_t>(n)] = static_cast<float>(acc);
    }
    for (int n = 0; n < C; ++n) {
      double acc = 0;
      for (int k = 0; k < C; ++k) acc += mha.wo.at(n * C + k) * v[static_cast<size_t>(k)];
      o[static_cast<size_t>(n)] = static_cast<float>(acc);
    }
    for (int l = 0; l < 3; ++l)
      for (int n = 0; n < C; ++n) CHECK(out.at(l * C + n) == doctest::Approx(o[static_cast<size_t>(n)]).epsilon(1e-5));
  }

  SUBCASE("identical keys give uniform weights regardless of query") {
    // zero the key projection; every key collapses to the same vector
    ParamStore ps2;
    Rng rng2(12);
    MultiHeadAttention m2(ps2, "attn", C, heads, rng2);
    for (auto& w : m2.wk.values_mut()) w = 0.0f;
    Tensor q = rand_t({1, 3, C}, rng, false);
    Tensor kv = rand_t({1, 5, C}, rng, false);
    Tensor out = attention(q, kv, heads, m2);
    // expected output: wo * (wv * mean(kv))
    std::vector<float> mean_kv(static_cast<size_t>(C), 0.0f);
    for (int l = 0; l < 5; ++l)
      for (int c = 0; c < C; ++c) mean_kv[static_cast<size_t>(c)] += kv.at(l * C + c) / 5.0f;
    std::vector<float> v(C), o(C);
    for (int n = 0; n < C; ++n) {
      double acc = 0;
      for (int k = 0; k < C; ++k) acc += m2.wv.at(n * C + k) * mean_kv[static_cast<size_t>(k)];
      v[static_cast<size_t>(n)] = static_cast<float>(acc);
    }
    for (int n = 0; n < C; ++n) {
      double acc = 0;
      for (int k = 0; k < C; ++k) acc += m2.wo.at(n * C + k) * v[static_cast<size_t>(k)];
      o[static_cast<size_t>(n)] = static_cast<float>(acc);
    }
    for (int l = 0; l < 3; ++l)
      for (int n = 0; n < C; ++n) CHECK(out.at(l * C + n) == doctest::Approx(o[static_cast<size_t>(n)]).epsilon(1e-4));
  }

  SUBCASE("straight-line scalar-loop reference, B=1 L=3 C=4 heads=2") {
    Tensor x = rand_t({1, 3, C}, rng, false);
    Tensor out = attention(x, x, heads, mha);
    int dh = C / heads;
    auto proj = [&](const Tensor& w, int l, int c) {
      double acc = 0;
      for (int k = 0; k < C; ++k) acc += w.at(c * C + k) * x.at(l * C + k);
      return acc;
    };
    std::vector<double> expect(3 * static_cast<size_t>(C), 0.0);
    std::vector<double> concat_heads(3 * static_cast<size_t>(C), 0.0);
    for (int h = 0; h < heads; ++h) {
      for (int lq = 0; lq < 3; ++lq) {
        double logits[3];
        for (int lk = 0; lk < 3; ++lk) {
          double dot = 0;
          for (int d = 0; d < dh; ++d) dot += proj(mha.wq, lq, h * dh + d) * proj(mha.wk, lk, h * dh + d);
          logits[lk] = dot / std::sqrt(static_cast<double>(dh));
        }
        double mx = std::max({logits[0], logits[1], logits[2]});
        double se = 0;
        for (double& l : logits) {
          l = std::exp(l - mx);
          se += l;
        }
        for (int d = 0; d < dh; ++d) {
          double acc = 0;
          for (int lk = 0; lk < 3; ++lk) acc += logits[lk] / se * proj(mha.wv, lk, h * dh + d);
          concat_heads[static_cast<size_t>(lq * C + h * dh + d)] = acc;
        }
      }
    }
    for (int lq = 0; lq < 3; ++lq)
      for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int k = 0; k < C; ++k) acc += mha.wo.at(c * C + k) * concat_heads[static_cast<size_t>(lq * C + k)];
        expect[static_cast<size_t>(lq * C + c)] = acc;
      }
    for (size_t i = 0; i < expect.size(); ++i) CHECK(out.at(static_cast<int64_t>(i)) == doctest::Approx(expect[i]).epsilon(1e-4));
  }

  SUBCASE("kv permutation invariance within 1e-6") {
    Tensor q = rand_t({2, 3, C}, rng, false);
    Tensor kv = rand_t({2, 5, C}, rng, false);
    Tensor o1 = attention(q, kv, heads, mha);
    // permute kv rows (reversal)
    std::vector<float> perm(kv.values().begin(), kv.values().end());
    for (int b = 0; b < 2; ++b)
      for (int l = 0; l < 5; ++l)
        for (int c = 0; c < C; ++c)
          perm[static_cast<size_t>((b * 5 + l) * C + c)] = kv.at((b * 5 + (4 - l)) * C + c);
    Tensor o2 = attention(q, Tensor::from_data({2, 5, C}, perm), heads, mha);
    for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.at(i) == doctest::Approx(o2.at(i)).epsilon(1e-6));
  }

  SUBCASE("query permutation equivariance") {
    Tensor q = rand_t({1, 4, C}, rng, false);
    Tensor kv = rand_t({1, 5, C}, rng, false);
    Tensor o1 = attention(q, kv, heads, mha);
    std::vector<float> qp(q.values().begin(), q.values().end());
    std::vector<int> p = {2, 0, 3, 1};
    for (int l = 0; l < 4; ++l)
      for (int c = 0; c < C; ++c) qp[static_cast<size_t>(l * C + c)] = q.at(p[static_cast<size_t>(l)] * C + c);
    Tensor o2 = attention(Tensor::from_data({1, 4, C}, qp), kv, heads, mha);
    for (int l = 0; l < 4; ++l)
      for (int c = 0; c < C; ++c)
        CHECK(o2.at(l * C + c) == doctest::Approx(o1.at(p[static_cast<size_t>(l)] * C + c)).epsilon(1e-6));
  }

  CHECK_THROWS_AS(attention(rand_t({1, 3, 4}, rng, false), rand_t({1, 3, 6}, rng, false), 2, mha), ShapeError);
}

TEST_CASE("conv2d oracle cases") {
  Rng rng(21);
  SUBCASE("1x1 identity kernel") {
    Tensor x = rand_t({1, 1, 4, 4}, rng, false);
    Tensor w = Tensor::full({1, 1, 1, 1}, 1.0f);
    Tensor out = conv2d(x, w, Tensor(), 1, 0);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.at(i) == x.at(i));
  }
  SUBCASE("all-ones 3x3 on all-ones 3x3 input, no padding") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
    Tensor out = conv2d(x, w, Tensor(), 1, 0);
    CHECK(out.numel() == 1);
    CHECK(out.at(0) == doctest::Approx(9.0f));
  }
  SUBCASE("random input vs sextuple-loop oracle") {
    Tensor x = rand_t({1, 2, 5, 5}, rng, false);
    Tensor w = rand_t({3, 2, 3, 3}, rng, false);
    Tensor b = rand_t({3}, rng, false);
    int stride = 1, pad = 1;
    Tensor out = conv2d(x, w, b, stride, pad);
    for (int o = 0; o < 3; ++o)
      for (int oy = 0; oy < 5; ++oy)
        for (int ox = 0; ox < 5; ++ox) {
          double acc = b.at(o);
          for (int c = 0; c < 2; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                acc += x.at((c * 5 + iy) * 5 + ix) * w.at(((o * 2 + c) * 3 + ky) * 3 + kx);
              }
          CHECK(out.at((o * 5 + oy) * 5 + ox) == doctest::Approx(acc).epsilon(1e-6));
        }
  }
  SUBCASE("stride-2 output extent") {
    Tensor x = rand_t({1, 1, 8, 8}, rng, false);
    Tensor w = rand_t({1, 1, 3, 3}, rng, false);
    Tensor out = conv2d(x, w, Tensor(), 2, 1);
    CHECK(out.shape() == Shape{1, 1, 4, 4});
  }
}

TEST_CASE("conv3d matches loop oracle") {
  Rng rng(23);
  Tensor x = rand_t({1, 2, 3, 4, 4}, rng, false);
  Tensor w = rand_t({2, 2, 3, 3, 3}, rng, false);
  Tensor b = rand_t({2}, rng, false);
  Tensor out = conv3d(x, w, b, 1, 1, 1, 1, 1, 1);
  REQUIRE(out.shape() == Shape{1, 2, 3, 4, 4});
  for (int o = 0; o < 2; ++o)
    for (int oz = 0; oz < 3; ++oz)
      for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox) {
          double acc = b.at(o);
          for (int c = 0; c < 2; ++c)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  int iz = oz - 1 + kz, iy = oy - 1 + ky, ix = ox - 1 + kx;
                  if (iz < 0 || iz >= 3 || iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                  acc += x.at(((c * 3 + iz) * 4 + iy) * 4 + ix) *
                         w.at((((o * 2 + c) * 3 + kz) * 3 + ky) * 3 + kx);
                }
          CHECK(out.at(((o * 3 + oz) * 4 + oy) * 4 + ox) == doctest::Approx(acc).epsilon(1e-5));
        }
}

TEST_CASE("trilinear_sample contract") {
  Rng rng(31);
  Tensor vol = rand_t({3, 4, 4, 4}, rng, false);
  SUBCASE("exact voxel center returns that voxel") {
    Tensor out = trilinear_sample(vol, {2.0, 1.0, 3.0});
    for (int c = 0; c < 3; ++c) CHECK(out.at(c) == vol.at(((c * 4 + 2) * 4 + 1) * 4 + 3));
  }
  SUBCASE("midpoint between axis-adjacent voxels averages them") {
    Tensor out = trilinear_sample(vol, {1.0, 2.0, 1.5});
    for (int c = 0; c < 3; ++c) {
      float u = vol.at(((c * 4 + 1) * 4 + 2) * 4 + 1);
      float v = vol.at(((c * 4 + 1) * 4 + 2) * 4 + 2);
      CHECK(out.at(c) == doctest::Approx(0.5f * (u + v)));
    }
  }
  SUBCASE("out-of-bounds returns zero vector") {
    Tensor out = trilinear_sample(vol, {-1.0, -1.0, -1.0, 3.5, 3.0, 3.0});
    for (int c = 0; c < 3; ++c) CHECK(out.at(c) == 0.0f);
    // second point is over the z edge (3.5 > Z-1=3)
    for (int c = 0; c < 3; ++c) CHECK(out.at(3 + c) == 0.0f);
  }
  SUBCASE("boundary point z=Z-1 is inside") {
    Tensor out = trilinear_sample(vol, {3.0, 0.0, 0.0});
    for (int c = 0; c < 3; ++c) CHECK(out.at(c) == vol.at(((c * 4 + 3) * 4 + 0) * 4 + 0));
  }
}

TEST_CASE("backward basics") {
  Rng rng(41);
  SUBCASE("loss = sum(x) gives all-ones grad") {
    Tensor x = rand_t({3, 4}, rng);
    sum(x).backward();
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 1.0f);
  }
  SUBCASE("loss = sum(x*x) gives 2x") {
    Tensor x = rand_t({3, 4}, rng);
    sum(mul(x, x)).backward();
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(x.grad()[static_cast<size_t>(i)] == doctest::Approx(2.0f * x.at(i)));
  }
  SUBCASE("grad accumulates across backward calls") {
    Tensor x = rand_t({2, 2}, rng);
    sum(x).backward();
    sum(x).backward();
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 2.0f);
  }
  SUBCASE("backward on non-scalar throws") {
    Tensor x = rand_t({2, 2}, rng);
    CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);
  }
}

TEST_CASE("finite-difference gradient suite") {
  const double tol = 1e-3;

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return silu(in[0]); };
          return gradcheck(f, {rand_t({3, 5}, rng)}, rng);
        }, 100) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return sigmoid(in[0]); };
          return gradcheck(f, {rand_t({3, 5}, rng)}, rng);
        }, 200) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); };
          return gradcheck(f, {rand_t({4, 3}, rng), rand_t({4, 3}, rng)}, rng);
        }, 300) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); };
          return gradcheck(f, {rand_t({3, 4}, rng), rand_t({5, 4}, rng), rand_t({5}, rng)}, rng);
        }, 400) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return bmm(in[0], in[1], true); };
          return gradcheck(f, {rand_t({2, 3, 4}, rng), rand_t({2, 5, 4}, rng)}, rng);
        }, 500) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return softmax_lastdim(in[0]); };
          return gradcheck(f, {rand_t({3, 6}, rng)}, rng);
        }, 600) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 2, 1); };
          return gradcheck(f, {rand_t({2, 2, 5, 5}, rng), rand_t({3, 2, 3, 3}, rng), rand_t({3}, rng)}, rng);
        }, 700) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return conv3d(in[0], in[1], in[2], 2, 1, 1, 1, 1, 1); };
          return gradcheck(f, {rand_t({1, 2, 4, 4, 4}, rng), rand_t({2, 2, 3, 3, 3}, rng), rand_t({2}, rng)}, rng);
        }, 800) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return group_norm(in[0], 2, 1e-5f, in[1], in[2]); };
          return gradcheck(f, {rand_t({2, 4, 3, 3}, rng), rand_t({4}, rng), rand_t({4}, rng)}, rng);
        }, 900) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          ParamStore ps;
          MultiHeadAttention mha(ps, "a", 4, 2, rng);
          auto f = [&](const std::vector<Tensor>& in) { return attention(in[0], in[1], 2, mha); };
          return gradcheck(f, {rand_t({2, 3, 4}, rng), rand_t({2, 4, 4}, rng)}, rng);
        }, 1000) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          ParamStore ps;
          MultiHeadAttention mha(ps, "a", 4, 2, rng);
          auto f = [&](const std::vector<Tensor>& in) {
            MultiHeadAttention m;
            m.wq = in[2];
            m.wk = in[3];
            m.wv = in[4];
            m.wo = in[5];
            m.heads = 2;
            return attention(in[0], in[1], 2, m);
          };
          return gradcheck(f, {rand_t({1, 3, 4}, rng), rand_t({1, 2, 4}, rng), rand_t({4, 4}, rng),
                               rand_t({4, 4}, rng), rand_t({4, 4}, rng), rand_t({4, 4}, rng)}, rng);
        }, 1050) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<double> pts = {0.5, 1.2, 0.7, -1.0, 0.0, 0.0, 2.0, 2.9, 1.4};
          auto f = [pts](const std::vector<Tensor>& in) { return trilinear_sample(in[0], pts); };
          return gradcheck(f, {rand_t({2, 3, 4, 4}, rng)}, rng);
        }, 1100) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<uint8_t> mask(3 * 3 * 3, 0);
          for (int i = 0; i < 27; i += 2) mask[static_cast<size_t>(i)] = 1;
          auto f = [mask](const std::vector<Tensor>& in) { return sparse_conv3d(in[0], mask, in[1], in[2]); };
          return gradcheck(f, {rand_t({2, 3, 3, 3}, rng), rand_t({2, 2, 3, 3, 3}, rng), rand_t({2}, rng)}, rng);
        }, 1200) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return depth_gate_sum(in[0], sigmoid(in[1])); };
          return gradcheck(f, {rand_t({2, 3, 2, 2}, rng), rand_t({2, 3}, rng)}, rng);
        }, 1300) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<int> ids = {1, 0, 2, 1};
          auto f = [ids](const std::vector<Tensor>& in) { return embedding_gather(in[0], ids); };
          return gradcheck(f, {rand_t({3, 4}, rng)}, rng);
        }, 1400) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<int> idx = {3, 1};
          auto f = [idx](const std::vector<Tensor>& in) {
            return scatter_rows_add(in[0], gather_rows(in[1], idx), idx);
          };
          return gradcheck(f, {rand_t({4, 3}, rng), rand_t({4, 3}, rng)}, rng);
        }, 1500) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) {
            return concat({permute(in[0], {1, 0, 2}), slice(permute(in[1], {1, 0, 2}), 1, 0, 2)}, 1);
          };
          return gradcheck(f, {rand_t({2, 3, 4}, rng), rand_t({2, 3, 4}, rng)}, rng);
        }, 1600) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return upsample_nearest3d(in[0], 2, 2, 1); };
          return gradcheck(f, {rand_t({1, 2, 2, 2, 3}, rng)}, rng);
        }, 1700) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return add_channels_nc(in[0], in[1]); };
          return gradcheck(f, {rand_t({2, 3, 4}, rng), rand_t({2, 3}, rng)}, rng);
        }, 1800) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return repeat_interleave0(in[0], 3); };
          return gradcheck(f, {rand_t({2, 3, 2}, rng)}, rng);
        }, 1900) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<int> ids = {0, 2, 1, 2};
          std::vector<float> w = {1.0f, 2.0f, 0.5f};
          auto f = [ids, w](const std::vector<Tensor>& in) { return cross_entropy_logits(in[0], ids, w); };
          return gradcheck(f, {rand_t({4, 3}, rng)}, rng);
        }, 2000) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          std::vector<float> w(12, 0.0f);
          for (size_t i = 0; i < 12; i += 3) w[i] = 1.0f;
          auto f = [w](const std::vector<Tensor>& in) { return masked_mse(in[0], in[1], w); };
          return gradcheck(f, {rand_t({3, 4}, rng), rand_t({3, 4}, rng)}, rng);
        }, 2100) <= tol);

  CHECK(max_rel_over_trials([](Rng& rng) {
          auto f = [](const std::vector<Tensor>& in) { return mse(in[0], in[1]); };
          return gradcheck(f, {rand_t({3, 4}, rng), rand_t({3, 4}, rng)}, rng);
        }, 2200) <= tol);
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    ParamStore ps;
    MultiHeadAttention mha(ps, "a", 8, 2, rng);
    Tensor x = rand_t({2, 6, 8}, rng, false);
    Tensor o = attention(x, x, 2, mha);
    Tensor c = conv2d(reshape(o, {2, 8, 2, 3}), Tensor::full({4, 8, 1, 1}, 0.3f), Tensor(), 1, 0);
    return std::vector<float>(c.values().begin(), c.values().end());
  };
  auto a = run(5), b = run(5);
  CHECK(a == b);
}

TEST_CASE("NaN detection throws NumericError") {
  Tensor x = Tensor::full({2, 2}, 1e30f);
  CHECK_THROWS_AS(mul(x, x), NumericError);
}
