// Finite-difference checks of every layer kernel, in double precision.
#include <cmath>
#include <functional>

#include "doctest.h"
#include "versemi/nn.hpp"
#include "versemi/rng.hpp"

using namespace versemi;
using nn::ArrX;
using nn::Tensor4;

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

// central finite difference of f with respect to *x
double fd(const std::function<double()>& f, double* x, double eps = 1e-5) {
  const double x0 = *x;
  *x = x0 + eps;
  const double fp = f();
  *x = x0 - eps;
  const double fm = f();
  *x = x0;
  return (fp - fm) / (2.0 * eps);
}

Tensor4<double> random_tensor(int c, int d, int h, int w, Rng& rng) {
  Tensor4<double> t(c, d, h, w);
  for (std::int64_t i = 0; i < t.size(); ++i) t.v[i] = rng.normal();
  return t;
}

// brute-force cubic convolution
Tensor4<double> conv_reference(const nn::ConvSpec& cs, const ArrX<double>& params,
                               std::int64_t w_off, std::int64_t b_off,
                               const Tensor4<double>& x) {
  const int od = cs.out_dim(x.d), oh = cs.out_dim(x.h), ow = cs.out_dim(x.w);
  Tensor4<double> y(cs.cout, od, oh, ow);
  const auto widx = [&](int co, int ci, int kz, int ky, int kx) {
    const std::int64_t row = ((static_cast<std::int64_t>(ci) * cs.k + kz) * cs.k + ky) * cs.k + kx;
    return w_off + co * cs.patch_rows() + row;
  };
  for (int co = 0; co < cs.cout; ++co)
    for (int z = 0; z < od; ++z)
      for (int y_ = 0; y_ < oh; ++y_)
        for (int x_ = 0; x_ < ow; ++x_) {
          double acc = params[b_off + co];
          for (int ci = 0; ci < cs.cin; ++ci)
            for (int kz = 0; kz < cs.k; ++kz)
              for (int ky = 0; ky < cs.k; ++ky)
                for (int kx = 0; kx < cs.k; ++kx) {
                  int iz = z * cs.stride - cs.pad + kz;
                  int iy = y_ * cs.stride - cs.pad + ky;
                  int ix = x_ * cs.stride - cs.pad + kx;
                  if (cs.pad_mode == nn::PadMode::circular) {
                    iz = ((iz % x.d) + x.d) % x.d;
                    iy = ((iy % x.h) + x.h) % x.h;
                    ix = ((ix % x.w) + x.w) % x.w;
                  }
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= x.d || iy >= x.h || ix >= x.w) continue;
                  acc += params[widx(co, ci, kz, ky, kx)] * x.at(ci, iz, iy, ix);
                }
          y.at(co, z, y_, x_) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv3d forward equals the brute-force convolution") {
  Rng rng(11);
  for (const auto mode : {nn::PadMode::zero, nn::PadMode::circular}) {
    for (const auto [k, stride, pad] : {std::array<int, 3>{3, 1, 1}, std::array<int, 3>{2, 2, 0}}) {
      nn::ConvSpec cs{2, 3, k, stride, pad, mode};
      ArrX<double> params(cs.weight_count() + cs.bias_count());
      for (std::int64_t i = 0; i < params.size(); ++i) params[i] = rng.normal();
      const auto x = random_tensor(2, 4, 6, 4, rng);
      Tensor4<double> y;
      ArrX<double> col;
      nn::conv3d_forward(cs, params.data(), 0, cs.weight_count(), x, y, col);
      const auto ref = conv_reference(cs, params, 0, cs.weight_count(), x);
      REQUIRE(y.size() == ref.size());
      CHECK((y.v - ref.v).abs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("conv3d backward matches finite differences") {
  Rng rng(13);
  for (const auto mode : {nn::PadMode::zero, nn::PadMode::circular}) {
    nn::ConvSpec cs{2, 2, 3, 1, 1, mode};
    const std::int64_t np = cs.weight_count() + cs.bias_count();
    ArrX<double> params(np);
    for (std::int64_t i = 0; i < np; ++i) params[i] = rng.normal(0.0, 0.5);
    auto x = random_tensor(2, 4, 4, 4, rng);
    const auto r = random_tensor(2, 4, 4, 4, rng);  // fixed linear functional

    const auto loss = [&] {
      Tensor4<double> y;
      ArrX<double> col;
      nn::conv3d_forward(cs, params.data(), 0, cs.weight_count(), x, y, col);
      return (y.v * r.v).sum();
    };

    Tensor4<double> y;
    ArrX<double> col, col2;
    nn::conv3d_forward(cs, params.data(), 0, cs.weight_count(), x, y, col);
    Tensor4<double> gy = r;
    Tensor4<double> gx;
    ArrX<double> grads = ArrX<double>::Zero(np);
    nn::conv3d_backward(cs, params.data(), 0, cs.weight_count(), x, gy, &gx, grads.data(), col,
                        col2);

    for (int trial = 0; trial < 8; ++trial) {
      const auto i = rng.index(np);
      CHECK(rel_err(grads[i], fd(loss, &params[i])) < 1e-6);
      const auto j = rng.index(x.size());
      CHECK(rel_err(gx.v[j], fd(loss, &x.v[j])) < 1e-6);
    }
  }
}

TEST_CASE("upconv forward doubles resolution; backward matches finite differences") {
  Rng rng(17);
  nn::UpSpec us{3, 2};
  const std::int64_t np = us.weight_count() + us.bias_count();
  ArrX<double> params(np);
  for (std::int64_t i = 0; i < np; ++i) params[i] = rng.normal(0.0, 0.5);
  auto x = random_tensor(3, 2, 3, 2, rng);

  Tensor4<double> y;
  ArrX<double> tmp;
  nn::upconv_forward(us, params.data(), 0, us.weight_count(), x, y, tmp);
  CHECK(y.c == 2);
  CHECK(y.d == 4);
  CHECK(y.h == 6);
  CHECK(y.w == 4);

  // each output voxel = W_offset^T x(source) + b
  const int a = 1, b = 0, c = 1;
  const int o = (a << 2) | (b << 1) | c;
  double want = params[us.weight_count() + 1];  // bias of cout 1
  for (int ci = 0; ci < 3; ++ci)
    want += params[static_cast<std::int64_t>(o) * us.cin * us.cout + ci + us.cin * 1] *
            x.at(ci, 1, 2, 0);
  CHECK(y.at(1, 2 * 1 + a, 2 * 2 + b, 2 * 0 + c) == doctest::Approx(want).epsilon(1e-12));

  const auto r = random_tensor(2, 4, 6, 4, rng);
  const auto loss = [&] {
    Tensor4<double> yy;
    ArrX<double> t;
    nn::upconv_forward(us, params.data(), 0, us.weight_count(), x, yy, t);
    return (yy.v * r.v).sum();
  };
  Tensor4<double> gy = r, gx;
  ArrX<double> grads = ArrX<double>::Zero(np);
  nn::upconv_backward(us, params.data(), 0, us.weight_count(), x, gy, &gx, grads.data(), tmp);
  for (int trial = 0; trial < 8; ++trial) {
    const auto i = rng.index(np);
    CHECK(rel_err(grads[i], fd(loss, &params[i])) < 1e-6);
    const auto j = rng.index(x.size());
    CHECK(rel_err(gx.v[j], fd(loss, &x.v[j])) < 1e-6);
  }
}

TEST_CASE("instance norm: normalization and gradients") {
  Rng rng(19);
  const int C = 3;
  ArrX<double> params(2 * C);
  for (int i = 0; i < C; ++i) params[i] = rng.uniform(0.5, 1.5);       // gamma
  for (int i = C; i < 2 * C; ++i) params[i] = rng.uniform(-0.5, 0.5);  // beta
  auto x = random_tensor(C, 3, 4, 5, rng);

  Tensor4<double> y;
  nn::NormCache<double> cache;
  nn::instance_norm_forward(C, params.data(), 0, C, x, y, cache);
  for (int ch = 0; ch < C; ++ch) {
    const auto seg = y.v.segment(ch * x.spatial(), x.spatial());
    const double mu = (seg - params[C + ch]).mean() / params[ch];
    CHECK(std::abs(mu) < 1e-10);  // normalized mean is zero
  }

  const auto r = random_tensor(C, 3, 4, 5, rng);
  const auto loss = [&] {
    Tensor4<double> yy;
    nn::NormCache<double> cc;
    nn::instance_norm_forward(C, params.data(), 0, C, x, yy, cc);
    return (yy.v * r.v).sum();
  };
  Tensor4<double> gy = r, gx;
  ArrX<double> grads = ArrX<double>::Zero(2 * C);
  nn::instance_norm_backward(C, params.data(), 0, C, x, gy, cache, gx, grads.data());
  for (std::int64_t i = 0; i < 2 * C; ++i) CHECK(rel_err(grads[i], fd(loss, &params[i])) < 1e-6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto j = rng.index(x.size());
    CHECK(rel_err(gx.v[j], fd(loss, &x.v[j])) < 1e-5);
  }
}

TEST_CASE("dynamic head: two generated layers, gradients to features and kernels") {
  Rng rng(23);
  for (const int hidden : {4, 0}) {
    nn::HeadSpec hs{5, hidden};
    ArrX<double> wk(hs.param_count());
    for (std::int64_t i = 0; i < wk.size(); ++i) wk[i] = rng.normal(0.0, 0.5);
    auto fD = random_tensor(5, 2, 3, 2, rng);
    const auto r = random_tensor(2, 2, 3, 2, rng);

    const auto loss = [&] {
      Tensor4<double> logits;
      nn::HeadCache<double> hc;
      nn::head_forward(hs, wk, fD, logits, hc);
      return (logits.v * r.v).sum();
    };

    Tensor4<double> logits;
    nn::HeadCache<double> hc;
    nn::head_forward(hs, wk, fD, logits, hc);
    Tensor4<double> gfD;
    gfD.zero(5, 2, 3, 2);
    ArrX<double> gwk = ArrX<double>::Zero(hs.param_count());
    nn::head_backward(hs, wk, fD, hc, r, gfD, gwk);

    for (std::int64_t i = 0; i < wk.size(); ++i)
      CHECK(rel_err(gwk[i], fd(loss, &wk[i])) < 1e-6);
    for (int trial = 0; trial < 10; ++trial) {
      const auto j = rng.index(fD.size());
      CHECK(rel_err(gfD.v[j], fd(loss, &fD.v[j])) < 1e-6);
    }
  }
}

TEST_CASE("linear layer gradients") {
  Rng rng(29);
  nn::LinearSpec ls{6, 4};
  ArrX<double> params(ls.weight_count() + ls.bias_count());
  for (std::int64_t i = 0; i < params.size(); ++i) params[i] = rng.normal();
  ArrX<double> x(6), r(4);
  for (int i = 0; i < 6; ++i) x[i] = rng.normal();
  for (int i = 0; i < 4; ++i) r[i] = rng.normal();

  const auto loss = [&] {
    ArrX<double> y;
    nn::linear_forward(ls, params.data(), 0, ls.weight_count(), x, y);
    return (y * r).sum();
  };
  ArrX<double> gx, grads = ArrX<double>::Zero(params.size());
  nn::linear_backward(ls, params.data(), 0, ls.weight_count(), x, r, &gx, grads.data());
  for (std::int64_t i = 0; i < params.size(); ++i)
    CHECK(rel_err(grads[i], fd(loss, &params[i])) < 1e-6);
  for (int i = 0; i < 6; ++i) CHECK(rel_err(gx[i], fd(loss, &x[i])) < 1e-6);
}

TEST_CASE("softmax2 produces complementary probabilities") {
  Rng rng(31);
  auto logits = random_tensor(2, 3, 3, 3, rng);
  logits.v *= 10.0;
  Tensor4<double> probs;
  nn::softmax2(logits, probs);
  const auto n = probs.spatial();
  for (std::int64_t i = 0; i < n; ++i) {
    CHECK(probs.v[i] >= 0.0);
    CHECK(probs.v[i] <= 1.0);
    CHECK(probs.v[i] + probs.v[n + i] == doctest::Approx(1.0).epsilon(1e-12));
  }
}
