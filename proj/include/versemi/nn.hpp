#pragma once

// Building blocks for the volumetric network: dense channel-major tensors and
// layer forward/backward kernels. Parameters live in one flat vector owned by
// the caller; layers address it through offsets, gradients accumulate into a
// caller-provided buffer of the same layout.

#include <Eigen/Core>
#include <cstdint>

#include "versemi/error.hpp"
#include "versemi/grid.hpp"

namespace versemi::nn {

template <class S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;  // column-major
template <class S>
using MapMat = Eigen::Map<MatX<S>>;
template <class S>
using CMapMat = Eigen::Map<const MatX<S>>;
template <class S>
using StridedMat = Eigen::Map<MatX<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStridedMat = Eigen::Map<const MatX<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CMapRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

// (c, d, h, w) tensor, channel-major (one contiguous spatial block per channel).
template <class S>
struct Tensor4 {
  int c = 0, d = 0, h = 0, w = 0;
  ArrX<S> v;

  Tensor4() = default;
  Tensor4(int c_, int d_, int h_, int w_) { resize(c_, d_, h_, w_); }

  void resize(int c_, int d_, int h_, int w_) {
    c = c_;
    d = d_;
    h = h_;
    w = w_;
    v.resize(size());
  }
  void zero(int c_, int d_, int h_, int w_) {
    resize(c_, d_, h_, w_);
    v.setZero();
  }
  std::int64_t spatial() const { return static_cast<std::int64_t>(d) * h * w; }
  std::int64_t size() const { return spatial() * c; }

  // spatial x channels view; column ch is that channel's block
  MapMat<S> mat() { return MapMat<S>(v.data(), spatial(), c); }
  CMapMat<S> mat() const { return CMapMat<S>(v.data(), spatial(), c); }

  S& at(int ch, int z, int y, int x) {
    return v[(static_cast<std::int64_t>(ch) * d + z) * h * w + static_cast<std::int64_t>(y) * w + x];
  }
  const S& at(int ch, int z, int y, int x) const {
    return v[(static_cast<std::int64_t>(ch) * d + z) * h * w + static_cast<std::int64_t>(y) * w + x];
  }
};

enum class PadMode { zero, circular };

// ---------------------------------------------------------------------------
// conv3d, cubic kernel, via im2col + GEMM over z-plane slabs

struct ConvSpec {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
  PadMode pad_mode = PadMode::zero;

  int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }
  std::int64_t patch_rows() const { return static_cast<std::int64_t>(cin) * k * k * k; }
  std::int64_t weight_count() const { return patch_rows() * cout; }
  std::int64_t bias_count() const { return cout; }
};

namespace detail {

inline int wrap(int i, int n) {
  const int m = i % n;
  return m < 0 ? m + n : m;
}

// Patches matrix P, (n x K) column-major: one column per kernel tap
// (ci, kz, ky, kx), one row per output voxel of the slab [z0, z0+zn).
// Column order matches the weight row order, so Y = P * W.
// Stride-1 columns are shifted copies of the input and fill via row runs.
template <class S>
void im2col(const ConvSpec& cs, const Tensor4<S>& x, int z0, int zn, S* col) {
  const int oh = cs.out_dim(x.h), ow = cs.out_dim(x.w);
  const std::int64_t n = static_cast<std::int64_t>(zn) * oh * ow;
  const std::int64_t sp = x.spatial();
  const bool circ = cs.pad_mode == PadMode::circular;
  S* dst = col;
  for (int ci = 0; ci < cs.cin; ++ci) {
    const S* src = x.v.data() + static_cast<std::int64_t>(ci) * sp;
    for (int kz = 0; kz < cs.k; ++kz)
      for (int ky = 0; ky < cs.k; ++ky)
        for (int kx = 0; kx < cs.k; ++kx, dst += n) {
          S* out = dst;
          for (int z = z0; z < z0 + zn; ++z) {
            int iz = z * cs.stride - cs.pad + kz;
            if (circ) iz = wrap(iz, x.d);
            const bool z_ok = iz >= 0 && iz < x.d;
            for (int y = 0; y < oh; ++y, out += ow) {
              int iy = y * cs.stride - cs.pad + ky;
              if (circ) iy = wrap(iy, x.h);
              if (!z_ok || iy < 0 || iy >= x.h) {
                std::fill(out, out + ow, S(0));
                continue;
              }
              const S* row = src + (static_cast<std::int64_t>(iz) * x.h + iy) * x.w;
              if (cs.stride == 1) {
                const int ix0 = -cs.pad + kx;  // input x at output x = 0
                if (circ) {
                  for (int xo = 0; xo < ow; ++xo) out[xo] = row[wrap(ix0 + xo, x.w)];
                } else {
                  const int lead = std::clamp(-ix0, 0, ow);
                  const int tail = std::clamp(ix0 + ow - x.w, 0, ow);
                  const int mid = ow - lead - tail;
                  std::fill(out, out + lead, S(0));
                  if (mid > 0) std::copy(row + ix0 + lead, row + ix0 + lead + mid, out + lead);
                  std::fill(out + ow - tail, out + ow, S(0));
                }
              } else {
                for (int xo = 0; xo < ow; ++xo) {
                  int ix = xo * cs.stride - cs.pad + kx;
                  if (circ) ix = wrap(ix, x.w);
                  out[xo] = (ix >= 0 && ix < x.w) ? row[ix] : S(0);
                }
              }
            }
          }
        }
  }
}

// scatter-add of a patches matrix back onto the input gradient
template <class S>
void col2im_add(const ConvSpec& cs, Tensor4<S>& gx, int z0, int zn, const S* col) {
  const int oh = cs.out_dim(gx.h), ow = cs.out_dim(gx.w);
  const std::int64_t n = static_cast<std::int64_t>(zn) * oh * ow;
  const std::int64_t sp = gx.spatial();
  const bool circ = cs.pad_mode == PadMode::circular;
  const S* srccol = col;
  for (int ci = 0; ci < cs.cin; ++ci) {
    S* dst = gx.v.data() + static_cast<std::int64_t>(ci) * sp;
    for (int kz = 0; kz < cs.k; ++kz)
      for (int ky = 0; ky < cs.k; ++ky)
        for (int kx = 0; kx < cs.k; ++kx, srccol += n) {
          const S* in = srccol;
          for (int z = z0; z < z0 + zn; ++z) {
            int iz = z * cs.stride - cs.pad + kz;
            if (circ) iz = wrap(iz, gx.d);
            const bool z_ok = iz >= 0 && iz < gx.d;
            for (int y = 0; y < oh; ++y, in += ow) {
              int iy = y * cs.stride - cs.pad + ky;
              if (circ) iy = wrap(iy, gx.h);
              if (!z_ok || iy < 0 || iy >= gx.h) continue;
              S* row = dst + (static_cast<std::int64_t>(iz) * gx.h + iy) * gx.w;
              if (cs.stride == 1) {
                const int ix0 = -cs.pad + kx;
                if (circ) {
                  for (int xo = 0; xo < ow; ++xo) row[wrap(ix0 + xo, gx.w)] += in[xo];
                } else {
                  const int lead = std::clamp(-ix0, 0, ow);
                  const int tail = std::clamp(ix0 + ow - gx.w, 0, ow);
                  const int mid = ow - lead - tail;
                  if (mid > 0) {
                    Eigen::Map<ArrX<S>>(row + ix0 + lead, mid) +=
                        Eigen::Map<const ArrX<S>>(in + lead, mid);
                  }
                }
              } else {
                for (int xo = 0; xo < ow; ++xo) {
                  int ix = xo * cs.stride - cs.pad + kx;
                  if (circ) ix = wrap(ix, gx.w);
                  if (ix >= 0 && ix < gx.w) row[ix] += in[xo];
                }
              }
            }
          }
        }
  }
}

inline int slab_planes(std::int64_t plane, std::int64_t taps) {
  // keep the patches buffer around 2M scalars
  const std::int64_t budget = 1 << 21;
  const std::int64_t rows = std::max<std::int64_t>(plane, budget / std::max<std::int64_t>(1, taps));
  return static_cast<int>(std::max<std::int64_t>(1, rows / plane));
}

}  // namespace detail

template <class S>
void conv3d_forward(const ConvSpec& cs, const S* params, std::int64_t w_off, std::int64_t b_off,
                    const Tensor4<S>& x, Tensor4<S>& y, ArrX<S>& colbuf) {
  require(x.c == cs.cin, ErrorCode::invalid_argument, "conv3d: channel mismatch");
  const int od = cs.out_dim(x.d), oh = cs.out_dim(x.h), ow = cs.out_dim(x.w);
  require(od > 0 && oh > 0 && ow > 0, ErrorCode::invalid_argument, "conv3d: input too small");
  y.resize(cs.cout, od, oh, ow);
  const std::int64_t taps = cs.patch_rows();
  const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
  const int zstep = detail::slab_planes(plane, taps);
  if (colbuf.size() < taps * plane * zstep) colbuf.resize(taps * plane * zstep);
  CMapMat<S> W(params + w_off, taps, cs.cout);
  CMapRow<S> bias(params + b_off, cs.cout);
  for (int z0 = 0; z0 < od; z0 += zstep) {
    const int zn = std::min(zstep, od - z0);
    const std::int64_t n = zn * plane;
    detail::im2col(cs, x, z0, zn, colbuf.data());
    CMapMat<S> P(colbuf.data(), n, taps);
    StridedMat<S> out(y.v.data() + z0 * plane, n, cs.cout, Eigen::OuterStride<>(y.spatial()));
    out.noalias() = P * W;
    out.rowwise() += bias;
  }
}

// Accumulates weight/bias gradients; writes the input gradient when gx != nullptr.
template <class S>
void conv3d_backward(const ConvSpec& cs, const S* params, std::int64_t w_off, std::int64_t b_off,
                     const Tensor4<S>& x, const Tensor4<S>& gy, Tensor4<S>* gx, S* grads,
                     ArrX<S>& colbuf, ArrX<S>& colbuf2) {
  const int od = gy.d, oh = gy.h, ow = gy.w;
  const std::int64_t taps = cs.patch_rows();
  const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
  const int zstep = detail::slab_planes(plane, taps);
  if (colbuf.size() < taps * plane * zstep) colbuf.resize(taps * plane * zstep);
  if (colbuf2.size() < taps * plane * zstep) colbuf2.resize(taps * plane * zstep);
  CMapMat<S> W(params + w_off, taps, cs.cout);
  MapMat<S> gW(grads + w_off, taps, cs.cout);
  MapMat<S> gb(grads + b_off, cs.cout, 1);
  if (gx != nullptr) gx->zero(cs.cin, x.d, x.h, x.w);
  for (int z0 = 0; z0 < od; z0 += zstep) {
    const int zn = std::min(zstep, od - z0);
    const std::int64_t n = zn * plane;
    CStridedMat<S> G(gy.v.data() + z0 * plane, n, cs.cout, Eigen::OuterStride<>(gy.spatial()));
    detail::im2col(cs, x, z0, zn, colbuf.data());
    CMapMat<S> P(colbuf.data(), n, taps);
    gW.noalias() += P.transpose() * G;
    gb.noalias() += G.colwise().sum().transpose();
    if (gx != nullptr) {
      MapMat<S> C(colbuf2.data(), n, taps);
      C.noalias() = G * W.transpose();
      detail::col2im_add(cs, *gx, z0, zn, colbuf2.data());
    }
  }
}

// ---------------------------------------------------------------------------
// transposed conv, kernel 2 stride 2 (each output voxel has exactly one source)

struct UpSpec {
  int cin = 0, cout = 0;
  std::int64_t weight_count() const { return static_cast<std::int64_t>(cin) * cout * 8; }
  std::int64_t bias_count() const { return cout; }
};

template <class S>
void upconv_forward(const UpSpec& us, const S* params, std::int64_t w_off, std::int64_t b_off,
                    const Tensor4<S>& x, Tensor4<S>& y, ArrX<S>& tmp) {
  require(x.c == us.cin, ErrorCode::invalid_argument, "upconv: channel mismatch");
  y.resize(us.cout, x.d * 2, x.h * 2, x.w * 2);
  const std::int64_t n = x.spatial();
  if (tmp.size() < n * us.cout) tmp.resize(n * us.cout);
  CMapRow<S> bias(params + b_off, us.cout);
  for (int o = 0; o < 8; ++o) {
    const int a = o >> 2, b = (o >> 1) & 1, c = o & 1;
    CMapMat<S> Wo(params + w_off + static_cast<std::int64_t>(o) * us.cin * us.cout, us.cin,
                  us.cout);
    MapMat<S> T(tmp.data(), n, us.cout);
    T.noalias() = x.mat() * Wo;
    T.rowwise() += bias;
    for (int co = 0; co < us.cout; ++co) {
      const S* src = tmp.data() + static_cast<std::int64_t>(co) * n;
      for (int z = 0; z < x.d; ++z)
        for (int yy = 0; yy < x.h; ++yy) {
          S* dst = &y.at(co, 2 * z + a, 2 * yy + b, c);
          const S* s = src + (static_cast<std::int64_t>(z) * x.h + yy) * x.w;
          for (int xx = 0; xx < x.w; ++xx) dst[2 * xx] = s[xx];
        }
    }
  }
}

template <class S>
void upconv_backward(const UpSpec& us, const S* params, std::int64_t w_off, std::int64_t b_off,
                     const Tensor4<S>& x, const Tensor4<S>& gy, Tensor4<S>* gx, S* grads,
                     ArrX<S>& tmp) {
  const std::int64_t n = x.spatial();
  if (tmp.size() < n * us.cout) tmp.resize(n * us.cout);
  MapMat<S> gb(grads + b_off, us.cout, 1);
  if (gx != nullptr) gx->zero(us.cin, x.d, x.h, x.w);
  for (int o = 0; o < 8; ++o) {
    const int a = o >> 2, b = (o >> 1) & 1, c = o & 1;
    const std::int64_t block = w_off + static_cast<std::int64_t>(o) * us.cin * us.cout;
    CMapMat<S> Wo(params + block, us.cin, us.cout);
    MapMat<S> gWo(grads + block, us.cin, us.cout);
    MapMat<S> G(tmp.data(), n, us.cout);
    for (int co = 0; co < us.cout; ++co) {
      S* dst = tmp.data() + static_cast<std::int64_t>(co) * n;
      for (int z = 0; z < x.d; ++z)
        for (int yy = 0; yy < x.h; ++yy) {
          const S* src = &gy.at(co, 2 * z + a, 2 * yy + b, c);
          S* d = dst + (static_cast<std::int64_t>(z) * x.h + yy) * x.w;
          for (int xx = 0; xx < x.w; ++xx) d[xx] = src[2 * xx];
        }
    }
    gWo.noalias() += x.mat().transpose() * G;
    gb.noalias() += G.colwise().sum().transpose();
    if (gx != nullptr) gx->mat().noalias() += G * Wo.transpose();
  }
}

// ---------------------------------------------------------------------------
// instance norm (per sample, per channel over spatial)

template <class S>
struct NormCache {
  ArrX<S> mean, istd;
};

template <class S>
void instance_norm_forward(int channels, const S* params, std::int64_t g_off, std::int64_t b_off,
                           const Tensor4<S>& x, Tensor4<S>& y, NormCache<S>& cache) {
  y.resize(x.c, x.d, x.h, x.w);
  cache.mean.resize(channels);
  cache.istd.resize(channels);
  const std::int64_t n = x.spatial();
  for (int ch = 0; ch < channels; ++ch) {
    auto xs = x.v.segment(static_cast<std::int64_t>(ch) * n, n);
    const S mu = xs.mean();
    const S var = (xs - mu).square().mean();
    const S istd = S(1) / std::sqrt(var + S(kNormEps));
    cache.mean[ch] = mu;
    cache.istd[ch] = istd;
    const S g = params[g_off + ch], b = params[b_off + ch];
    y.v.segment(static_cast<std::int64_t>(ch) * n, n) = (xs - mu) * istd * g + b;
  }
}

template <class S>
void instance_norm_backward(int channels, const S* params, std::int64_t g_off, std::int64_t b_off,
                            const Tensor4<S>& x, const Tensor4<S>& gy, const NormCache<S>& cache,
                            Tensor4<S>& gx, S* grads) {
  gx.resize(x.c, x.d, x.h, x.w);
  const std::int64_t n = x.spatial();
  for (int ch = 0; ch < channels; ++ch) {
    auto xs = x.v.segment(static_cast<std::int64_t>(ch) * n, n);
    auto gs = gy.v.segment(static_cast<std::int64_t>(ch) * n, n);
    const S mu = cache.mean[ch], istd = cache.istd[ch];
    const S g = params[g_off + ch];
    ArrX<S> xh = (xs - mu) * istd;
    const S sum_g = gs.sum();
    const S sum_gx = (gs * xh).sum();
    grads[g_off + ch] += sum_gx;
    grads[b_off + ch] += sum_g;
    const S inv_n = S(1) / static_cast<S>(n);
    gx.v.segment(static_cast<std::int64_t>(ch) * n, n) =
        g * istd * (gs - sum_g * inv_n - xh * (sum_gx * inv_n));
  }
}

// ---------------------------------------------------------------------------

// Fused instance norm + leaky rectifier; caches only (mean, istd) per channel.
template <class S>
void norm_act_forward(int channels, const S* params, std::int64_t g_off, std::int64_t b_off,
                      const Tensor4<S>& x, Tensor4<S>& y, NormCache<S>& cache) {
  y.resize(x.c, x.d, x.h, x.w);
  cache.mean.resize(channels);
  cache.istd.resize(channels);
  const std::int64_t n = x.spatial();
  const S slope = S(kLeakySlope);
  for (int ch = 0; ch < channels; ++ch) {
    auto xs = x.v.segment(static_cast<std::int64_t>(ch) * n, n);
    const S mu = xs.mean();
    const S var = (xs - mu).square().mean();
    const S istd = S(1) / std::sqrt(var + S(kNormEps));
    cache.mean[ch] = mu;
    cache.istd[ch] = istd;
    const S g = params[g_off + ch], b = params[b_off + ch];
    auto ys = y.v.segment(static_cast<std::int64_t>(ch) * n, n);
    ys = (xs - mu) * (istd * g) + b;
    ys = (ys > S(0)).select(ys, ys * slope);
  }
}

template <class S>
void norm_act_backward(int channels, const S* params, std::int64_t g_off, std::int64_t b_off,
                       const Tensor4<S>& x, const Tensor4<S>& gy, const NormCache<S>& cache,
                       Tensor4<S>& gx, S* grads) {
  gx.resize(x.c, x.d, x.h, x.w);
  const std::int64_t n = x.spatial();
  const S slope = S(kLeakySlope);
  for (int ch = 0; ch < channels; ++ch) {
    auto xs = x.v.segment(static_cast<std::int64_t>(ch) * n, n);
    auto gs = gy.v.segment(static_cast<std::int64_t>(ch) * n, n);
    const S mu = cache.mean[ch], istd = cache.istd[ch];
    const S g = params[g_off + ch], b = params[b_off + ch];
    auto gxs = gx.v.segment(static_cast<std::int64_t>(ch) * n, n);
    // rectifier gate on the recomputed pre-activation, then the norm backward
    gxs = (((xs - mu) * (istd * g) + b) > S(0)).select(gs, gs * slope);
    const S sum_g = gxs.sum();
    const S sum_gx = (gxs * (xs - mu)).sum() * istd;
    grads[g_off + ch] += sum_gx;
    grads[b_off + ch] += sum_g;
    const S inv_n = S(1) / static_cast<S>(n);
    gxs = g * istd * (gxs - sum_g * inv_n - (xs - mu) * istd * (sum_gx * inv_n));
  }
}

template <class S>
void leaky_relu_forward(const Tensor4<S>& x, Tensor4<S>& y) {
  y.resize(x.c, x.d, x.h, x.w);
  const S a = S(kLeakySlope);
  y.v = (x.v > S(0)).select(x.v, x.v * a);
}

template <class S>
void leaky_relu_backward(const Tensor4<S>& x, const Tensor4<S>& gy, Tensor4<S>& gx) {
  gx.resize(x.c, x.d, x.h, x.w);
  const S a = S(kLeakySlope);
  gx.v = (x.v > S(0)).select(gy.v, gy.v * a);
}

template <class S>
void gap_forward(const Tensor4<S>& x, ArrX<S>& pooled) {
  pooled = x.mat().colwise().mean().transpose().array();
}

template <class S>
void gap_backward_add(const ArrX<S>& gpooled, Tensor4<S>& gx) {
  const S inv_n = S(1) / static_cast<S>(gx.spatial());
  for (int ch = 0; ch < gx.c; ++ch)
    gx.v.segment(static_cast<std::int64_t>(ch) * gx.spatial(), gx.spatial()) += gpooled[ch] * inv_n;
}

// ---------------------------------------------------------------------------
// fully connected y = W^T x + b, W stored (din x dout)

struct LinearSpec {
  int din = 0, dout = 0;
  std::int64_t weight_count() const { return static_cast<std::int64_t>(din) * dout; }
  std::int64_t bias_count() const { return dout; }
};

template <class S>
void linear_forward(const LinearSpec& ls, const S* params, std::int64_t w_off, std::int64_t b_off,
                    const ArrX<S>& x, ArrX<S>& y) {
  CMapMat<S> W(params + w_off, ls.din, ls.dout);
  CMapMat<S> b(params + b_off, ls.dout, 1);
  y.resize(ls.dout);
  Eigen::Map<MatX<S>>(y.data(), ls.dout, 1).noalias() =
      W.transpose() * CMapMat<S>(x.data(), ls.din, 1) + b;
}

template <class S>
void linear_backward(const LinearSpec& ls, const S* params, std::int64_t w_off, std::int64_t b_off,
                     const ArrX<S>& x, const ArrX<S>& gy, ArrX<S>* gx, S* grads) {
  CMapMat<S> W(params + w_off, ls.din, ls.dout);
  MapMat<S> gW(grads + w_off, ls.din, ls.dout);
  MapMat<S> gb(grads + b_off, ls.dout, 1);
  CMapMat<S> xm(x.data(), ls.din, 1);
  CMapMat<S> gm(gy.data(), ls.dout, 1);
  gW.noalias() += xm * gm.transpose();
  gb.noalias() += gm;
  if (gx != nullptr) {
    gx->resize(ls.din);
    Eigen::Map<MatX<S>>(gx->data(), ls.din, 1).noalias() = W * gm;
  }
}

// ---------------------------------------------------------------------------
// dynamic segmentation head: one or two generated 1x1x1 convolutions applied
// to the decoder features; weights arrive per sample as a flat vector.

struct HeadSpec {
  int c_d = 0;      // decoder feature channels
  int hidden = 0;   // 0 collapses to a single generated layer
  static constexpr int out_channels = 2;

  std::int64_t param_count() const {
    if (hidden > 0)
      return static_cast<std::int64_t>(c_d) * hidden + hidden +
             static_cast<std::int64_t>(hidden) * out_channels + out_channels;
    return static_cast<std::int64_t>(c_d) * out_channels + out_channels;
  }
};

template <class S>
struct HeadCache {
  MatX<S> a1;  // pre-activation of the hidden layer (n x hidden)
};

template <class S>
void head_forward(const HeadSpec& hs, const ArrX<S>& wk, const Tensor4<S>& fD,
                  Tensor4<S>& logits, HeadCache<S>& cache) {
  require(wk.size() == hs.param_count(), ErrorCode::invalid_argument,
          "dynamic head: kernel parameter count mismatch");
  const std::int64_t n = fD.spatial();
  logits.resize(HeadSpec::out_channels, fD.d, fD.h, fD.w);
  const auto X = fD.mat();
  if (hs.hidden > 0) {
    CMapMat<S> W1(wk.data(), hs.c_d, hs.hidden);
    CMapRow<S> b1(wk.data() + static_cast<std::int64_t>(hs.c_d) * hs.hidden, hs.hidden);
    CMapMat<S> W2(wk.data() + static_cast<std::int64_t>(hs.c_d) * hs.hidden + hs.hidden,
                  hs.hidden, HeadSpec::out_channels);
    CMapRow<S> b2(wk.data() + hs.param_count() - HeadSpec::out_channels,
                  HeadSpec::out_channels);
    cache.a1.resize(n, hs.hidden);
    cache.a1.noalias() = X * W1;
    cache.a1.rowwise() += b1;
    const S a = S(kLeakySlope);
    MatX<S> z1 = (cache.a1.array() > S(0)).select(cache.a1.array(), cache.a1.array() * a);
    logits.mat().noalias() = z1 * W2;
    logits.mat().rowwise() += b2;
  } else {
    CMapMat<S> W(wk.data(), hs.c_d, HeadSpec::out_channels);
    CMapRow<S> b(wk.data() + static_cast<std::int64_t>(hs.c_d) * HeadSpec::out_channels,
                 HeadSpec::out_channels);
    logits.mat().noalias() = X * W;
    logits.mat().rowwise() += b;
  }
}

// Adds into both the feature gradient and the kernel-parameter gradient.
template <class S>
void head_backward(const HeadSpec& hs, const ArrX<S>& wk, const Tensor4<S>& fD,
                   const HeadCache<S>& cache, const Tensor4<S>& glogits, Tensor4<S>& gfD,
                   ArrX<S>& gwk) {
  const std::int64_t n = fD.spatial();
  if (gwk.size() != hs.param_count()) {
    gwk = ArrX<S>::Zero(hs.param_count());
  }
  const auto X = fD.mat();
  const auto GL = glogits.mat();
  if (hs.hidden > 0) {
    CMapMat<S> W1(wk.data(), hs.c_d, hs.hidden);
    CMapMat<S> W2(wk.data() + static_cast<std::int64_t>(hs.c_d) * hs.hidden + hs.hidden,
                  hs.hidden, HeadSpec::out_channels);
    MapMat<S> gW1(gwk.data(), hs.c_d, hs.hidden);
    MapMat<S> gb1(gwk.data() + static_cast<std::int64_t>(hs.c_d) * hs.hidden, hs.hidden, 1);
    MapMat<S> gW2(gwk.data() + static_cast<std::int64_t>(hs.c_d) * hs.hidden + hs.hidden,
                  hs.hidden, HeadSpec::out_channels);
    MapMat<S> gb2(gwk.data() + hs.param_count() - HeadSpec::out_channels,
                  HeadSpec::out_channels, 1);
    const S a = S(kLeakySlope);
    MatX<S> z1 = (cache.a1.array() > S(0)).select(cache.a1.array(), cache.a1.array() * a);
    gW2.noalias() += z1.transpose() * GL;
    gb2.noalias() += GL.colwise().sum().transpose();
    MatX<S> ga1 = GL * W2.transpose();
    ga1.array() *= (cache.a1.array() > S(0)).select(MatX<S>::Ones(n, hs.hidden).array(),
                                                    MatX<S>::Constant(n, hs.hidden, a).array());
    gW1.noalias() += X.transpose() * ga1;
    gb1.noalias() += ga1.colwise().sum().transpose();
    gfD.mat().noalias() += ga1 * W1.transpose();
  } else {
    CMapMat<S> W(wk.data(), hs.c_d, HeadSpec::out_channels);
    MapMat<S> gW(gwk.data(), hs.c_d, HeadSpec::out_channels);
    MapMat<S> gb(gwk.data() + static_cast<std::int64_t>(hs.c_d) * HeadSpec::out_channels,
                 HeadSpec::out_channels, 1);
    gW.noalias() += X.transpose() * GL;
    gb.noalias() += GL.colwise().sum().transpose();
    gfD.mat().noalias() += GL * W.transpose();
  }
}

// channel softmax over the 2-channel logits
template <class S>
void softmax2(const Tensor4<S>& logits, Tensor4<S>& probs) {
  probs.resize(logits.c, logits.d, logits.h, logits.w);
  const std::int64_t n = logits.spatial();
  const S* l0 = logits.v.data();
  const S* l1 = logits.v.data() + n;
  S* p0 = probs.v.data();
  S* p1 = probs.v.data() + n;
  for (std::int64_t i = 0; i < n; ++i) {
    const S m = std::max(l0[i], l1[i]);
    const S e0 = std::exp(l0[i] - m), e1 = std::exp(l1[i] - m);
    const S z = e0 + e1;
    p0[i] = e0 / z;
    p1[i] = e1 / z;
  }
}

}  // namespace versemi::nn
