#pragma once

// Forward/backward kernels for the fixed layer set. Backward functions
// accumulate (+=) into the input-gradient and parameter-gradient buffers so
// that a tensor consumed by several layers collects all contributions.
//
// Parallel loops split over output channels (or input channels for the
// input gradient); every output element is reduced by a single worker in a
// fixed order, so results do not depend on the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <vector>

#include "../error.hpp"
#include "../parallel.hpp"
#include "../rng.hpp"
#include "tensor.hpp"

namespace lseg::nn {

// ---------------------------------------------------------------------------
// Convolution (3x3x3 zero-padded or 1x1x1), stride 1.
//
// Weight layout: w[((oc * cin) + ic) * k^3 + (kz * k + ky) * k + kx].

namespace detail {

// Fixed-width SIMD lanes via the GCC/Clang vector extension; without
// native support the compiler splits them into narrower operations.
template <typename T>
struct Lanes {
  static constexpr int n = 64 / static_cast<int>(sizeof(T));
  typedef T V __attribute__((vector_size(64)));
  static V load(const T* p) {
    V v;
    std::memcpy(&v, p, sizeof(V));
    return v;
  }
  static V splat(T s) { return V{} + s; }
};

// Every channel copied into a zero-bordered block: voxel (x, y, z) sits at
// ((z + 1) * py + (y + 1)) * px + (x + 1). Rows are long enough that a lane
// load starting anywhere in [0, round_up(nx)) plus two stays inside zeros.
template <typename T>
struct PaddedVolume {
  int nx = 0, ny = 0, nz = 0, px = 0, py = 0, pz = 0, channels = 0;
  std::vector<T> data;

  std::size_t channel_stride() const { return static_cast<std::size_t>(px) * py * pz; }
  const T* row(int c, int zp, int yp) const {
    return data.data() + c * channel_stride() + (static_cast<std::size_t>(zp) * py + yp) * px;
  }

  explicit PaddedVolume(const FeatureMap<T>& m)
      : nx(m.dims[0]), ny(m.dims[1]), nz(m.dims[2]), channels(m.channels) {
    constexpr int L = Lanes<T>::n;
    px = ((nx + L - 1) / L) * L + L;
    py = ny + 2;
    pz = nz + 2;
    data.assign(channel_stride() * channels, T{0});
    for (int c = 0; c < channels; ++c) {
      const T* src = m.channel(c);
      T* dst = data.data() + c * channel_stride();
      for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
          std::memcpy(dst + (static_cast<std::size_t>(z + 1) * py + (y + 1)) * px + 1,
                      src + (static_cast<std::size_t>(z) * ny + y) * nx, sizeof(T) * nx);
    }
  }
};

/// out[oc] += sum_ic w[oc, ic] (*) in[ic] for a 3^3 kernel. Output
/// channels are processed four at a time so each input load feeds four
/// accumulators.
template <typename T>
void conv3_accumulate(const FeatureMap<T>& in, const T* w, FeatureMap<T>& out) {
  using S = Lanes<T>;
  using V = typename S::V;
  constexpr int L = S::n;
  constexpr int B = 4;
  const int cin = in.channels, cout = out.channels;
  const int nx = in.dims[0], ny = in.dims[1], nz = in.dims[2];
  const PaddedVolume<T> pin(in);
  const int blocks = (cout + B - 1) / B;
  parallel_for(static_cast<std::size_t>(blocks), [&](std::size_t bb, std::size_t be) {
    std::vector<T> wblk(static_cast<std::size_t>(cin) * 27 * B);
    for (int blk = static_cast<int>(bb); blk < static_cast<int>(be); ++blk) {
      const int oc0 = blk * B;
      const int nb = std::min(B, cout - oc0);
      // wblk[(ic * 27 + t) * B + o], zero for missing channels
      std::fill(wblk.begin(), wblk.end(), T{0});
      for (int o = 0; o < nb; ++o)
        for (int ic = 0; ic < cin; ++ic)
          for (int t = 0; t < 27; ++t)
            wblk[(static_cast<std::size_t>(ic) * 27 + t) * B + o] = w[(static_cast<std::size_t>(oc0 + o) * cin + ic) * 27 + t];
      for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
          for (int xc = 0; xc < nx; xc += L) {
            V acc[B] = {};
            for (int ic = 0; ic < cin; ++ic) {
              const T* wt = wblk.data() + static_cast<std::size_t>(ic) * 27 * B;
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky) {
                  const T* r = pin.row(ic, z + kz, y + ky) + xc;
                  for (int kx = 0; kx < 3; ++kx) {
                    const V v = S::load(r + kx);
                    const T* wk = wt + ((kz * 3 + ky) * 3 + kx) * B;
                    for (int o = 0; o < B; ++o) acc[o] += v * wk[o];
                  }
                }
            }
            const int cnt = std::min(L, nx - xc);
            for (int o = 0; o < nb; ++o) {
              T* orow = out.channel(oc0 + o) + (static_cast<std::size_t>(z) * ny + y) * nx + xc;
              for (int l = 0; l < cnt; ++l) orow[l] += acc[o][l];
            }
          }
    }
  });
}

/// dw[oc, ic, t] += sum_v dout[oc](v) * in[ic](v + offset(t)).
template <typename T>
void conv3_weight_grad(const FeatureMap<T>& in, const FeatureMap<T>& dout, T* dw) {
  using S = Lanes<T>;
  using V = typename S::V;
  constexpr int L = S::n;
  const int cin = in.channels, cout = dout.channels;
  const int nx = in.dims[0], ny = in.dims[1], nz = in.dims[2];
  const PaddedVolume<T> pin(in);
  const PaddedVolume<T> pd(dout);
  parallel_for(static_cast<std::size_t>(cout), [&](std::size_t b, std::size_t e) {
    for (int oc = static_cast<int>(b); oc < static_cast<int>(e); ++oc)
      for (int ic = 0; ic < cin; ++ic) {
        V acc[27] = {};
        for (int z = 0; z < nz; ++z)
          for (int y = 0; y < ny; ++y) {
            const T* drow = pd.row(oc, z + 1, y + 1) + 1;
            for (int xc = 0; xc < nx; xc += L) {
              const V d = S::load(drow + xc);
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky) {
                  const T* r = pin.row(ic, z + kz, y + ky) + xc;
                  for (int kx = 0; kx < 3; ++kx) acc[(kz * 3 + ky) * 3 + kx] += d * S::load(r + kx);
                }
            }
          }
        T* dwk = dw + (static_cast<std::size_t>(oc) * cin + ic) * 27;
        for (int t = 0; t < 27; ++t) {
          T s{0};
          for (int l = 0; l < L; ++l) s += acc[t][l];
          dwk[t] += s;
        }
      }
  });
}

}  // namespace detail

template <typename T>
void check_conv_args(const FeatureMap<T>& in, int cout, int k, std::size_t wsize) {
  if (k != 1 && k != 3) throw ArgumentError("conv: kernel size must be 1 or 3");
  if (cout < 1) throw ArgumentError("conv: out channels must be >= 1");
  if (wsize != static_cast<std::size_t>(cout) * in.channels * k * k * k)
    throw ArgumentError("conv: weight count does not match channel counts");
}

template <typename T>
FeatureMap<T> conv_forward(const FeatureMap<T>& in, const std::vector<T>& w, const std::vector<T>& bias, int cout,
                           int k) {
  check_conv_args(in, cout, k, w.size());
  if (bias.size() != static_cast<std::size_t>(cout)) throw ArgumentError("conv: bias count mismatch");
  return conv_forward(in, w.data(), bias.data(), cout, k);
}

template <typename T>
FeatureMap<T> conv_forward(const FeatureMap<T>& in, const T* w, const T* bias, int cout, int k) {
  FeatureMap<T> out(cout, in.dims);
  const std::size_t nv = in.voxels();
  for (int oc = 0; oc < cout; ++oc) std::fill_n(out.channel(oc), nv, bias[oc]);
  if (k == 3) {
    detail::conv3_accumulate(in, w, out);
    return out;
  }
  const int cin = in.channels;
  parallel_for(static_cast<std::size_t>(cout), [&](std::size_t b, std::size_t e) {
    for (int oc = static_cast<int>(b); oc < static_cast<int>(e); ++oc) {
      T* __restrict o = out.channel(oc);
      for (int ic = 0; ic < cin; ++ic) {
        const T wv = w[static_cast<std::size_t>(oc) * cin + ic];
        const T* __restrict x = in.channel(ic);
        for (std::size_t v = 0; v < nv; ++v) o[v] += wv * x[v];
      }
    }
  });
  return out;
}

/// Adds d(loss)/d(in), d(loss)/d(w) and d(loss)/d(bias) given d(loss)/d(out).
/// A null `din` skips the input gradient.
template <typename T>
void conv_backward(const FeatureMap<T>& in, const T* w, int k, const FeatureMap<T>& dout, FeatureMap<T>* din, T* dw,
                   T* dbias) {
  const int cin = in.channels, cout = dout.channels;
  const std::size_t nv = in.voxels();
  if ((din && !din->same_shape(in)) || dout.dims != in.dims) throw GeometryError("conv_backward: shape mismatch");

  // Bias.
  for (int oc = 0; oc < cout; ++oc) {
    double s = 0.0;
    const T* d = dout.channel(oc);
    for (std::size_t v = 0; v < nv; ++v) s += d[v];
    dbias[oc] += static_cast<T>(s);
  }

  if (k == 1) {
    parallel_for(static_cast<std::size_t>(cout), [&](std::size_t b, std::size_t e) {
      for (int oc = static_cast<int>(b); oc < static_cast<int>(e); ++oc) {
        const T* d = dout.channel(oc);
        for (int ic = 0; ic < cin; ++ic) {
          const T* x = in.channel(ic);
          double s = 0.0;
          for (std::size_t v = 0; v < nv; ++v) s += static_cast<double>(d[v]) * x[v];
          dw[static_cast<std::size_t>(oc) * cin + ic] += static_cast<T>(s);
        }
      }
    });
    if (!din) return;
    parallel_for(static_cast<std::size_t>(cin), [&](std::size_t b, std::size_t e) {
      for (int ic = static_cast<int>(b); ic < static_cast<int>(e); ++ic) {
        T* __restrict g = din->channel(ic);
        for (int oc = 0; oc < cout; ++oc) {
          const T wv = w[static_cast<std::size_t>(oc) * cin + ic];
          const T* __restrict d = dout.channel(oc);
          for (std::size_t v = 0; v < nv; ++v) g[v] += wv * d[v];
        }
      }
    });
    return;
  }

  detail::conv3_weight_grad(in, dout, dw);

  // Input gradient: correlation of dout with the spatially flipped,
  // channel-transposed kernel.
  if (!din) return;
  std::vector<T> wflip(static_cast<std::size_t>(cin) * cout * 27);
  for (int oc = 0; oc < cout; ++oc)
    for (int ic = 0; ic < cin; ++ic)
      for (int t = 0; t < 27; ++t)
        wflip[(static_cast<std::size_t>(ic) * cout + oc) * 27 + (26 - t)] =
            w[(static_cast<std::size_t>(oc) * cin + ic) * 27 + t];
  detail::conv3_accumulate(dout, wflip.data(), *din);
}

// ---------------------------------------------------------------------------
// Batch normalisation: per-channel statistics over the spatial axes.

struct BatchNormConfig {
  double momentum = 0.9;
  double eps = 1e-5;
};

template <typename T>
struct BatchNormCache {
  std::vector<T> inv_std;  // per channel
  FeatureMap<T> xhat;
};

/// Training mode normalises with the volume's own statistics and folds them
/// into the running estimates; eval mode uses the running estimates.
template <typename T>
FeatureMap<T> batchnorm_forward(const FeatureMap<T>& in, const T* gamma, const T* beta, T* running_mean,
                                T* running_var, bool training, const BatchNormConfig& cfg, BatchNormCache<T>* cache) {
  const int c = in.channels;
  const std::size_t nv = in.voxels();
  FeatureMap<T> out(c, in.dims);
  if (cache) {
    cache->inv_std.assign(c, T{0});
    cache->xhat = FeatureMap<T>(c, in.dims);
  }
  for (int ch = 0; ch < c; ++ch) {
    const T* x = in.channel(ch);
    double mean, var;
    if (training) {
      double s = 0.0;
      for (std::size_t v = 0; v < nv; ++v) s += x[v];
      mean = s / static_cast<double>(nv);
      double q = 0.0;
      for (std::size_t v = 0; v < nv; ++v) q += (x[v] - mean) * (x[v] - mean);
      var = q / static_cast<double>(nv);
      running_mean[ch] = static_cast<T>(cfg.momentum * running_mean[ch] + (1.0 - cfg.momentum) * mean);
      running_var[ch] = static_cast<T>(cfg.momentum * running_var[ch] + (1.0 - cfg.momentum) * var);
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const double inv = 1.0 / std::sqrt(var + cfg.eps);
    const T m = static_cast<T>(mean), is = static_cast<T>(inv), g = gamma[ch], bt = beta[ch];
    T* y = out.channel(ch);
    T* xh = cache ? cache->xhat.channel(ch) : nullptr;
    for (std::size_t v = 0; v < nv; ++v) {
      const T h = (x[v] - m) * is;
      if (xh) xh[v] = h;
      y[v] = g * h + bt;
    }
    if (cache) cache->inv_std[ch] = is;
  }
  return out;
}

template <typename T>
void batchnorm_backward(const BatchNormCache<T>& cache, const T* gamma, bool training, const FeatureMap<T>& dout,
                        FeatureMap<T>& din, T* dgamma, T* dbeta) {
  const int c = dout.channels;
  const std::size_t nv = dout.voxels();
  for (int ch = 0; ch < c; ++ch) {
    const T* dy = dout.channel(ch);
    const T* xh = cache.xhat.channel(ch);
    double sdy = 0.0, sdyx = 0.0;
    for (std::size_t v = 0; v < nv; ++v) {
      sdy += dy[v];
      sdyx += static_cast<double>(dy[v]) * xh[v];
    }
    dgamma[ch] += static_cast<T>(sdyx);
    dbeta[ch] += static_cast<T>(sdy);
    const T scale = gamma[ch] * cache.inv_std[ch];
    T* dx = din.channel(ch);
    if (training) {
      const T mdy = static_cast<T>(sdy / static_cast<double>(nv));
      const T mdyx = static_cast<T>(sdyx / static_cast<double>(nv));
      for (std::size_t v = 0; v < nv; ++v) dx[v] += scale * (dy[v] - mdy - xh[v] * mdyx);
    } else {
      for (std::size_t v = 0; v < nv; ++v) dx[v] += scale * dy[v];
    }
  }
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
FeatureMap<T> relu_forward(const FeatureMap<T>& in) {
  FeatureMap<T> out = in;
  for (T& v : out.data) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
void relu_backward(const FeatureMap<T>& in, const FeatureMap<T>& dout, FeatureMap<T>& din) {
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in.data[i] > T{0}) din.data[i] += dout.data[i];
}

/// Inverted dropout. The keep mask is drawn from `seed`, so a forward pass
/// can be replayed exactly. rate 0 or eval mode is the identity.
template <typename T>
FeatureMap<T> dropout_forward(const FeatureMap<T>& in, double rate, bool training, std::uint64_t seed,
                              std::vector<std::uint8_t>* mask) {
  if (rate < 0.0 || rate >= 1.0) throw ArgumentError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) {
    if (mask) mask->clear();
    return in;
  }
  Rng rng(seed);
  FeatureMap<T> out(in.channels, in.dims);
  std::vector<std::uint8_t> m(in.size());
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < in.size(); ++i) {
    m[i] = rng.uniform() >= rate;
    out.data[i] = m[i] ? in.data[i] * scale : T{0};
  }
  if (mask) *mask = std::move(m);
  return out;
}

template <typename T>
void dropout_backward(const std::vector<std::uint8_t>& mask, double rate, const FeatureMap<T>& dout,
                      FeatureMap<T>& din) {
  if (mask.empty()) {
    for (std::size_t i = 0; i < dout.size(); ++i) din.data[i] += dout.data[i];
    return;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < dout.size(); ++i)
    if (mask[i]) din.data[i] += dout.data[i] * scale;
}

/// Softmax across channels at every voxel.
template <typename T>
FeatureMap<T> softmax_forward(const FeatureMap<T>& in) {
  FeatureMap<T> out(in.channels, in.dims);
  const std::size_t nv = in.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    T mx = in.at(0, v);
    for (int c = 1; c < in.channels; ++c) mx = std::max(mx, in.at(c, v));
    double s = 0.0;
    for (int c = 0; c < in.channels; ++c) {
      const double e = std::exp(static_cast<double>(in.at(c, v) - mx));
      out.at(c, v) = static_cast<T>(e);
      s += e;
    }
    for (int c = 0; c < in.channels; ++c) out.at(c, v) = static_cast<T>(out.at(c, v) / s);
  }
  return out;
}

template <typename T>
void softmax_backward(const FeatureMap<T>& out, const FeatureMap<T>& dout, FeatureMap<T>& din) {
  const std::size_t nv = out.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    double dot = 0.0;
    for (int c = 0; c < out.channels; ++c) dot += static_cast<double>(out.at(c, v)) * dout.at(c, v);
    for (int c = 0; c < out.channels; ++c)
      din.at(c, v) += static_cast<T>(out.at(c, v) * (dout.at(c, v) - dot));
  }
}

// ---------------------------------------------------------------------------
// Channel concatenation

template <typename T>
FeatureMap<T> concat_forward(const std::vector<const FeatureMap<T>*>& parts) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  int c = 0;
  for (const auto* p : parts) {
    if (p->dims != parts.front()->dims) throw GeometryError("concat: spatial dims differ");
    c += p->channels;
  }
  FeatureMap<T> out(c, parts.front()->dims);
  std::size_t off = 0;
  for (const auto* p : parts) {
    std::copy(p->data.begin(), p->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->size();
  }
  return out;
}

template <typename T>
void concat_backward(const FeatureMap<T>& dout, const std::vector<FeatureMap<T>*>& dparts) {
  std::size_t off = 0;
  for (auto* d : dparts) {
    for (std::size_t i = 0; i < d->size(); ++i) d->data[i] += dout.data[off + i];
    off += d->size();
  }
}

// ---------------------------------------------------------------------------
// Resampling: block average down, separable trilinear up (align-corners off,
// clamped), matching resample_factor on scalar grids.

template <typename T>
FeatureMap<T> downsample_forward(const FeatureMap<T>& in, int f) {
  for (int a : in.dims)
    if (a % f != 0) throw GeometryError("downsample: dims not divisible by factor");
  const Index3 od{in.dims[0] / f, in.dims[1] / f, in.dims[2] / f};
  FeatureMap<T> out(in.channels, od);
  const double inv = 1.0 / (static_cast<double>(f) * f * f);
  for (int c = 0; c < in.channels; ++c) {
    const T* x = in.channel(c);
    T* y = out.channel(c);
    for (int z = 0; z < od[2]; ++z)
      for (int yy = 0; yy < od[1]; ++yy)
        for (int xx = 0; xx < od[0]; ++xx) {
          double s = 0.0;
          for (int k = 0; k < f; ++k)
            for (int j = 0; j < f; ++j) {
              const T* row = x + (static_cast<std::size_t>(z * f + k) * in.dims[1] + (yy * f + j)) * in.dims[0] + xx * f;
              for (int i = 0; i < f; ++i) s += row[i];
            }
          y[(static_cast<std::size_t>(z) * od[1] + yy) * od[0] + xx] = static_cast<T>(s * inv);
        }
  }
  return out;
}

template <typename T>
void downsample_backward(const FeatureMap<T>& dout, int f, FeatureMap<T>& din) {
  const Index3& od = dout.dims;
  const T inv = static_cast<T>(1.0 / (static_cast<double>(f) * f * f));
  for (int c = 0; c < dout.channels; ++c) {
    const T* d = dout.channel(c);
    T* g = din.channel(c);
    for (int z = 0; z < din.dims[2]; ++z)
      for (int y = 0; y < din.dims[1]; ++y)
        for (int x = 0; x < din.dims[0]; ++x)
          g[(static_cast<std::size_t>(z) * din.dims[1] + y) * din.dims[0] + x] +=
              d[(static_cast<std::size_t>(z / f) * od[1] + y / f) * od[0] + x / f] * inv;
  }
}

namespace detail {

struct Lerp {
  int i0, i1;
  double t;
};

inline std::vector<Lerp> lerp_table(int n_in, int f) {
  std::vector<Lerp> tab(static_cast<std::size_t>(n_in) * f);
  for (int o = 0; o < n_in * f; ++o) {
    const double p = std::clamp((o + 0.5) / f - 0.5, 0.0, static_cast<double>(n_in - 1));
    const int i0 = static_cast<int>(std::floor(p));
    tab[o] = Lerp{i0, std::min(i0 + 1, n_in - 1), p - i0};
  }
  return tab;
}

/// 1-D linear resampling along `axis` of a single channel volume.
template <typename T>
void lerp_axis(const T* in, const Index3& din, T* out, const Index3& dout, int axis, const std::vector<Lerp>& tab) {
  const std::size_t sx = 1, sy = static_cast<std::size_t>(din[0]), sz = static_cast<std::size_t>(din[0]) * din[1];
  const std::size_t stride_in = axis == 0 ? sx : axis == 1 ? sy : sz;
  for (int z = 0; z < dout[2]; ++z)
    for (int y = 0; y < dout[1]; ++y)
      for (int x = 0; x < dout[0]; ++x) {
        const int o = axis == 0 ? x : axis == 1 ? y : z;
        const Lerp& l = tab[o];
        const std::size_t base = (axis == 0 ? 0 : x) * sx + (axis == 1 ? 0 : y) * sy + (axis == 2 ? 0 : z) * sz;
        out[(static_cast<std::size_t>(z) * dout[1] + y) * dout[0] + x] =
            static_cast<T>((1.0 - l.t) * in[base + l.i0 * stride_in] + l.t * in[base + l.i1 * stride_in]);
      }
}

/// Transpose of lerp_axis: scatter-add dout back onto din.
template <typename T>
void lerp_axis_adjoint(const T* dout, const Index3& dd, T* din, const Index3& di, int axis, const std::vector<Lerp>& tab) {
  const std::size_t sx = 1, sy = static_cast<std::size_t>(di[0]), sz = static_cast<std::size_t>(di[0]) * di[1];
  const std::size_t stride_in = axis == 0 ? sx : axis == 1 ? sy : sz;
  for (int z = 0; z < dd[2]; ++z)
    for (int y = 0; y < dd[1]; ++y)
      for (int x = 0; x < dd[0]; ++x) {
        const int o = axis == 0 ? x : axis == 1 ? y : z;
        const Lerp& l = tab[o];
        const std::size_t base = (axis == 0 ? 0 : x) * sx + (axis == 1 ? 0 : y) * sy + (axis == 2 ? 0 : z) * sz;
        const T g = dout[(static_cast<std::size_t>(z) * dd[1] + y) * dd[0] + x];
        din[base + l.i0 * stride_in] += static_cast<T>((1.0 - l.t) * g);
        din[base + l.i1 * stride_in] += static_cast<T>(l.t * g);
      }
}

}  // namespace detail

template <typename T>
FeatureMap<T> upsample_forward(const FeatureMap<T>& in, int f) {
  const Index3 d0 = in.dims;
  const Index3 d1{d0[0] * f, d0[1], d0[2]};
  const Index3 d2{d0[0] * f, d0[1] * f, d0[2]};
  const Index3 d3{d0[0] * f, d0[1] * f, d0[2] * f};
  const auto tx = detail::lerp_table(d0[0], f), ty = detail::lerp_table(d0[1], f), tz = detail::lerp_table(d0[2], f);
  FeatureMap<T> out(in.channels, d3);
  std::vector<T> a(FeatureMap<T>::voxels_of(d1)), b(FeatureMap<T>::voxels_of(d2));
  for (int c = 0; c < in.channels; ++c) {
    detail::lerp_axis(in.channel(c), d0, a.data(), d1, 0, tx);
    detail::lerp_axis(a.data(), d1, b.data(), d2, 1, ty);
    detail::lerp_axis(b.data(), d2, out.channel(c), d3, 2, tz);
  }
  return out;
}

template <typename T>
void upsample_backward(const FeatureMap<T>& dout, int f, FeatureMap<T>& din) {
  const Index3 d0 = din.dims;
  const Index3 d1{d0[0] * f, d0[1], d0[2]};
  const Index3 d2{d0[0] * f, d0[1] * f, d0[2]};
  const Index3 d3 = dout.dims;
  const auto tx = detail::lerp_table(d0[0], f), ty = detail::lerp_table(d0[1], f), tz = detail::lerp_table(d0[2], f);
  std::vector<T> a(FeatureMap<T>::voxels_of(d1)), b(FeatureMap<T>::voxels_of(d2));
  for (int c = 0; c < dout.channels; ++c) {
    std::fill(a.begin(), a.end(), T{0});
    std::fill(b.begin(), b.end(), T{0});
    detail::lerp_axis_adjoint(dout.channel(c), d3, b.data(), d2, 2, tz);
    detail::lerp_axis_adjoint(b.data(), d2, a.data(), d1, 1, ty);
    detail::lerp_axis_adjoint(a.data(), d1, din.channel(c), d0, 0, tx);
  }
}

}  // namespace lseg::nn
