#include "das/nn.hpp"

#include "das/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace das::nn {

namespace {

// Upper bound on im2col buffer elements per GEMM block.
constexpr std::size_t kColBudget = std::size_t{1} << 18;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatC = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
// A row-major (channels x positions) block viewed transposed, so the long
// position axis becomes the GEMM row dimension.
template <typename T>
using StridedMapT = Eigen::Map<MatC<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMapT = Eigen::Map<const MatC<T>, 0, Eigen::OuterStride<>>;

struct ConvGeometry {
  std::size_t h, w, ho, wo, k, stride, pad;
};

// Range of output columns ox in [0, wo) whose input column ox*stride + kx - pad
// falls inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_ox(const ConvGeometry& g, std::size_t kx) {
  const long off = static_cast<long>(kx) - static_cast<long>(g.pad);
  const auto s = static_cast<long>(g.stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(g.w) - 1 - off) / s + 1;  // exclusive
  if (static_cast<long>(g.w) - 1 - off < 0) hi = 0;
  lo = std::clamp(lo, 0L, static_cast<long>(g.wo));
  hi = std::clamp(hi, lo, static_cast<long>(g.wo));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Gather (scatter when Accumulate) between a CNHW activation and a K x nb
// column block covering flat output positions [j0, j0 + nb).
template <bool Accumulate, typename T>
void im2col_block(std::conditional_t<Accumulate, Act<T>&, const Act<T>&> x, const ConvGeometry& g,
                  std::size_t j0, std::size_t nb,
                  std::conditional_t<Accumulate, const T*, T*> cols) {
  const std::size_t hw_out = g.ho * g.wo;
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < x.c; ++ci) {
    auto* xc = x.channel(ci);
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        const auto [ox_lo, ox_hi] = valid_ox(g, kx);
        auto* row = cols + r * nb;
        std::size_t filled = 0;
        std::size_t j = j0;
        while (filled < nb) {
          const std::size_t b = j / hw_out;
          const std::size_t rem = j - b * hw_out;
          const std::size_t oy = rem / g.wo;
          const std::size_t ox0 = rem - oy * g.wo;
          const std::size_t len = std::min(g.wo - ox0, nb - filled);
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          auto* seg = row + filled;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            if constexpr (!Accumulate) std::fill(seg, seg + len, T(0));
          } else {
            auto* src = xc + (b * g.h + static_cast<std::size_t>(iy)) * g.w;
            const std::size_t lo = std::clamp(ox_lo, ox0, ox0 + len);
            const std::size_t hi = std::clamp(ox_hi, lo, ox0 + len);
            if constexpr (!Accumulate) {
              std::fill(seg, seg + (lo - ox0), T(0));
              std::fill(seg + (hi - ox0), seg + len, T(0));
            }
            const long base = static_cast<long>(kx) - static_cast<long>(g.pad);
            if (g.stride == 1) {
              auto* s0 = src + static_cast<long>(lo) + base;
              auto* d0 = seg + (lo - ox0);
              const std::size_t count = hi - lo;
              if constexpr (Accumulate) {
                for (std::size_t i = 0; i < count; ++i) s0[i] += d0[i];
              } else {
                std::copy_n(s0, count, d0);
              }
              filled += len;
              j += len;
              continue;
            }
            for (std::size_t ox = lo; ox < hi; ++ox) {
              const auto ix = static_cast<std::size_t>(static_cast<long>(ox * g.stride) + base);
              if constexpr (Accumulate) {
                src[ix] += seg[ox - ox0];
              } else {
                seg[ox - ox0] = src[ix];
              }
            }
          }
          filled += len;
          j += len;
        }
      }
    }
  }
}

template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> cvec(const T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

// Sums fixed-size chunks in the working precision (vectorized) and
// accumulates the chunk sums in double.
template <typename F>
double blocked_sum(std::size_t m, F chunk_sum) {
  constexpr std::size_t kChunk = 2048;
  double total = 0.0;
  for (std::size_t i = 0; i < m; i += kChunk) total += static_cast<double>(chunk_sum(i, std::min(kChunk, m - i)));
  return total;
}

}  // namespace

template <typename T>
Param<T>::Param(std::string name_, std::vector<std::size_t> shape_)
    : name(std::move(name_)), shape(std::move(shape_)) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  value.assign(n, T(0));
  grad.assign(n, T(0));
}

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels,
                  std::size_t kernel, std::size_t stride)
    : weight(std::move(name), {out_channels, in_channels, kernel, kernel}),
      cin_(in_channels),
      cout_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(kernel / 2) {}

template <typename T>
void Conv2d<T>::forward(const Act<T>& x, Act<T>& y, Buffer<T>& cols) const {
  if (x.c != cin_) fail(Errc::shape_mismatch, weight.name + ": input channel mismatch");
  const ConvGeometry g{x.h, x.w, out_size(x.h), out_size(x.w), k_, stride_, pad_};
  y.reshape(cout_, x.n, g.ho, g.wo);
  const std::size_t total = y.plane();
  const std::size_t rows = cin_ * k_ * k_;
  const std::size_t block = std::min(total, std::max<std::size_t>(1, kColBudget / rows));
  if (cols.size() < rows * block) cols.resize(rows * block);
  const Eigen::Map<const MatR<T>> w(weight.value.data(), static_cast<Eigen::Index>(cout_),
                                    static_cast<Eigen::Index>(rows));
  for (std::size_t j0 = 0; j0 < total; j0 += block) {
    const std::size_t nb = std::min(block, total - j0);
    im2col_block<false, T>(x, g, j0, nb, cols.data());
    const Eigen::Map<const MatC<T>> ct(cols.data(), static_cast<Eigen::Index>(nb),
                                       static_cast<Eigen::Index>(rows));
    StridedMapT<T> out(y.v.data() + j0, static_cast<Eigen::Index>(nb), static_cast<Eigen::Index>(cout_),
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    out.noalias() = ct * w.transpose();
  }
}

template <typename T>
void Conv2d<T>::backward(const Act<T>& x, const Act<T>& dy, Act<T>* dx, Buffer<T>& cols,
                         Buffer<T>& dcols) {
  const ConvGeometry g{x.h, x.w, out_size(x.h), out_size(x.w), k_, stride_, pad_};
  if (dy.c != cout_ || dy.n != x.n || dy.h != g.ho || dy.w != g.wo)
    fail(Errc::shape_mismatch, weight.name + ": gradient shape mismatch");
  if (dx) {
    dx->reshape(x.c, x.n, x.h, x.w);
    std::fill(dx->v.begin(), dx->v.end(), T(0));
  }
  const std::size_t total = dy.plane();
  const std::size_t rows = cin_ * k_ * k_;
  const std::size_t block = std::min(total, std::max<std::size_t>(1, kColBudget / rows));
  if (cols.size() < rows * block) cols.resize(rows * block);
  if (dx && dcols.size() < rows * block) dcols.resize(rows * block);
  const Eigen::Map<const MatR<T>> w(weight.value.data(), static_cast<Eigen::Index>(cout_),
                                    static_cast<Eigen::Index>(rows));
  Eigen::Map<MatC<T>> dwt(weight.grad.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cout_));
  for (std::size_t j0 = 0; j0 < total; j0 += block) {
    const std::size_t nb = std::min(block, total - j0);
    im2col_block<false, T>(x, g, j0, nb, cols.data());
    const Eigen::Map<const MatR<T>> c(cols.data(), static_cast<Eigen::Index>(rows),
                                      static_cast<Eigen::Index>(nb));
    const ConstStridedMapT<T> dt(dy.v.data() + j0, static_cast<Eigen::Index>(nb),
                                 static_cast<Eigen::Index>(cout_),
                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    dwt.noalias() += c * dt;
    if (dx) {
      Eigen::Map<MatC<T>> dct(dcols.data(), static_cast<Eigen::Index>(nb),
                              static_cast<Eigen::Index>(rows));
      dct.noalias() = dt * w;
      im2col_block<true, T>(*dx, g, j0, nb, dcols.data());
    }
  }
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::string name_, std::size_t channels)
    : gamma(name_ + ".weight", {channels}),
      beta(name_ + ".bias", {channels}),
      running_mean(channels, T(0)),
      running_var(channels, T(1)),
      name(std::move(name_)) {
  std::fill(gamma.value.begin(), gamma.value.end(), T(1));
}

template <typename T>
void BatchNorm2d<T>::forward(const Act<T>& x, Act<T>& y, bool use_batch_stats,
                             BnCache<T>* cache) const {
  if (x.c != channels()) fail(Errc::shape_mismatch, name + ": channel mismatch");
  y.reshape(x.c, x.n, x.h, x.w);
  const std::size_t m = x.plane();
  if (cache) {
    cache->xhat.reshape(x.c, x.n, x.h, x.w);
    cache->inv_std.assign(x.c, T(0));
    cache->batch_mean.assign(x.c, 0.0);
    cache->batch_var.assign(x.c, 0.0);
    cache->count = m;
    cache->used_batch_stats = use_batch_stats;
  }
  for (std::size_t ch = 0; ch < x.c; ++ch) {
    const T* xc = x.channel(ch);
    T* yc = y.channel(ch);
    double mean, var;
    if (use_batch_stats) {
      mean = blocked_sum(m, [&](auto i, auto n) { return cvec(xc + i, n).sum(); }) / static_cast<double>(m);
      const T mu = static_cast<T>(mean);
      var = blocked_sum(m, [&](auto i, auto n) { return (cvec(xc + i, n) - mu).square().sum(); }) /
            static_cast<double>(m);
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + kEpsilon));
    const T mu = static_cast<T>(mean);
    const T g = gamma.value[ch];
    const T b = beta.value[ch];
    if (cache) {
      T* xh = cache->xhat.channel(ch);
      for (std::size_t i = 0; i < m; ++i) {
        xh[i] = (xc[i] - mu) * inv;
        yc[i] = g * xh[i] + b;
      }
      cache->inv_std[ch] = inv;
      cache->batch_mean[ch] = mean;
      cache->batch_var[ch] = var;
    } else {
      const T scale = g * inv;
      const T shift = b - mu * scale;
      for (std::size_t i = 0; i < m; ++i) yc[i] = xc[i] * scale + shift;
    }
  }
}

template <typename T>
void BatchNorm2d<T>::backward(const BnCache<T>& cache, const Act<T>& dy, Act<T>& dx) {
  const Act<T>& xhat = cache.xhat;
  if (dy.v.size() != xhat.v.size()) fail(Errc::shape_mismatch, name + ": gradient shape mismatch");
  dx.reshape(xhat.c, xhat.n, xhat.h, xhat.w);
  const std::size_t m = xhat.plane();
  for (std::size_t ch = 0; ch < xhat.c; ++ch) {
    const T* d = dy.channel(ch);
    const T* xh = xhat.channel(ch);
    T* out = dx.channel(ch);
    const double dbeta = blocked_sum(m, [&](auto i, auto n) { return cvec(d + i, n).sum(); });
    const double dgamma =
        blocked_sum(m, [&](auto i, auto n) { return (cvec(d + i, n) * cvec(xh + i, n)).sum(); });
    gamma.grad[ch] += static_cast<T>(dgamma);
    beta.grad[ch] += static_cast<T>(dbeta);
    const T scale = gamma.value[ch] * cache.inv_std[ch];
    if (cache.used_batch_stats) {
      const T inv_m = static_cast<T>(1.0 / static_cast<double>(m));
      const T mean_d = static_cast<T>(dbeta) * inv_m;
      const T mean_dx = static_cast<T>(dgamma) * inv_m;
      for (std::size_t i = 0; i < m; ++i) out[i] = scale * (d[i] - mean_d - xh[i] * mean_dx);
    } else {
      for (std::size_t i = 0; i < m; ++i) out[i] = scale * d[i];
    }
  }
}

template <typename T>
void BatchNorm2d<T>::update_running(const BnCache<T>& cache) {
  if (!cache.used_batch_stats) return;
  const double m = static_cast<double>(cache.count);
  const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
  for (std::size_t ch = 0; ch < channels(); ++ch) {
    running_mean[ch] = static_cast<T>((1.0 - kMomentum) * running_mean[ch] + kMomentum * cache.batch_mean[ch]);
    running_var[ch] = static_cast<T>((1.0 - kMomentum) * running_var[ch] +
                                     kMomentum * cache.batch_var[ch] * unbias);
  }
}

template <typename T>
void relu_inplace(Act<T>& a) {
  for (T& v : a.v) v = v > T(0) ? v : T(0);
}

template <typename T>
BasicBlock<T>::BasicBlock(const std::string& name, std::size_t in_channels,
                          std::size_t out_channels, std::size_t stride)
    : conv1(name + ".conv1.weight", in_channels, out_channels, 3, stride),
      conv2(name + ".conv2.weight", out_channels, out_channels, 3, 1),
      bn1(name + ".bn1", out_channels),
      bn2(name + ".bn2", out_channels),
      has_proj_(stride != 1 || in_channels != out_channels) {
  if (has_proj_) {
    proj = Conv2d<T>(name + ".shortcut.conv.weight", in_channels, out_channels, 1, stride);
    proj_bn = BatchNorm2d<T>(name + ".shortcut.bn", out_channels);
  }
}

template <typename T>
void BasicBlock<T>::forward(const Act<T>& x, Act<T>& out, bool use_batch_stats, BlockCache<T>& c,
                            bool record) const {
  conv1.forward(x, c.h, c.cols);
  bn1.forward(c.h, c.r1, use_batch_stats, record ? &c.bn1 : nullptr);
  relu_inplace(c.r1);
  conv2.forward(c.r1, c.h, c.cols);
  bn2.forward(c.h, out, use_batch_stats, record ? &c.bn2 : nullptr);
  if (has_proj_) {
    proj.forward(x, c.p, c.cols);
    proj_bn.forward(c.p, c.s, use_batch_stats, record ? &c.bn_proj : nullptr);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += c.s.v[i];
  } else {
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += x.v[i];
  }
  relu_inplace(out);
}

template <typename T>
void BasicBlock<T>::backward(const Act<T>& x, BlockCache<T>& c, Act<T>& dout, Act<T>& dx) {
  for (std::size_t i = 0; i < dout.v.size(); ++i)
    if (!(c.out.v[i] > T(0))) dout.v[i] = T(0);
  bn2.backward(c.bn2, dout, c.dh);
  conv2.backward(c.r1, c.dh, &c.dr1, c.cols, c.dcols);
  for (std::size_t i = 0; i < c.dr1.v.size(); ++i)
    if (!(c.r1.v[i] > T(0))) c.dr1.v[i] = T(0);
  bn1.backward(c.bn1, c.dr1, c.dh);
  conv1.backward(x, c.dh, &dx, c.cols, c.dcols);
  if (has_proj_) {
    proj_bn.backward(c.bn_proj, dout, c.dp);
    proj.backward(x, c.dp, &c.dxp, c.cols, c.dcols);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += c.dxp.v[i];
  } else {
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dout.v[i];
  }
}

template <typename T>
void BasicBlock<T>::update_running(const BlockCache<T>& cache) {
  bn1.update_running(cache.bn1);
  bn2.update_running(cache.bn2);
  if (has_proj_) proj_bn.update_running(cache.bn_proj);
}

template struct Param<float>;
template struct Param<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class BasicBlock<float>;
template class BasicBlock<double>;
template void relu_inplace<float>(Act<float>&);
template void relu_inplace<double>(Act<double>&);

}  // namespace das::nn
