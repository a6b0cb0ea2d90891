#pragma once

// Building blocks of the residual classifier. Activations are stored
// channel-major over the whole batch (C x N x H x W) so a convolution over a
// batch is a single matrix product against an im2col buffer.

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <vector>

namespace das {

// Numeric buffers start on a SIMD boundary. Eigen's vectorized kernels peel
// differently depending on where an array starts, so unaligned heap blocks
// would make results depend on the allocator.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

}  // namespace das

namespace das::nn {

template <typename T>
struct Act {
  std::size_t c = 0, n = 0, h = 0, w = 0;
  Buffer<T> v;

  void reshape(std::size_t c_, std::size_t n_, std::size_t h_, std::size_t w_) {
    c = c_;
    n = n_;
    h = h_;
    w = w_;
    v.resize(c * n * h * w);
  }
  std::size_t plane() const { return n * h * w; }  // elements per channel
  T* channel(std::size_t k) { return v.data() + k * plane(); }
  const T* channel(std::size_t k) const { return v.data() + k * plane(); }
};

template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  Buffer<T> value;
  Buffer<T> grad;

  Param() = default;
  Param(std::string name_, std::vector<std::size_t> shape_);
  std::size_t size() const { return value.size(); }
};

template <typename T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride);

  std::size_t out_size(std::size_t in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }
  std::size_t kernel() const { return k_; }

  // cols/dcols are caller-owned im2col scratch, reused across calls.
  void forward(const Act<T>& x, Act<T>& y, Buffer<T>& cols) const;
  // Accumulates into weight.grad; writes dx when non-null.
  void backward(const Act<T>& x, const Act<T>& dy, Act<T>* dx, Buffer<T>& cols,
                Buffer<T>& dcols);

  Param<T> weight;

private:
  std::size_t cin_ = 0, cout_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
};

template <typename T>
struct BnCache {
  Act<T> xhat;
  Buffer<T> inv_std;
  std::vector<double> batch_mean, batch_var;  // biased variance
  std::size_t count = 0;                      // values per channel
  bool used_batch_stats = false;
};

template <typename T>
class BatchNorm2d {
public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels);

  std::size_t channels() const { return gamma.size(); }

  // Batch statistics when use_batch_stats, running statistics otherwise.
  void forward(const Act<T>& x, Act<T>& y, bool use_batch_stats, BnCache<T>* cache) const;
  void backward(const BnCache<T>& cache, const Act<T>& dy, Act<T>& dx);
  void update_running(const BnCache<T>& cache);

  Param<T> gamma;
  Param<T> beta;
  Buffer<T> running_mean;
  Buffer<T> running_var;
  std::string name;
};

// Per-block activations kept for backward, plus scratch buffers that live as
// long as the cache so repeated steps do not reallocate.
template <typename T>
struct BlockCache {
  Act<T> r1;   // relu(bn1(conv1(x)))
  Act<T> out;  // relu(bn2(conv2(r1)) + shortcut(x))
  BnCache<T> bn1, bn2, bn_proj;
  Act<T> h, p, s, dh, dr1, dp, dxp;
  Buffer<T> cols, dcols;
};

template <typename T>
class BasicBlock {
public:
  BasicBlock() = default;
  BasicBlock(const std::string& name, std::size_t in_channels, std::size_t out_channels,
             std::size_t stride);

  bool has_projection() const { return has_proj_; }

  // Batch-norm caches are filled only when record is set (train mode).
  void forward(const Act<T>& x, Act<T>& out, bool use_batch_stats, BlockCache<T>& cache,
               bool record) const;
  void backward(const Act<T>& x, BlockCache<T>& cache, Act<T>& dout, Act<T>& dx);
  void update_running(const BlockCache<T>& cache);

  Conv2d<T> conv1, conv2, proj;
  BatchNorm2d<T> bn1, bn2, proj_bn;

private:
  bool has_proj_ = false;
};

template <typename T>
void relu_inplace(Act<T>& a);

}  // namespace das::nn
