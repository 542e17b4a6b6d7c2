#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <tuple>
#include <vector>

#include <cblas.h>

#include "lesionseg/label_map.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvParams {
  Tensor kernel;  // out-ch x in-ch x kh x kw (for transposed conv: in-ch x out-ch x kh x kw)
  Tensor bias;    // one value per output channel
  int stride = 1;
  int padding = 0;
};

inline ConvParams make_conv(int out_ch, int in_ch, int kh, int kw, int stride, int padding) {
  ConvParams p;
  p.kernel = Tensor({out_ch, in_ch, kh, kw});
  p.bias = Tensor({out_ch});
  p.stride = stride;
  p.padding = padding;
  return p;
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// (C,H,W) -> (C*kh*kw) x (Ho*Wo) patch matrix, zero padded
inline std::vector<float> im2col(const Tensor& x, int kh, int kw, int stride, int pad,
                                 int ho, int wo) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  std::vector<float> col(static_cast<std::size_t>(C) * kh * kw * ho * wo, 0.0f);
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int di = 0; di < kh; ++di)
      for (int dj = 0; dj < kw; ++dj, ++r) {
        float* dst = col.data() + r * ho * wo;
        for (int i = 0; i < ho; ++i) {
          int yi = i * stride + di - pad;
          if (yi < 0 || yi >= H) continue;
          const float* src = x.data.data() + (static_cast<std::size_t>(c) * H + yi) * W;
          for (int j = 0; j < wo; ++j) {
            int xj = j * stride + dj - pad;
            if (xj >= 0 && xj < W) dst[i * wo + j] = src[xj];
          }
        }
      }
  return col;
}

// adjoint of im2col: scatter-add patch matrix back into (C,H,W)
inline void col2im(const std::vector<float>& col, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int ho, int wo, Tensor& out) {
  std::size_t r = 0;
  for (int c = 0; c < C; ++c)
    for (int di = 0; di < kh; ++di)
      for (int dj = 0; dj < kw; ++dj, ++r) {
        const float* src = col.data() + r * ho * wo;
        for (int i = 0; i < ho; ++i) {
          int yi = i * stride + di - pad;
          if (yi < 0 || yi >= H) continue;
          float* dst = out.data.data() + (static_cast<std::size_t>(c) * H + yi) * W;
          for (int j = 0; j < wo; ++j) {
            int xj = j * stride + dj - pad;
            if (xj >= 0 && xj < W) dst[xj] += src[i * wo + j];
          }
        }
      }
}

}  // namespace detail

inline Tensor conv2d_forward(const Tensor& x, const ConvParams& p) {
  if (x.shape.size() != 3) throw ShapeError("conv2d: input must be rank 3 (C,H,W)");
  const int O = p.kernel.shape[0], I = p.kernel.shape[1];
  const int kh = p.kernel.shape[2], kw = p.kernel.shape[3];
  if (x.shape[0] != I)
    throw ShapeError("conv2d: input has " + std::to_string(x.shape[0]) +
                     " channels, kernel expects " + std::to_string(I));
  const int ho = conv_out_extent(x.shape[1], kh, p.stride, p.padding);
  const int wo = conv_out_extent(x.shape[2], kw, p.stride, p.padding);
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: degenerate output size");

  auto col = detail::im2col(x, kh, kw, p.stride, p.padding, ho, wo);
  Tensor y({O, ho, wo});
  const int K = I * kh * kw, N = ho * wo;
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, O, N, K, 1.0f,
              p.kernel.data.data(), K, col.data(), N, 0.0f, y.data.data(), N);
  for (int o = 0; o < O; ++o) {
    float b = p.bias.data[o];
    float* row = y.data.data() + static_cast<std::size_t>(o) * N;
    for (int i = 0; i < N; ++i) row[i] += b;
  }
  return y;
}

struct ConvGrads {
  Tensor grad_x;
  Tensor grad_kernel;
  Tensor grad_bias;
};

inline ConvGrads conv2d_backward(const Tensor& x, const ConvParams& p, const Tensor& grad_out) {
  const int O = p.kernel.shape[0], I = p.kernel.shape[1];
  const int kh = p.kernel.shape[2], kw = p.kernel.shape[3];
  const int ho = conv_out_extent(x.shape[1], kh, p.stride, p.padding);
  const int wo = conv_out_extent(x.shape[2], kw, p.stride, p.padding);
  if (grad_out.shape != std::vector<int>{O, ho, wo})
    throw ShapeError("conv2d_backward: grad_out shape mismatch");

  const int K = I * kh * kw, N = ho * wo;
  ConvGrads g{zeros_like(x), zeros_like(p.kernel), zeros_like(p.bias)};

  // grad_kernel = grad_out * col^T
  auto col = detail::im2col(x, kh, kw, p.stride, p.padding, ho, wo);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, O, K, N, 1.0f,
              grad_out.data.data(), N, col.data(), N, 0.0f, g.grad_kernel.data.data(), K);

  for (int o = 0; o < O; ++o) {
    const float* row = grad_out.data.data() + static_cast<std::size_t>(o) * N;
    double s = 0.0;
    for (int i = 0; i < N; ++i) s += row[i];
    g.grad_bias.data[o] = static_cast<float>(s);
  }

  // grad_x = col2im(kernel^T * grad_out)
  std::vector<float> colg(static_cast<std::size_t>(K) * N);
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, N, O, 1.0f,
              p.kernel.data.data(), K, grad_out.data.data(), N, 0.0f, colg.data(), N);
  detail::col2im(colg, I, x.shape[1], x.shape[2], kh, kw, p.stride, p.padding, ho, wo, g.grad_x);
  return g;
}

// Adjoint of conv2d_forward with the same kernel, plus a per-output-channel
// bias. Kernel layout is (in-ch, out-ch, kh, kw): the kernel of the forward
// conv this op transposes.
inline Tensor transposed_conv2d_forward(const Tensor& x, const ConvParams& p) {
  if (x.shape.size() != 3) throw ShapeError("transposed_conv2d: input must be rank 3");
  const int Ci = p.kernel.shape[0], Co = p.kernel.shape[1];
  const int kh = p.kernel.shape[2], kw = p.kernel.shape[3];
  if (x.shape[0] != Ci) throw ShapeError("transposed_conv2d: channel mismatch");
  const int H = x.shape[1], W = x.shape[2];
  const int ho = (H - 1) * p.stride - 2 * p.padding + kh;
  const int wo = (W - 1) * p.stride - 2 * p.padding + kw;
  if (ho < 1 || wo < 1) throw ShapeError("transposed_conv2d: degenerate output size");

  const int K = Co * kh * kw, N = H * W;
  std::vector<float> colg(static_cast<std::size_t>(K) * N);
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, N, Ci, 1.0f,
              p.kernel.data.data(), K, x.data.data(), N, 0.0f, colg.data(), N);
  Tensor y({Co, ho, wo});
  detail::col2im(colg, Co, ho, wo, kh, kw, p.stride, p.padding, H, W, y);
  for (int o = 0; o < Co; ++o) {
    float b = p.bias.data[o];
    float* plane = y.data.data() + static_cast<std::size_t>(o) * ho * wo;
    for (int i = 0; i < ho * wo; ++i) plane[i] += b;
  }
  return y;
}

inline ConvGrads transposed_conv2d_backward(const Tensor& x, const ConvParams& p,
                                            const Tensor& grad_out) {
  const int Ci = p.kernel.shape[0], Co = p.kernel.shape[1];
  const int kh = p.kernel.shape[2], kw = p.kernel.shape[3];
  const int H = x.shape[1], W = x.shape[2];
  const int ho = (H - 1) * p.stride - 2 * p.padding + kh;
  const int wo = (W - 1) * p.stride - 2 * p.padding + kw;
  if (grad_out.shape != std::vector<int>{Co, ho, wo})
    throw ShapeError("transposed_conv2d_backward: grad_out shape mismatch");

  ConvGrads g;
  // adjoint of the adjoint: grad_x is a plain convolution of grad_out
  ConvParams fwd{p.kernel, Tensor({Ci}), p.stride, p.padding};
  g.grad_x = conv2d_forward(grad_out, fwd);

  // grad_kernel: same accumulation as conv with input/grad_out roles swapped
  const int K = Co * kh * kw, N = H * W;
  auto col = detail::im2col(grad_out, kh, kw, p.stride, p.padding, H, W);
  g.grad_kernel = zeros_like(p.kernel);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Ci, K, N, 1.0f,
              x.data.data(), N, col.data(), N, 0.0f, g.grad_kernel.data.data(), K);

  g.grad_bias = Tensor({Co});
  for (int o = 0; o < Co; ++o) {
    const float* plane = grad_out.data.data() + static_cast<std::size_t>(o) * ho * wo;
    double s = 0.0;
    for (int i = 0; i < ho * wo; ++i) s += plane[i];
    g.grad_bias.data[o] = static_cast<float>(s);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization (statistics over the spatial positions of one sample,
// matching mini-batch size 1)
// ---------------------------------------------------------------------------

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float epsilon = 1e-5f;
  float momentum_stat = 0.1f;
};

inline BatchNormParams make_batchnorm(int channels) {
  BatchNormParams p;
  p.gamma = Tensor({channels}, 1.0f);
  p.beta = Tensor({channels}, 0.0f);
  p.running_mean = Tensor({channels}, 0.0f);
  p.running_var = Tensor({channels}, 1.0f);
  return p;
}

struct BatchNormCache {
  Tensor mean;     // per channel
  Tensor inv_std;  // per channel, 1/sqrt(var+eps)
};

enum class Mode { Train, Infer };

inline Tensor batchnorm_forward(const Tensor& x, BatchNormParams& p, Mode mode,
                                BatchNormCache* cache = nullptr) {
  const int C = x.shape[0];
  if (p.gamma.shape[0] != C) throw ShapeError("batchnorm: channel mismatch");
  const std::size_t n = x.numel() / C;
  Tensor y = zeros_like(x);
  Tensor mean({C}), inv_std({C});

  for (int c = 0; c < C; ++c) {
    const float* src = x.data.data() + c * n;
    double mu, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += src[i];
      mu = s / static_cast<double>(n);
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = src[i] - mu;
        sq += d * d;
      }
      var = sq / static_cast<double>(n);
      float m = p.momentum_stat;
      p.running_mean.data[c] = (1.0f - m) * p.running_mean.data[c] + m * static_cast<float>(mu);
      p.running_var.data[c] = (1.0f - m) * p.running_var.data[c] + m * static_cast<float>(var);
    } else {
      mu = p.running_mean.data[c];
      var = p.running_var.data[c];
    }
    double istd = 1.0 / std::sqrt(var + p.epsilon);
    mean.data[c] = static_cast<float>(mu);
    inv_std.data[c] = static_cast<float>(istd);
    float g = p.gamma.data[c], b = p.beta.data[c];
    float* dst = y.data.data() + c * n;
    for (std::size_t i = 0; i < n; ++i)
      dst[i] = static_cast<float>(g * (src[i] - mu) * istd + b);
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

struct BatchNormGrads {
  Tensor grad_x;
  Tensor grad_gamma;
  Tensor grad_beta;
};

inline BatchNormGrads batchnorm_backward(const Tensor& x, const BatchNormParams& p,
                                         const BatchNormCache& cache, const Tensor& grad_out) {
  const int C = x.shape[0];
  const std::size_t n = x.numel() / C;
  BatchNormGrads g{zeros_like(x), zeros_like(p.gamma), zeros_like(p.beta)};
  for (int c = 0; c < C; ++c) {
    const float* xs = x.data.data() + c * n;
    const float* gy = grad_out.data.data() + c * n;
    float* gx = g.grad_x.data.data() + c * n;
    double mu = cache.mean.data[c], istd = cache.inv_std.data[c];
    double gamma = p.gamma.data[c];
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double xhat = (xs[i] - mu) * istd;
      sum_gy += gy[i];
      sum_gy_xhat += gy[i] * xhat;
    }
    g.grad_beta.data[c] = static_cast<float>(sum_gy);
    g.grad_gamma.data[c] = static_cast<float>(sum_gy_xhat);
    double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double xhat = (xs[i] - mu) * istd;
      gx[i] = static_cast<float>(gamma * istd *
                                 (gy[i] - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.data) v = std::max(0.0f, v);
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (x.data[i] <= 0.0f) g.data[i] = 0.0f;
  return g;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.data) v = 1.0f / (1.0f + std::exp(-v));
  return y;
}

inline Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < y.numel(); ++i) g.data[i] *= y.data[i] * (1.0f - y.data[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Max pooling (2x2, stride 2; odd extents padded bottom/right with -inf so
// the output extent is ceil(extent/2); ties go to the first element in
// row-major window order)
// ---------------------------------------------------------------------------

struct PoolResult {
  Tensor y;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

inline PoolResult maxpool2d(const Tensor& x, int window = 2, int stride = 2) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int ho = (H + stride - 1) / stride, wo = (W + stride - 1) / stride;
  PoolResult r{Tensor({C, ho, wo}), {}};
  r.argmax.resize(r.y.numel());
  std::size_t out = 0;
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j, ++out) {
        float best = -std::numeric_limits<float>::infinity();
        std::size_t best_idx = 0;
        for (int di = 0; di < window; ++di)
          for (int dj = 0; dj < window; ++dj) {
            int yi = i * stride + di, xj = j * stride + dj;
            if (yi >= H || xj >= W) continue;
            std::size_t idx = (static_cast<std::size_t>(c) * H + yi) * W + xj;
            if (x.data[idx] > best) {
              best = x.data[idx];
              best_idx = idx;
            }
          }
        r.y.data[out] = best;
        r.argmax[out] = best_idx;
      }
  return r;
}

inline Tensor maxpool2d_backward(const Tensor& x, const PoolResult& pooled,
                                 const Tensor& grad_out) {
  Tensor g = zeros_like(x);
  for (std::size_t i = 0; i < grad_out.numel(); ++i) g.data[pooled.argmax[i]] += grad_out.data[i];
  return g;
}

// ---------------------------------------------------------------------------
// Upsampling
// ---------------------------------------------------------------------------

enum class UpsampleAlgo { Nearest, Bilinear };

inline Tensor upsample(const Tensor& x, int factor, UpsampleAlgo algo) {
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  if (factor == 1) return x;
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int ho = H * factor, wo = W * factor;
  Tensor y({C, ho, wo});
  if (algo == UpsampleAlgo::Nearest) {
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) y.at3(c, i, j) = x.at3(c, i / factor, j / factor);
    return y;
  }
  // bilinear, align-corners sample positions
  auto src_pos = [](int out, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(out) * (n_in - 1) / (n_out - 1);
  };
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < ho; ++i) {
      double sy = src_pos(i, ho, H);
      int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, H - 1);
      double fy = sy - y0;
      for (int j = 0; j < wo; ++j) {
        double sx = src_pos(j, wo, W);
        int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, W - 1);
        double fx = sx - x0;
        double v = (1 - fy) * ((1 - fx) * x.at3(c, y0, x0) + fx * x.at3(c, y0, x1)) +
                   fy * ((1 - fx) * x.at3(c, y1, x0) + fx * x.at3(c, y1, x1));
        y.at3(c, i, j) = static_cast<float>(v);
      }
    }
  return y;
}

inline Tensor upsample_backward(const Tensor& x, int factor, UpsampleAlgo algo,
                                const Tensor& grad_out) {
  if (factor == 1) return grad_out;
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int ho = H * factor, wo = W * factor;
  Tensor g = zeros_like(x);
  if (algo == UpsampleAlgo::Nearest) {
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) g.at3(c, i / factor, j / factor) += grad_out.at3(c, i, j);
    return g;
  }
  auto src_pos = [](int out, int n_out, int n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(out) * (n_in - 1) / (n_out - 1);
  };
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < ho; ++i) {
      double sy = src_pos(i, ho, H);
      int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, H - 1);
      double fy = sy - y0;
      for (int j = 0; j < wo; ++j) {
        double sx = src_pos(j, wo, W);
        int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, W - 1);
        double fx = sx - x0;
        float gy = grad_out.at3(c, i, j);
        g.at3(c, y0, x0) += static_cast<float>((1 - fy) * (1 - fx) * gy);
        g.at3(c, y0, x1) += static_cast<float>((1 - fy) * fx * gy);
        g.at3(c, y1, x0) += static_cast<float>(fy * (1 - fx) * gy);
        g.at3(c, y1, x1) += static_cast<float>(fy * fx * gy);
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// Channel concatenation (skip connections)
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
    throw ShapeError("concat_channels: spatial extents differ");
  Tensor y({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.numel());
  return y;
}

inline std::pair<Tensor, Tensor> concat_channels_backward(const Tensor& a, const Tensor& b,
                                                          const Tensor& grad_out) {
  Tensor ga = zeros_like(a), gb = zeros_like(b);
  std::copy(grad_out.data.begin(), grad_out.data.begin() + a.numel(), ga.data.begin());
  std::copy(grad_out.data.begin() + a.numel(), grad_out.data.end(), gb.data.begin());
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

struct DropoutResult {
  Tensor y;
  std::vector<float> mask;  // per-element multiplier, 0 or 1/(1-rate)
};

inline DropoutResult dropout(const Tensor& x, double rate, Rng& rng, Mode mode) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  DropoutResult r{x, {}};
  if (mode == Mode::Infer || rate == 0.0) return r;
  r.mask.resize(x.numel());
  float scale = static_cast<float>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    r.mask[i] = rng.uniform() < rate ? 0.0f : scale;
    r.y.data[i] = x.data[i] * r.mask[i];
  }
  return r;
}

inline Tensor dropout_backward(const DropoutResult& res, const Tensor& grad_out) {
  if (res.mask.empty()) return grad_out;
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] *= res.mask[i];
  return g;
}

// ---------------------------------------------------------------------------
// Weighted per-pixel cross entropy over the 2-channel head; Background
// pixels (label 0) contribute nothing to loss or gradient.
// ---------------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
  bool empty_sample = false;  // no non-background pixel in the label
};

inline LossResult weighted_pixel_cross_entropy(const Tensor& logits, const LabelMap& labels,
                                               const std::array<double, 2>& class_weights) {
  if (logits.shape.size() != 3 || logits.shape[0] != 2)
    throw ShapeError("cross_entropy: logits must be (2,H,W)");
  const int H = logits.shape[1], W = logits.shape[2];
  if (labels.height != H || labels.width != W)
    throw ShapeError("cross_entropy: label shape mismatch");
  if (class_weights[0] < 0.0 || class_weights[1] < 0.0)
    throw std::invalid_argument("cross_entropy: negative class weight");

  LossResult r;
  r.grad_logits = zeros_like(logits);
  std::size_t n_valid = 0;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  double total = 0.0;
  constexpr double kClamp = 1e-7;

  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      std::uint8_t lab = labels.at(i, j);
      if (lab == kBackground) continue;
      ++n_valid;
      std::size_t px = static_cast<std::size_t>(i) * W + j;
      double a = logits.data[px], b = logits.data[plane + px];
      double m = std::max(a, b);
      double ea = std::exp(a - m), eb = std::exp(b - m);
      double p0 = ea / (ea + eb), p1 = 1.0 - p0;
      int cls = lab - 1;  // 0=Skin, 1=Lesion
      double w = class_weights[cls];
      double p_true = std::clamp(cls == 0 ? p0 : p1, kClamp, 1.0 - kClamp);
      total += -w * std::log(p_true);
      r.grad_logits.data[px] += static_cast<float>(w * (p0 - (cls == 0 ? 1.0 : 0.0)));
      r.grad_logits.data[plane + px] += static_cast<float>(w * (p1 - (cls == 1 ? 1.0 : 0.0)));
    }

  if (n_valid == 0) {
    r.empty_sample = true;
    return r;
  }
  double inv = 1.0 / static_cast<double>(n_valid);
  r.loss = total * inv;
  for (float& v : r.grad_logits.data) v = static_cast<float>(v * inv);
  return r;
}

}  // namespace lesionseg
