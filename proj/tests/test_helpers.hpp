#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lesionseg/graph.hpp"
#include "lesionseg/layers.hpp"
#include "lesionseg/tensor.hpp"

namespace helpers {

// Miniature one-stage u-net (274 trainable parameters) for end-to-end
// gradient checks at desk scale. The no-batchnorm variant (262 parameters)
// keeps finite differences well conditioned: batch statistics inflate the
// curvature enough to push central differences against the float32 noise
// floor, and batchnorm gradients are validated in isolation anyway.
inline lesionseg::GraphSpec make_mini_unet(bool with_bn = true) {
  using namespace lesionseg;
  GraphSpec g;
  g.preset_name = "mini";
  g.encoder_depth = 1;
  auto node = [&](std::string id, LayerKind kind, std::vector<std::string> in, int ic, int oc,
                  int k = 3, int s = 1, int p = 1) {
    LayerNode n{std::move(id), kind, std::move(in)};
    n.in_channels = ic;
    n.out_channels = oc;
    n.kernel = k;
    n.stride = s;
    n.padding = p;
    g.nodes.push_back(std::move(n));
  };
  node("e_conv", LayerKind::Conv, {kInputId}, 3, 4);
  if (with_bn) node("e_bn", LayerKind::BatchNorm, {"e_conv"}, 4, 4);
  node("e_relu", LayerKind::Relu, {with_bn ? "e_bn" : "e_conv"}, 4, 4);
  node("pool", LayerKind::MaxPool, {"e_relu"}, 4, 4);
  node("up", LayerKind::TransposedConv, {"pool"}, 4, 2, 2, 2, 0);
  node("skip", LayerKind::Concat, {"up", "e_relu"}, 6, 6);
  node("d_conv", LayerKind::Conv, {"skip"}, 6, 2);
  if (with_bn) node("d_bn", LayerKind::BatchNorm, {"d_conv"}, 2, 2);
  node("d_relu", LayerKind::Relu, {with_bn ? "d_bn" : "d_conv"}, 2, 2);
  node("head", LayerKind::Conv, {"d_relu"}, 2, 2, 1, 1, 0);
  node("loss", LayerKind::SoftmaxLoss, {"head"}, 2, 2);
  if (with_bn)
    g.encoder_node_ids = {"e_conv", "e_bn", "e_relu", "pool"};
  else
    g.encoder_node_ids = {"e_conv", "e_relu", "pool"};
  validate_graph(g);
  return g;
}

// reference convolution, nested loops, double accumulation
inline lesionseg::Tensor naive_conv(const lesionseg::Tensor& x, const lesionseg::ConvParams& p) {
  using lesionseg::Tensor;
  const int O = p.kernel.shape[0], I = p.kernel.shape[1];
  const int kh = p.kernel.shape[2], kw = p.kernel.shape[3];
  const int H = x.shape[1], W = x.shape[2];
  const int ho = lesionseg::conv_out_extent(H, kh, p.stride, p.padding);
  const int wo = lesionseg::conv_out_extent(W, kw, p.stride, p.padding);
  Tensor y({O, ho, wo});
  for (int o = 0; o < O; ++o)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double s = p.bias.data[o];
        for (int c = 0; c < I; ++c)
          for (int di = 0; di < kh; ++di)
            for (int dj = 0; dj < kw; ++dj) {
              int yi = i * p.stride + di - p.padding;
              int xj = j * p.stride + dj - p.padding;
              if (yi < 0 || yi >= H || xj < 0 || xj >= W) continue;
              s += static_cast<double>(x.at3(c, yi, xj)) *
                   p.kernel.data[((static_cast<std::size_t>(o) * I + c) * kh + di) * kw + dj];
            }
        y.at3(o, i, j) = static_cast<float>(s);
      }
  return y;
}

inline double rel_err(const lesionseg::Tensor& a, const lesionseg::Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a.data[i]) - b.data[i];
    num += d * d;
    den += static_cast<double>(a.data[i]) * a.data[i] +
           static_cast<double>(b.data[i]) * b.data[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-12);
}

inline double dot(const lesionseg::Tensor& a, const lesionseg::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

}  // namespace helpers
