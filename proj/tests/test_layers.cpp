#include <doctest.h>

#include <cmath>

#include "lesionseg/layers.hpp"
#include "test_helpers.hpp"

using namespace lesionseg;
using helpers::dot;
using helpers::naive_conv;
using helpers::rel_err;

namespace {

ConvParams random_conv(Rng& rng, int out_ch, int in_ch, int k, int stride, int pad,
                       bool with_bias = true) {
  ConvParams p = make_conv(out_ch, in_ch, k, k, stride, pad);
  p.kernel = randn(p.kernel.shape, 0.0, 0.2, rng);
  if (with_bias) p.bias = randn(p.bias.shape, 0.0, 0.1, rng);
  return p;
}

}  // namespace

TEST_CASE("conv matches the naive reference") {
  Rng rng(101);
  for (int trial = 0; trial < 40; ++trial) {
    int k = 1 + static_cast<int>(rng.uniform_int(4));
    int stride = 1 + static_cast<int>(rng.uniform_int(3));
    int pad = static_cast<int>(rng.uniform_int(3));
    int H = k + static_cast<int>(rng.uniform_int(10));
    int W = k + static_cast<int>(rng.uniform_int(10));
    int I = 1 + static_cast<int>(rng.uniform_int(4));
    int O = 1 + static_cast<int>(rng.uniform_int(4));
    if (conv_out_extent(H, k, stride, pad) < 1 || conv_out_extent(W, k, stride, pad) < 1)
      continue;
    Tensor x = randn({I, H, W}, 0.0, 1.0, rng);
    ConvParams p = random_conv(rng, O, I, k, stride, pad);
    Tensor got = conv2d_forward(x, p);
    Tensor want = naive_conv(x, p);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.numel(); ++i)
      CHECK(std::fabs(got.data[i] - want.data[i]) < 1e-5);
  }
}

TEST_CASE("conv shape errors") {
  Tensor x({2, 4, 4});
  ConvParams p = make_conv(1, 3, 3, 3, 1, 1);
  CHECK_THROWS_AS(conv2d_forward(x, p), ShapeError);
  ConvParams q = make_conv(1, 2, 5, 5, 1, 0);
  CHECK_THROWS_AS(conv2d_forward(x, q), ShapeError);
}

TEST_CASE("conv gradients match finite differences") {
  Rng rng(7);
  Tensor x = randn({2, 5, 5}, 0.0, 1.0, rng);
  ConvParams p = random_conv(rng, 3, 2, 3, 1, 1);
  Tensor w = randn({3, 5, 5}, 0.0, 1.0, rng);  // fixed cotangent

  ConvGrads g = conv2d_backward(x, p, w);

  auto lx = [&](const Tensor& t) { return dot(conv2d_forward(t, p), w); };
  CHECK(rel_err(g.grad_x, finite_difference_grad(lx, x, 1e-3)) < 1e-3);

  auto lk = [&](const Tensor& t) {
    ConvParams q = p;
    q.kernel = t;
    return dot(conv2d_forward(x, q), w);
  };
  CHECK(rel_err(g.grad_kernel, finite_difference_grad(lk, p.kernel, 1e-3)) < 1e-3);

  auto lb = [&](const Tensor& t) {
    ConvParams q = p;
    q.bias = t;
    return dot(conv2d_forward(x, q), w);
  };
  CHECK(rel_err(g.grad_bias, finite_difference_grad(lb, p.bias, 1e-3)) < 1e-3);
}

TEST_CASE("transposed conv output size and adjoint identity") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    int k = 2 + static_cast<int>(rng.uniform_int(3));
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    int pad = static_cast<int>(rng.uniform_int(std::min(k, 2)));
    int ho = 2 + static_cast<int>(rng.uniform_int(5));
    int wo = 2 + static_cast<int>(rng.uniform_int(5));
    int H = (ho - 1) * stride - 2 * pad + k;
    int W = (wo - 1) * stride - 2 * pad + k;
    if (H < k || W < k) continue;
    int I = 1 + static_cast<int>(rng.uniform_int(3));
    int O = 1 + static_cast<int>(rng.uniform_int(3));

    ConvParams fwd = make_conv(O, I, k, k, stride, pad);
    fwd.kernel = randn(fwd.kernel.shape, 0.0, 0.2, rng);
    Tensor x = randn({I, H, W}, 0.0, 1.0, rng);
    Tensor y = randn({O, ho, wo}, 0.0, 1.0, rng);

    // transpose uses the same kernel reinterpreted as (in,out,kh,kw)
    ConvParams bwd;
    bwd.kernel = fwd.kernel;
    bwd.bias = Tensor({I});
    bwd.stride = stride;
    bwd.padding = pad;
    Tensor xt = transposed_conv2d_forward(y, bwd);
    REQUIRE(xt.shape == x.shape);
    CHECK(std::fabs(dot(conv2d_forward(x, fwd), y) - dot(x, xt)) < 1e-4);
  }
}

TEST_CASE("transposed conv gradients match finite differences") {
  Rng rng(23);
  ConvParams p;
  p.kernel = randn({3, 2, 2, 2}, 0.0, 0.3, rng);  // (in,out,kh,kw)
  p.bias = randn({2}, 0.0, 0.1, rng);
  p.stride = 2;
  p.padding = 0;
  Tensor x = randn({3, 4, 4}, 0.0, 1.0, rng);
  Tensor w = randn({2, 8, 8}, 0.0, 1.0, rng);

  ConvGrads g = transposed_conv2d_backward(x, p, w);
  auto lx = [&](const Tensor& t) { return dot(transposed_conv2d_forward(t, p), w); };
  CHECK(rel_err(g.grad_x, finite_difference_grad(lx, x, 1e-3)) < 1e-3);
  auto lk = [&](const Tensor& t) {
    ConvParams q = p;
    q.kernel = t;
    return dot(transposed_conv2d_forward(x, q), w);
  };
  CHECK(rel_err(g.grad_kernel, finite_difference_grad(lk, p.kernel, 1e-3)) < 1e-3);
  auto lb = [&](const Tensor& t) {
    ConvParams q = p;
    q.bias = t;
    return dot(transposed_conv2d_forward(x, q), w);
  };
  CHECK(rel_err(g.grad_bias, finite_difference_grad(lb, p.bias, 1e-3)) < 1e-3);
}

TEST_CASE("batchnorm train-mode statistics") {
  Rng rng(31);
  Tensor x = randn({3, 6, 6}, 2.0, 3.0, rng);
  BatchNormParams p = make_batchnorm(3);
  BatchNormCache cache;
  Tensor y = batchnorm_forward(x, p, Mode::Train, &cache);

  const std::size_t n = 36;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double v = y.data[c * n + i];
      s += v;
      s2 += v * v;
    }
    CHECK(std::fabs(s / n) < 1e-5);
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(1e-3));
    // running stats moved 10% of the way toward the batch statistics
    CHECK(p.running_mean.data[c] ==
          doctest::Approx(0.1 * cache.mean.data[c]).epsilon(1e-4));
  }
}

TEST_CASE("batchnorm infer mode uses running statistics") {
  Tensor x({1, 2, 2});
  x.data = {1.0f, 2.0f, 3.0f, 4.0f};
  BatchNormParams p = make_batchnorm(1);
  p.running_mean.data[0] = 2.0f;
  p.running_var.data[0] = 4.0f;
  Tensor y = batchnorm_forward(x, p, Mode::Infer);
  CHECK(y.data[0] == doctest::Approx((1.0 - 2.0) / std::sqrt(4.0 + 1e-5)).epsilon(1e-5));
  // infer mode must not touch running stats
  CHECK(p.running_mean.data[0] == 2.0f);
}

TEST_CASE("batchnorm gradients match finite differences") {
  Rng rng(37);
  Tensor x = randn({2, 4, 4}, 0.5, 1.5, rng);
  Tensor w = randn({2, 4, 4}, 0.0, 1.0, rng);
  BatchNormParams p = make_batchnorm(2);
  p.gamma = randn({2}, 1.0, 0.2, rng);
  p.beta = randn({2}, 0.0, 0.2, rng);

  BatchNormCache cache;
  batchnorm_forward(x, p, Mode::Train, &cache);
  BatchNormGrads g = batchnorm_backward(x, p, cache, w);

  auto run = [&](const Tensor& xi, const Tensor& gm, const Tensor& bt) {
    BatchNormParams q = p;
    q.gamma = gm;
    q.beta = bt;
    return dot(batchnorm_forward(xi, q, Mode::Train), w);
  };
  auto lx = [&](const Tensor& t) { return run(t, p.gamma, p.beta); };
  auto lg = [&](const Tensor& t) { return run(x, t, p.beta); };
  auto lb = [&](const Tensor& t) { return run(x, p.gamma, t); };
  CHECK(rel_err(g.grad_x, finite_difference_grad(lx, x, 1e-3)) < 1e-3);
  CHECK(rel_err(g.grad_gamma, finite_difference_grad(lg, p.gamma, 1e-3)) < 1e-3);
  CHECK(rel_err(g.grad_beta, finite_difference_grad(lb, p.beta, 1e-3)) < 1e-3);
}

TEST_CASE("relu and sigmoid") {
  Tensor x({1, 1, 4});
  x.data = {-2.0f, -0.0f, 0.5f, 3.0f};
  Tensor y = relu(x);
  CHECK(y.data == std::vector<float>{0.0f, 0.0f, 0.5f, 3.0f});
  Tensor g({1, 1, 4}, 1.0f);
  Tensor gx = relu_backward(x, g);
  CHECK(gx.data == std::vector<float>{0.0f, 0.0f, 1.0f, 1.0f});

  Tensor s = sigmoid(x);
  CHECK(s.data[3] == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(1e-6));
  Rng rng(41);
  Tensor xr = randn({1, 3, 3}, 0.0, 1.0, rng);
  Tensor w = randn({1, 3, 3}, 0.0, 1.0, rng);
  Tensor sg = sigmoid_backward(sigmoid(xr), w);
  auto ls = [&](const Tensor& t) { return dot(sigmoid(t), w); };
  CHECK(rel_err(sg, finite_difference_grad(ls, xr, 1e-3)) < 1e-3);
}

TEST_CASE("maxpool ceil mode and tie break") {
  Tensor x({1, 5, 5});
  for (std::size_t i = 0; i < 25; ++i) x.data[i] = static_cast<float>(i);
  PoolResult r = maxpool2d(x);
  CHECK(r.y.shape == std::vector<int>{1, 3, 3});
  CHECK(r.y.at3(0, 0, 0) == 6.0f);
  CHECK(r.y.at3(0, 2, 2) == 24.0f);  // 1x1 corner window

  // ties resolve to the first element in row-major window order
  Tensor t({1, 2, 2}, 1.0f);
  PoolResult rt = maxpool2d(t);
  CHECK(rt.argmax[0] == 0);

  Tensor g({1, 3, 3}, 1.0f);
  Tensor gx = maxpool2d_backward(x, r, g);
  CHECK(gx.at3(0, 1, 1) == 1.0f);
  CHECK(gx.at3(0, 0, 0) == 0.0f);
  double s = 0.0;
  for (float v : gx.data) s += v;
  CHECK(s == 9.0);
}

TEST_CASE("upsample nearest and bilinear") {
  Tensor x({1, 2, 2});
  x.data = {1.0f, 2.0f, 3.0f, 4.0f};
  Tensor yn = upsample(x, 2, UpsampleAlgo::Nearest);
  CHECK(yn.shape == std::vector<int>{1, 4, 4});
  CHECK(yn.at3(0, 0, 1) == 1.0f);
  CHECK(yn.at3(0, 3, 3) == 4.0f);

  Tensor yb = upsample(x, 2, UpsampleAlgo::Bilinear);
  CHECK(yb.at3(0, 0, 0) == 1.0f);
  CHECK(yb.at3(0, 3, 3) == 4.0f);  // align-corners endpoints

  // backward is the adjoint of forward
  Rng rng(43);
  for (auto algo : {UpsampleAlgo::Nearest, UpsampleAlgo::Bilinear}) {
    Tensor a = randn({2, 3, 3}, 0.0, 1.0, rng);
    Tensor w = randn({2, 6, 6}, 0.0, 1.0, rng);
    Tensor ga = upsample_backward(a, 2, algo, w);
    CHECK(std::fabs(dot(upsample(a, 2, algo), w) - dot(a, ga)) < 1e-4);
  }
}

TEST_CASE("concat channels round trip") {
  Rng rng(47);
  Tensor a = randn({2, 3, 3}, 0.0, 1.0, rng);
  Tensor b = randn({3, 3, 3}, 0.0, 1.0, rng);
  Tensor y = concat_channels(a, b);
  CHECK(y.shape == std::vector<int>{5, 3, 3});
  Tensor g = randn({5, 3, 3}, 0.0, 1.0, rng);
  auto [ga, gb] = concat_channels_backward(a, b, g);
  CHECK(ga.data[0] == g.data[0]);
  CHECK(gb.data[0] == g.data[a.numel()]);
  Tensor c({1, 2, 2});
  CHECK_THROWS_AS(concat_channels(a, c), ShapeError);
}

TEST_CASE("dropout modes") {
  Rng rng(53);
  Tensor x({1, 10, 10}, 1.0f);
  DropoutResult inf = dropout(x, 0.5, rng, Mode::Infer);
  CHECK(inf.y.data == x.data);
  CHECK(inf.mask.empty());

  DropoutResult tr = dropout(x, 0.5, rng, Mode::Train);
  int zeros = 0;
  for (std::size_t i = 0; i < tr.y.numel(); ++i) {
    if (tr.y.data[i] == 0.0f)
      ++zeros;
    else
      CHECK(tr.y.data[i] == doctest::Approx(2.0f));
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);

  Tensor g({1, 10, 10}, 1.0f);
  Tensor gx = dropout_backward(tr, g);
  for (std::size_t i = 0; i < gx.numel(); ++i) CHECK(gx.data[i] == tr.mask[i]);
  CHECK_THROWS(dropout(x, 1.0, rng, Mode::Train));
}

TEST_CASE("cross entropy masks background and normalizes by valid count") {
  Tensor logits({2, 2, 2}, 0.0f);
  LabelMap lab(2, 2, kBackground);
  lab.at(0, 0) = kSkin;
  lab.at(0, 1) = kLesion;
  std::array<double, 2> w{1.0, 1.0};
  LossResult r = weighted_pixel_cross_entropy(logits, lab, w);
  CHECK_FALSE(r.empty_sample);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  // background pixels carry no gradient
  CHECK(r.grad_logits.at3(0, 1, 0) == 0.0f);
  CHECK(r.grad_logits.at3(0, 1, 1) == 0.0f);
  CHECK(r.grad_logits.at3(0, 0, 0) == doctest::Approx(-0.25).epsilon(1e-6));

  // doubling a class weight doubles its contribution
  std::array<double, 2> w2{2.0, 1.0};
  LossResult r2 = weighted_pixel_cross_entropy(logits, lab, w2);
  CHECK(r2.loss == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy empty sample flag") {
  Tensor logits({2, 2, 2}, 0.0f);
  LabelMap lab(2, 2, kBackground);
  LossResult r = weighted_pixel_cross_entropy(logits, lab, {1.0, 1.0});
  CHECK(r.empty_sample);
  CHECK(r.loss == 0.0);
  for (float v : r.grad_logits.data) CHECK(v == 0.0f);
}

TEST_CASE("cross entropy is finite for extreme logits") {
  Tensor logits({2, 1, 1});
  logits.data = {100.0f, -100.0f};
  LabelMap lab(1, 1, kLesion);  // true class has probability ~0
  LossResult r = weighted_pixel_cross_entropy(logits, lab, {1.0, 1.0});
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-3));
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(59);
  Tensor logits = randn({2, 4, 4}, 0.0, 1.0, rng);
  LabelMap lab(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) lab.at(i, j) = static_cast<std::uint8_t>(rng.uniform_int(3));
  std::array<double, 2> w{0.7, 2.1};
  LossResult r = weighted_pixel_cross_entropy(logits, lab, w);
  auto f = [&](const Tensor& t) { return weighted_pixel_cross_entropy(t, lab, w).loss; };
  CHECK(rel_err(r.grad_logits, finite_difference_grad(f, logits, 1e-3)) < 1e-3);
}
