#include <doctest.h>

#include <algorithm>

#include "lesionseg/graph.hpp"
#include "test_helpers.hpp"

using namespace lesionseg;

namespace {

LabelMap checker_labels(int h, int w) {
  LabelMap m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x) = ((y + x) % 2) ? kSkin : kLesion;
  m.at(0, 0) = kBackground;
  return m;
}

}  // namespace

TEST_CASE("every preset builds and validates") {
  for (const auto& name : preset_names()) {
    GraphSpec spec = build_preset(name);
    CHECK(spec.preset_name == name);
    CHECK_NOTHROW(validate_graph(spec));
    CHECK_FALSE(spec.encoder_node_ids.empty());
  }
  CHECK_THROWS(build_preset("sgn7"));
  CHECK_THROWS(build_preset("resnet"));
}

TEST_CASE("graph serialization round trips") {
  for (const auto& name : {"sgn2", "fcn16", "vgg19"}) {
    GraphSpec spec = build_preset(name);
    std::string text = serialize_graph(spec);
    GraphSpec back = parse_graph(text);
    CHECK(back.preset_name == spec.preset_name);
    CHECK(back.encoder_depth == spec.encoder_depth);
    CHECK(back.encoder_node_ids == spec.encoder_node_ids);
    CHECK(back.transfer_hint == spec.transfer_hint);
    CHECK(serialize_graph(back) == text);
  }
}

TEST_CASE("validation diagnoses broken graphs") {
  GraphSpec g;
  LayerNode a{"a", LayerKind::Relu, {kInputId}};
  LayerNode loss{"loss", LayerKind::SoftmaxLoss, {"a"}};
  g.nodes = {a, loss};
  CHECK_NOTHROW(validate_graph(g));

  GraphSpec dup = g;
  dup.nodes.push_back(a);
  CHECK_THROWS_AS(validate_graph(dup), ConfigError);

  GraphSpec dangling = g;
  dangling.nodes[1].inputs = {"ghost"};
  CHECK_THROWS_AS(validate_graph(dangling), ConfigError);

  GraphSpec cyc = g;
  cyc.nodes.insert(cyc.nodes.begin(), LayerNode{"b", LayerKind::Relu, {"c"}});
  cyc.nodes.insert(cyc.nodes.begin(), LayerNode{"c", LayerKind::Relu, {"b"}});
  CHECK_THROWS_AS(validate_graph(cyc), ConfigError);

  GraphSpec noloss = g;
  noloss.nodes.pop_back();
  CHECK_THROWS_AS(validate_graph(noloss), ConfigError);
}

TEST_CASE("sgn1 maps 3xHxW to 2xHxW including odd extents") {
  GraphSpec spec = build_preset("sgn1");
  Rng rng(1);
  Checkpoint params = scratch_init(spec, rng);
  for (int size : {32, 45}) {
    Tensor x = randn({3, size, size}, 0.5, 0.2, rng);
    Activations acts = forward(spec, params, x, Mode::Infer);
    CHECK(logits_of(spec, acts).shape == std::vector<int>{2, size, size});
  }
}

TEST_CASE("parameter counts and conv budgets") {
  Rng rng(2);
  Checkpoint vgg = scratch_init(build_preset("vgg16"), rng);
  Checkpoint sgnvgg = scratch_init(build_preset("sgnvgg16"), rng);
  CHECK(parameter_count(vgg) == parameter_count(sgnvgg));

  int c8 = conv_layer_count(build_preset("fcn8"));
  CHECK(c8 == conv_layer_count(build_preset("fcn16")));
  CHECK(c8 == conv_layer_count(build_preset("fcn32")));

  CHECK(build_preset("vgg16").transfer_hint);
  CHECK(build_preset("fcn16").transfer_hint);
  CHECK_FALSE(build_preset("sgnvgg16").transfer_hint);
  CHECK_FALSE(build_preset("sgn3").transfer_hint);
}

TEST_CASE("scratch init is deterministic and batchnorm starts as identity") {
  GraphSpec spec = build_preset("sgn1");
  Rng r1(9), r2(9);
  Checkpoint a = scratch_init(spec, r1);
  Checkpoint b = scratch_init(spec, r2);
  REQUIRE(a.size() == b.size());
  for (const auto& [name, t] : a.entries()) {
    CHECK(t.data == b.at(name).data);
    if (name.find(".gamma") != std::string::npos)
      for (float v : t.data) CHECK(v == 1.0f);
    if (name.find(".running_var") != std::string::npos)
      for (float v : t.data) CHECK(v == 1.0f);
  }
}

TEST_CASE("end-to-end gradients on a small network") {
  GraphSpec spec = helpers::make_mini_unet();
  Rng rng(5);
  Checkpoint params = scratch_init(spec, rng);
  Tensor x = randn({3, 8, 8}, 0.5, 0.2, rng);
  LabelMap lab = checker_labels(8, 8);
  std::array<double, 2> w{1.0, 1.3};

  Activations acts = forward(spec, params, x, Mode::Train);
  BackwardResult bw = backward(spec, params, acts, lab, w);
  CHECK(std::isfinite(bw.loss));
  CHECK_FALSE(bw.empty_sample);

  for (const auto& [name, tensor] : bw.grads.entries()) {
    const Tensor& base = params.at(name);
    auto f = [&, n = name](const Tensor& t) {
      Checkpoint p2 = params;
      p2.at(n) = t;
      Activations a2 = forward(spec, p2, x, Mode::Train);
      return backward(spec, p2, a2, lab, w).loss;
    };
    Tensor fd = finite_difference_grad(f, base, 1e-3);
    // a conv bias feeding a batchnorm has an exactly zero gradient; both
    // sides are then noise and a relative comparison is meaningless
    double scale = 0.0;
    for (float v : fd.data) scale = std::max(scale, double(std::fabs(v)));
    for (float v : tensor.data) scale = std::max(scale, double(std::fabs(v)));
    if (scale < 1e-4) continue;
    CHECK_MESSAGE(helpers::rel_err(tensor, fd) < 1e-3, name);
  }
}

TEST_CASE("train mode updates running statistics, infer mode does not") {
  GraphSpec spec = build_preset("sgn1");
  Rng rng(6);
  Checkpoint params = scratch_init(spec, rng);
  Tensor x = randn({3, 8, 8}, 0.5, 0.2, rng);
  std::vector<float> before = params.at("enc0a_bn.running_mean").data;
  forward(spec, params, x, Mode::Infer);
  CHECK(params.at("enc0a_bn.running_mean").data == before);
  forward(spec, params, x, Mode::Train);
  CHECK(params.at("enc0a_bn.running_mean").data != before);
}

TEST_CASE("transfer copies exactly the encoder and reports the rest") {
  GraphSpec spec = build_preset("sgn2");
  Rng r1(10), r2(20);
  Checkpoint donor = scratch_init(spec, r1);
  TransferReport rep;
  Checkpoint target = transfer_init(spec, donor, r2, &rep);

  std::vector<std::string> encoder_params;
  for (const auto& id : spec.encoder_node_ids)
    for (const auto& p : node_param_names(*spec.find(id))) encoder_params.push_back(p);
  std::sort(encoder_params.begin(), encoder_params.end());
  std::vector<std::string> copied = rep.copied;
  std::sort(copied.begin(), copied.end());
  CHECK(copied == encoder_params);
  CHECK(rep.warnings.empty());

  for (const auto& name : rep.copied) CHECK(target.at(name).data == donor.at(name).data);
  CHECK(target.at("dec0a_conv.kernel").data != donor.at("dec0a_conv.kernel").data);

  // name map dropping one tensor produces a warning and scratch init for it
  std::map<std::string, std::string> nm;
  for (const auto& n : encoder_params) nm[n] = n;
  nm.erase("enc0a_conv.kernel");
  Rng r3(30);
  TransferReport rep2;
  transfer_init(spec, donor, r3, &rep2, &nm);
  CHECK(rep2.warnings.size() == 1);
}

TEST_CASE("argmax prefers skin on ties") {
  Tensor logits({2, 1, 2}, 0.0f);
  logits.at3(1, 0, 1) = 1.0f;
  LabelMap m = argmax_labels(logits);
  CHECK(m.at(0, 0) == kSkin);
  CHECK(m.at(0, 1) == kLesion);
}
