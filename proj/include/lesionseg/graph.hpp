#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lesionseg/checkpoint.hpp"
#include "lesionseg/label_map.hpp"
#include "lesionseg/layers.hpp"
#include "lesionseg/tensor.hpp"

namespace lesionseg {

enum class LayerKind {
  Conv,
  BatchNorm,
  Relu,
  MaxPool,
  TransposedConv,
  Upsample,
  Concat,
  Add,  // elementwise fusion used by the FCN decoder sections
  Dropout,
  SoftmaxLoss,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::TransposedConv: return "transposed_conv";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::SoftmaxLoss: return "softmax_loss";
  }
  return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::BatchNorm, LayerKind::Relu, LayerKind::MaxPool,
                      LayerKind::TransposedConv, LayerKind::Upsample, LayerKind::Concat,
                      LayerKind::Add, LayerKind::Dropout, LayerKind::SoftmaxLoss})
    if (s == kind_name(k)) return k;
  throw ConfigError("graph: unknown layer kind '" + s + "'");
}

struct LayerNode {
  std::string id;
  LayerKind kind;
  std::vector<std::string> inputs;
  // kind-specific parameters; unused fields stay at their defaults
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int factor = 2;                                // upsample
  UpsampleAlgo algo = UpsampleAlgo::Bilinear;    // upsample
  double rate = 0.0;                             // dropout
};

enum class SkipStyle { SGN, FCN };

struct GraphSpec {
  std::vector<LayerNode> nodes;
  std::string preset_name;
  int encoder_depth = 0;
  SkipStyle skip_style = SkipStyle::SGN;
  // node ids on the encoder path; their parameters are the transfer unit
  std::vector<std::string> encoder_node_ids;
  bool transfer_hint = false;  // preset convention: initialize from a donor

  const LayerNode* find(const std::string& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }
};

constexpr const char* kInputId = "input";

// ---------------------------------------------------------------------------
// Validation: unique ids, resolvable inputs, acyclic, one loss sink.
// Returns node indices in topological order.
// ---------------------------------------------------------------------------
inline std::vector<std::size_t> validate_graph(const GraphSpec& spec) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    if (n.id == kInputId || by_id.count(n.id))
      throw ConfigError("graph: duplicate or reserved node id '" + n.id + "'");
    by_id[n.id] = i;
  }
  int losses = 0;
  for (const auto& n : spec.nodes) {
    if (n.kind == LayerKind::SoftmaxLoss) ++losses;
    std::size_t want = (n.kind == LayerKind::Concat || n.kind == LayerKind::Add) ? 2 : 1;
    if (n.inputs.size() != want)
      throw ConfigError("graph: node '" + n.id + "' expects " + std::to_string(want) +
                        " inputs, has " + std::to_string(n.inputs.size()));
    for (const auto& in : n.inputs)
      if (in != kInputId && !by_id.count(in))
        throw ConfigError("graph: node '" + n.id + "' references unknown input '" + in + "'");
  }
  if (losses != 1) throw ConfigError("graph: exactly one softmax_loss sink required");

  // Kahn's algorithm; anything left over sits on a cycle
  std::vector<int> pending(spec.nodes.size(), 0);
  std::vector<std::vector<std::size_t>> dependents(spec.nodes.size());
  for (std::size_t i = 0; i < spec.nodes.size(); ++i)
    for (const auto& in : spec.nodes[i].inputs)
      if (in != kInputId) {
        ++pending[i];
        dependents[by_id[in]].push_back(i);
      }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i)
    if (pending[i] == 0) order.push_back(i);
  for (std::size_t head = 0; head < order.size(); ++head)
    for (std::size_t d : dependents[order[head]])
      if (--pending[d] == 0) order.push_back(d);
  if (order.size() != spec.nodes.size()) {
    for (std::size_t i = 0; i < spec.nodes.size(); ++i)
      if (pending[i] > 0)
        throw ConfigError("graph: cycle through node '" + spec.nodes[i].id + "'");
  }
  return order;
}

// ---------------------------------------------------------------------------
// Graph text format: one node per line,
//   id kind k=v[,k=v...] inputs=a[;b]
// preceded by "# preset name", "# encoder_depth d", "# skip_style s" headers.
// ---------------------------------------------------------------------------
inline std::string serialize_graph(const GraphSpec& spec) {
  std::ostringstream os;
  os << "# preset " << (spec.preset_name.empty() ? "custom" : spec.preset_name) << "\n";
  os << "# encoder_depth " << spec.encoder_depth << "\n";
  os << "# skip_style " << (spec.skip_style == SkipStyle::SGN ? "sgn" : "fcn") << "\n";
  os << "# transfer_hint " << (spec.transfer_hint ? 1 : 0) << "\n";
  os << "# encoder_nodes";
  for (const auto& id : spec.encoder_node_ids) os << ' ' << id;
  os << "\n";
  for (const auto& n : spec.nodes) {
    os << n.id << ' ' << kind_name(n.kind) << ' ';
    switch (n.kind) {
      case LayerKind::Conv:
      case LayerKind::TransposedConv:
        os << "in=" << n.in_channels << ",out=" << n.out_channels << ",k=" << n.kernel
           << ",s=" << n.stride << ",p=" << n.padding;
        break;
      case LayerKind::BatchNorm:
        os << "ch=" << n.in_channels;
        break;
      case LayerKind::Upsample:
        os << "factor=" << n.factor
           << ",algo=" << (n.algo == UpsampleAlgo::Nearest ? "nearest" : "bilinear");
        break;
      case LayerKind::Dropout:
        os << "rate=" << n.rate;
        break;
      default:
        os << "-";
    }
    os << " inputs=";
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? ";" : "") << n.inputs[i];
    os << "\n";
  }
  return os.str();
}

inline GraphSpec parse_graph(const std::string& text) {
  GraphSpec spec;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string key;
      hs >> key;
      if (key == "preset") hs >> spec.preset_name;
      else if (key == "encoder_depth") hs >> spec.encoder_depth;
      else if (key == "skip_style") {
        std::string v;
        hs >> v;
        spec.skip_style = v == "fcn" ? SkipStyle::FCN : SkipStyle::SGN;
      } else if (key == "transfer_hint") {
        int v;
        hs >> v;
        spec.transfer_hint = v != 0;
      } else if (key == "encoder_nodes") {
        std::string id;
        while (hs >> id) spec.encoder_node_ids.push_back(id);
      }
      continue;
    }
    std::istringstream ls(line);
    LayerNode n;
    std::string kind, params, inputs;
    ls >> n.id >> kind >> params >> inputs;
    n.kind = kind_from_name(kind);
    if (params != "-") {
      std::istringstream ps(params);
      std::string kv;
      while (std::getline(ps, kv, ',')) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("graph: bad parameter '" + kv + "'");
        std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        if (k == "in") n.in_channels = std::stoi(v);
        else if (k == "out") n.out_channels = std::stoi(v);
        else if (k == "ch") n.in_channels = n.out_channels = std::stoi(v);
        else if (k == "k") n.kernel = std::stoi(v);
        else if (k == "s") n.stride = std::stoi(v);
        else if (k == "p") n.padding = std::stoi(v);
        else if (k == "factor") n.factor = std::stoi(v);
        else if (k == "algo") n.algo = v == "nearest" ? UpsampleAlgo::Nearest : UpsampleAlgo::Bilinear;
        else if (k == "rate") n.rate = std::stod(v);
        else throw ConfigError("graph: unknown parameter key '" + k + "'");
      }
    }
    if (inputs.rfind("inputs=", 0) != 0)
      throw ConfigError("graph: missing inputs field on node '" + n.id + "'");
    std::istringstream isv(inputs.substr(7));
    std::string in;
    while (std::getline(isv, in, ';')) n.inputs.push_back(in);
    spec.nodes.push_back(std::move(n));
  }
  validate_graph(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Preset construction
// ---------------------------------------------------------------------------

namespace detail {

struct GraphBuilder {
  GraphSpec spec;
  std::string tail = kInputId;
  int tail_ch = 3;
  bool in_encoder = true;

  void push(LayerNode n) {
    if (in_encoder) spec.encoder_node_ids.push_back(n.id);
    spec.nodes.push_back(std::move(n));
  }

  // conv + batchnorm + relu
  void conv_block(const std::string& base, int out_ch, int k = 3, int pad = 1) {
    LayerNode c{base + "_conv", LayerKind::Conv, {tail}};
    c.in_channels = tail_ch;
    c.out_channels = out_ch;
    c.kernel = k;
    c.padding = pad;
    push(std::move(c));
    LayerNode b{base + "_bn", LayerKind::BatchNorm, {base + "_conv"}};
    b.in_channels = b.out_channels = out_ch;
    push(std::move(b));
    LayerNode r{base + "_relu", LayerKind::Relu, {base + "_bn"}};
    r.in_channels = r.out_channels = out_ch;
    push(std::move(r));
    tail = base + "_relu";
    tail_ch = out_ch;
  }

  void conv1x1(const std::string& id, const std::string& input, int in_ch, int out_ch) {
    LayerNode c{id, LayerKind::Conv, {input}};
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.kernel = 1;
    c.padding = 0;
    push(std::move(c));
  }

  void maxpool(const std::string& id) {
    LayerNode p{id, LayerKind::MaxPool, {tail}};
    p.in_channels = p.out_channels = tail_ch;
    push(std::move(p));
    tail = id;
  }

  // learned stride-2 upsampling; with learned=false a fixed bilinear
  // upsample plus a 1x1 channel-adjusting conv
  void upsample_to(const std::string& base, int out_ch, bool learned) {
    if (learned) {
      LayerNode t{base + "_up", LayerKind::TransposedConv, {tail}};
      t.in_channels = tail_ch;
      t.out_channels = out_ch;
      t.kernel = 2;
      t.stride = 2;
      t.padding = 0;
      push(std::move(t));
      tail = base + "_up";
    } else {
      LayerNode u{base + "_up", LayerKind::Upsample, {tail}};
      u.in_channels = u.out_channels = tail_ch;
      u.factor = 2;
      u.algo = UpsampleAlgo::Bilinear;
      push(std::move(u));
      conv1x1(base + "_upproj", base + "_up", tail_ch, out_ch);
      tail = base + "_upproj";
    }
    tail_ch = out_ch;
  }

  void head_and_loss() {
    conv1x1("head", tail, tail_ch, 2);
    tail = "head";
    tail_ch = 2;
    LayerNode l{"loss", LayerKind::SoftmaxLoss, {"head"}};
    l.in_channels = l.out_channels = 2;
    spec.nodes.push_back(std::move(l));
  }
};

}  // namespace detail

inline int sgn_width(int depth_index, int base_width) {
  int w = base_width;
  for (int i = 0; i < depth_index; ++i) w = std::min(w * 2, 512);
  return w;
}

// SGN(d): per encoder section two 3x3 conv+BN+ReLU then 2x2 max pool;
// decoder mirrors with a stride-2 upsampling stage, a skip concat with the
// pre-pool encoder output of the same depth, and two conv blocks.
inline GraphSpec build_sgn(int depth, int base_width = 64, bool learned_upsample = true) {
  if (depth < 1 || depth > 6) throw std::invalid_argument("build_sgn: depth must be 1..6");
  detail::GraphBuilder b;
  b.spec.preset_name = "sgn" + std::to_string(depth);
  b.spec.encoder_depth = depth;
  b.spec.skip_style = SkipStyle::SGN;

  std::vector<std::string> skip_src(depth);
  std::vector<int> width(depth);
  for (int d = 0; d < depth; ++d) {
    width[d] = sgn_width(d, base_width);
    std::string sec = "enc" + std::to_string(d);
    b.conv_block(sec + "a", width[d]);
    b.conv_block(sec + "b", width[d]);
    skip_src[d] = b.tail;
    b.maxpool(sec + "_pool");
  }
  b.in_encoder = false;
  for (int d = depth - 1; d >= 0; --d) {
    std::string sec = "dec" + std::to_string(d);
    b.upsample_to(sec, width[d], learned_upsample);
    LayerNode cat{sec + "_skip", LayerKind::Concat, {b.tail, skip_src[d]}};
    cat.in_channels = cat.out_channels = 2 * width[d];
    b.spec.nodes.push_back(std::move(cat));
    b.tail = sec + "_skip";
    b.tail_ch = 2 * width[d];
    b.conv_block(sec + "a", width[d]);
    b.conv_block(sec + "b", width[d]);
  }
  b.head_and_loss();
  validate_graph(b.spec);
  return b.spec;
}

// FCN presets: FCN32/16/8 have encoder depth 1/2/3 and share the same total
// convolution count. Six encoder convolutions are split evenly over the
// sections; each decoder section spends one conv of its budget on the 1x1
// projection that fuses the encoder-section *input* into the upsampled
// decoder tensor by addition.
inline GraphSpec build_fcn(int depth, int base_width = 64, bool learned_upsample = true) {
  if (depth < 1 || depth > 3) throw std::invalid_argument("build_fcn: depth must be 1, 2 or 3");
  constexpr int kEncoderConvBudget = 6;
  const int per_section = kEncoderConvBudget / depth;

  detail::GraphBuilder b;
  b.spec.preset_name = depth == 1 ? "fcn32" : depth == 2 ? "fcn16" : "fcn8";
  b.spec.encoder_depth = depth;
  b.spec.skip_style = SkipStyle::FCN;
  b.spec.transfer_hint = true;

  std::vector<std::string> section_input(depth);
  std::vector<int> section_input_ch(depth), width(depth);
  for (int d = 0; d < depth; ++d) {
    width[d] = sgn_width(d, base_width);
    section_input[d] = b.tail;
    section_input_ch[d] = b.tail_ch;
    std::string sec = "enc" + std::to_string(d);
    for (int c = 0; c < per_section; ++c)
      b.conv_block(sec + static_cast<char>('a' + c), width[d]);
    b.maxpool(sec + "_pool");
  }
  b.in_encoder = false;
  for (int d = depth - 1; d >= 0; --d) {
    std::string sec = "dec" + std::to_string(d);
    b.upsample_to(sec, width[d], learned_upsample);
    b.conv1x1(sec + "_proj", section_input[d], section_input_ch[d], width[d]);
    LayerNode add{sec + "_fuse", LayerKind::Add, {b.tail, sec + "_proj"}};
    add.in_channels = add.out_channels = width[d];
    b.spec.nodes.push_back(std::move(add));
    b.tail = sec + "_fuse";
    b.tail_ch = width[d];
    for (int c = 0; c < per_section - 1; ++c)
      b.conv_block(sec + static_cast<char>('a' + c), width[d]);
  }
  b.head_and_loss();
  validate_graph(b.spec);
  return b.spec;
}

enum class VggVariant { Vgg16, Vgg19, SgnVgg16 };

// Depth-5 U-net with the VGG encoder layout; sgnvgg16 is node-for-node
// identical to vgg16, differing only in the initialization convention.
inline GraphSpec build_vgg_unet(VggVariant variant, bool learned_upsample = true) {
  const bool deep = variant == VggVariant::Vgg19;
  const std::vector<int> convs = deep ? std::vector<int>{2, 2, 4, 4, 4}
                                      : std::vector<int>{2, 2, 3, 3, 3};
  const std::vector<int> width = {64, 128, 256, 512, 512};
  detail::GraphBuilder b;
  b.spec.preset_name = variant == VggVariant::Vgg16 ? "vgg16"
                       : variant == VggVariant::Vgg19 ? "vgg19"
                                                      : "sgnvgg16";
  b.spec.encoder_depth = 5;
  b.spec.skip_style = SkipStyle::SGN;
  b.spec.transfer_hint = variant != VggVariant::SgnVgg16;

  std::vector<std::string> skip_src(5);
  for (int d = 0; d < 5; ++d) {
    std::string sec = "enc" + std::to_string(d);
    for (int c = 0; c < convs[d]; ++c) b.conv_block(sec + static_cast<char>('a' + c), width[d]);
    skip_src[d] = b.tail;
    b.maxpool(sec + "_pool");
  }
  b.in_encoder = false;
  for (int d = 4; d >= 0; --d) {
    std::string sec = "dec" + std::to_string(d);
    b.upsample_to(sec, width[d], learned_upsample);
    LayerNode cat{sec + "_skip", LayerKind::Concat, {b.tail, skip_src[d]}};
    cat.in_channels = cat.out_channels = 2 * width[d];
    b.spec.nodes.push_back(std::move(cat));
    b.tail = sec + "_skip";
    b.tail_ch = 2 * width[d];
    for (int c = 0; c < convs[d]; ++c) b.conv_block(sec + static_cast<char>('a' + c), width[d]);
  }
  b.head_and_loss();
  validate_graph(b.spec);
  return b.spec;
}

inline GraphSpec build_preset(const std::string& name) {
  if (name.rfind("sgn", 0) == 0 && name.size() == 4 && name[3] >= '1' && name[3] <= '6')
    return build_sgn(name[3] - '0');
  if (name == "fcn32") return build_fcn(1);
  if (name == "fcn16") return build_fcn(2);
  if (name == "fcn8") return build_fcn(3);
  if (name == "vgg16") return build_vgg_unet(VggVariant::Vgg16);
  if (name == "vgg19") return build_vgg_unet(VggVariant::Vgg19);
  if (name == "sgnvgg16") return build_vgg_unet(VggVariant::SgnVgg16);
  throw std::invalid_argument("unknown preset '" + name + "'");
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"sgn1",  "sgn2",  "sgn3",  "sgn4",
                                                 "sgn5",  "sgn6",  "fcn8",  "fcn16",
                                                 "fcn32", "vgg16", "vgg19", "sgnvgg16"};
  return names;
}

// ---------------------------------------------------------------------------
// Parameter naming and initialization
// ---------------------------------------------------------------------------

inline std::vector<std::string> node_param_names(const LayerNode& n) {
  switch (n.kind) {
    case LayerKind::Conv:
    case LayerKind::TransposedConv:
      return {n.id + ".kernel", n.id + ".bias"};
    case LayerKind::BatchNorm:
      return {n.id + ".gamma", n.id + ".beta", n.id + ".running_mean", n.id + ".running_var"};
    default:
      return {};
  }
}

inline bool is_trainable_param(const std::string& name) {
  return name.find(".running_") == std::string::npos;
}

// He initialization for conv kernels, identity transform for batch norm
inline Checkpoint scratch_init(const GraphSpec& spec, Rng& rng) {
  auto order = validate_graph(spec);
  Checkpoint ckpt;
  for (std::size_t idx : order) {
    const auto& n = spec.nodes[idx];
    switch (n.kind) {
      case LayerKind::Conv: {
        double stddev = std::sqrt(2.0 / (n.in_channels * n.kernel * n.kernel));
        ckpt.add(n.id + ".kernel",
                 randn({n.out_channels, n.in_channels, n.kernel, n.kernel}, 0.0, stddev, rng));
        ckpt.add(n.id + ".bias", Tensor({n.out_channels}, 0.0f));
        break;
      }
      case LayerKind::TransposedConv: {
        // kernel stored as (in, out, kh, kw); fan-in of the output map
        double stddev = std::sqrt(2.0 / (n.in_channels * n.kernel * n.kernel));
        ckpt.add(n.id + ".kernel",
                 randn({n.in_channels, n.out_channels, n.kernel, n.kernel}, 0.0, stddev, rng));
        ckpt.add(n.id + ".bias", Tensor({n.out_channels}, 0.0f));
        break;
      }
      case LayerKind::BatchNorm:
        ckpt.add(n.id + ".gamma", Tensor({n.out_channels}, 1.0f));
        ckpt.add(n.id + ".beta", Tensor({n.out_channels}, 0.0f));
        ckpt.add(n.id + ".running_mean", Tensor({n.out_channels}, 0.0f));
        ckpt.add(n.id + ".running_var", Tensor({n.out_channels}, 1.0f));
        break;
      default:
        break;
    }
  }
  ckpt.metadata["arch"] = serialize_graph(spec);
  return ckpt;
}

struct TransferReport {
  std::vector<std::string> copied;
  std::vector<std::string> initialized;
  std::vector<std::string> skipped;   // donor tensors with no target
  std::vector<std::string> warnings;  // unmapped encoder parameters
};

// Encoder-only transfer: encoder parameters come verbatim from the donor,
// everything else from scratch_init. The name mapping defaults to identity.
inline Checkpoint transfer_init(const GraphSpec& target, const Checkpoint& donor, Rng& rng,
                                TransferReport* report = nullptr,
                                const std::map<std::string, std::string>* name_map = nullptr) {
  Checkpoint ckpt = scratch_init(target, rng);
  TransferReport local;
  TransferReport& rep = report ? *report : local;

  std::unordered_set<std::string> encoder_params;
  for (const auto& id : target.encoder_node_ids)
    if (const LayerNode* n = target.find(id))
      for (const auto& p : node_param_names(*n)) encoder_params.insert(p);

  std::unordered_set<std::string> used_donor;
  for (const auto& [name, tensor] : ckpt.entries()) {
    (void)tensor;
    if (!encoder_params.count(name)) {
      rep.initialized.push_back(name);
      continue;
    }
    std::string donor_name = name;
    if (name_map) {
      auto it = name_map->find(name);
      donor_name = it == name_map->end() ? std::string() : it->second;
    }
    if (donor_name.empty() || !donor.has(donor_name)) {
      rep.initialized.push_back(name);
      rep.warnings.push_back("encoder parameter '" + name + "' has no donor tensor");
      continue;
    }
    const Tensor& src = donor.at(donor_name);
    if (src.shape != ckpt.at(name).shape)
      throw ConfigError("transfer_init: shape mismatch between donor '" + donor_name +
                        "' and target '" + name + "'");
    ckpt.at(name).data = src.data;
    rep.copied.push_back(name);
    used_donor.insert(donor_name);
  }
  for (const auto& [name, tensor] : donor.entries()) {
    (void)tensor;
    if (!used_donor.count(name)) rep.skipped.push_back(name);
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Forward / backward interpreter
// ---------------------------------------------------------------------------

struct Activations {
  std::unordered_map<std::string, Tensor> value;
  std::unordered_map<std::string, std::vector<std::size_t>> pool_argmax;
  std::unordered_map<std::string, BatchNormCache> bn_cache;
  std::unordered_map<std::string, std::vector<float>> dropout_mask;
  Mode mode = Mode::Infer;

  const Tensor& at(const std::string& id) const {
    auto it = value.find(id);
    if (it == value.end()) throw ConfigError("activations: missing node '" + id + "'");
    return it->second;
  }
};

namespace detail {

inline ConvParams conv_params_for(const LayerNode& n, const Checkpoint& params) {
  if (!params.has(n.id + ".kernel"))
    throw ConfigError("forward: missing parameters for node '" + n.id + "'");
  ConvParams p;
  p.kernel = params.at(n.id + ".kernel");
  p.bias = params.at(n.id + ".bias");
  p.stride = n.stride;
  p.padding = n.padding;
  return p;
}

inline BatchNormParams bn_params_for(const LayerNode& n, const Checkpoint& params) {
  if (!params.has(n.id + ".gamma"))
    throw ConfigError("forward: missing parameters for node '" + n.id + "'");
  BatchNormParams p;
  p.gamma = params.at(n.id + ".gamma");
  p.beta = params.at(n.id + ".beta");
  p.running_mean = params.at(n.id + ".running_mean");
  p.running_var = params.at(n.id + ".running_var");
  return p;
}

// Skip fusion crops the coarser branch bottom/right when ceil-mode pooling
// left the upsampled tensor one row/column too big.
inline Tensor crop_to(const Tensor& t, int h, int w) {
  if (t.shape[1] == h && t.shape[2] == w) return t;
  if (t.shape[1] < h || t.shape[2] < w) throw ShapeError("fusion: branch smaller than skip");
  Tensor out({t.shape[0], h, w});
  for (int c = 0; c < t.shape[0]; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at3(c, i, j) = t.at3(c, i, j);
  return out;
}

inline Tensor pad_back(const Tensor& g, const std::vector<int>& shape) {
  if (g.shape == shape) return g;
  Tensor out(shape, 0.0f);
  for (int c = 0; c < g.shape[0]; ++c)
    for (int i = 0; i < g.shape[1]; ++i)
      for (int j = 0; j < g.shape[2]; ++j) out.at3(c, i, j) = g.at3(c, i, j);
  return out;
}

}  // namespace detail

// Topological-order evaluation over every node; activations for all nodes
// are retained (backward and transfer verification both need them). In
// train mode batch-norm running statistics inside `params` are updated.
inline Activations forward(const GraphSpec& spec, Checkpoint& params, const Tensor& x, Mode mode,
                           Rng* dropout_rng = nullptr) {
  auto order = validate_graph(spec);
  Activations acts;
  acts.mode = mode;
  acts.value[kInputId] = x;

  for (std::size_t idx : order) {
    const auto& n = spec.nodes[idx];
    const Tensor& a = acts.at(n.inputs[0]);
    switch (n.kind) {
      case LayerKind::Conv:
        acts.value[n.id] = conv2d_forward(a, detail::conv_params_for(n, params));
        break;
      case LayerKind::TransposedConv:
        acts.value[n.id] = transposed_conv2d_forward(a, detail::conv_params_for(n, params));
        break;
      case LayerKind::BatchNorm: {
        BatchNormParams p = detail::bn_params_for(n, params);
        BatchNormCache cache;
        acts.value[n.id] = batchnorm_forward(a, p, mode, &cache);
        if (mode == Mode::Train) {
          params.at(n.id + ".running_mean") = p.running_mean;
          params.at(n.id + ".running_var") = p.running_var;
        }
        acts.bn_cache[n.id] = std::move(cache);
        break;
      }
      case LayerKind::Relu:
        acts.value[n.id] = relu(a);
        break;
      case LayerKind::MaxPool: {
        PoolResult r = maxpool2d(a);
        acts.pool_argmax[n.id] = std::move(r.argmax);
        acts.value[n.id] = std::move(r.y);
        break;
      }
      case LayerKind::Upsample:
        acts.value[n.id] = upsample(a, n.factor, n.algo);
        break;
      case LayerKind::Concat: {
        const Tensor& bimg = acts.at(n.inputs[1]);
        acts.value[n.id] =
            concat_channels(detail::crop_to(a, bimg.shape[1], bimg.shape[2]), bimg);
        break;
      }
      case LayerKind::Add: {
        const Tensor& bimg = acts.at(n.inputs[1]);
        Tensor cropped = detail::crop_to(a, bimg.shape[1], bimg.shape[2]);
        for (std::size_t i = 0; i < cropped.numel(); ++i) cropped.data[i] += bimg.data[i];
        acts.value[n.id] = std::move(cropped);
        break;
      }
      case LayerKind::Dropout: {
        if (mode == Mode::Train && n.rate > 0.0 && !dropout_rng)
          throw ConfigError("forward: dropout node '" + n.id + "' needs an rng in train mode");
        Rng dummy(0);
        DropoutResult r = dropout(a, n.rate, dropout_rng ? *dropout_rng : dummy, mode);
        acts.dropout_mask[n.id] = std::move(r.mask);
        acts.value[n.id] = std::move(r.y);
        break;
      }
      case LayerKind::SoftmaxLoss:
        acts.value[n.id] = a;  // logits pass through; loss needs labels
        break;
    }
  }
  return acts;
}

inline const LayerNode& loss_node(const GraphSpec& spec) {
  for (const auto& n : spec.nodes)
    if (n.kind == LayerKind::SoftmaxLoss) return n;
  throw ConfigError("graph: no softmax_loss node");
}

inline Tensor logits_of(const GraphSpec& spec, const Activations& acts) {
  return acts.at(loss_node(spec).inputs[0]);
}

struct BackwardResult {
  Checkpoint grads;  // one tensor per trainable parameter
  double loss = 0.0;
  bool empty_sample = false;
};

inline BackwardResult backward(const GraphSpec& spec, const Checkpoint& params,
                               const Activations& acts, const LabelMap& labels,
                               const std::array<double, 2>& class_weights) {
  if (acts.mode != Mode::Train)
    throw ConfigError("backward: activations were not produced in train mode");
  auto order = validate_graph(spec);

  BackwardResult out;
  for (const auto& [name, tensor] : params.entries())
    if (is_trainable_param(name)) out.grads.add(name, zeros_like(tensor));

  std::unordered_map<std::string, Tensor> grad;  // d loss / d node-output
  auto accumulate = [&grad](const std::string& id, Tensor g) {
    auto it = grad.find(id);
    if (it == grad.end()) {
      grad[id] = std::move(g);
    } else {
      for (std::size_t i = 0; i < g.numel(); ++i) it->second.data[i] += g.data[i];
    }
  };

  const LayerNode& loss = loss_node(spec);
  LossResult lr = weighted_pixel_cross_entropy(acts.at(loss.id), labels, class_weights);
  out.loss = lr.loss;
  out.empty_sample = lr.empty_sample;
  accumulate(loss.inputs[0], std::move(lr.grad_logits));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& n = spec.nodes[*it];
    if (n.kind == LayerKind::SoftmaxLoss) continue;
    auto git = grad.find(n.id);
    if (git == grad.end()) continue;  // dead branch
    const Tensor& gy = git->second;
    const Tensor& a = acts.at(n.inputs[0]);
    switch (n.kind) {
      case LayerKind::Conv: {
        ConvGrads g = conv2d_backward(a, detail::conv_params_for(n, params), gy);
        out.grads.at(n.id + ".kernel") = std::move(g.grad_kernel);
        out.grads.at(n.id + ".bias") = std::move(g.grad_bias);
        accumulate(n.inputs[0], std::move(g.grad_x));
        break;
      }
      case LayerKind::TransposedConv: {
        ConvGrads g = transposed_conv2d_backward(a, detail::conv_params_for(n, params), gy);
        out.grads.at(n.id + ".kernel") = std::move(g.grad_kernel);
        out.grads.at(n.id + ".bias") = std::move(g.grad_bias);
        accumulate(n.inputs[0], std::move(g.grad_x));
        break;
      }
      case LayerKind::BatchNorm: {
        BatchNormGrads g = batchnorm_backward(a, detail::bn_params_for(n, params),
                                              acts.bn_cache.at(n.id), gy);
        out.grads.at(n.id + ".gamma") = std::move(g.grad_gamma);
        out.grads.at(n.id + ".beta") = std::move(g.grad_beta);
        accumulate(n.inputs[0], std::move(g.grad_x));
        break;
      }
      case LayerKind::Relu:
        accumulate(n.inputs[0], relu_backward(a, gy));
        break;
      case LayerKind::MaxPool: {
        PoolResult pr;
        pr.argmax = acts.pool_argmax.at(n.id);
        accumulate(n.inputs[0], maxpool2d_backward(a, pr, gy));
        break;
      }
      case LayerKind::Upsample:
        accumulate(n.inputs[0], upsample_backward(a, n.factor, n.algo, gy));
        break;
      case LayerKind::Concat: {
        const Tensor& bimg = acts.at(n.inputs[1]);
        Tensor cropped_a = detail::crop_to(a, bimg.shape[1], bimg.shape[2]);
        auto [ga, gb] = concat_channels_backward(cropped_a, bimg, gy);
        accumulate(n.inputs[0], detail::pad_back(ga, a.shape));
        accumulate(n.inputs[1], std::move(gb));
        break;
      }
      case LayerKind::Add: {
        const Tensor& bimg = acts.at(n.inputs[1]);
        accumulate(n.inputs[0], detail::pad_back(gy, a.shape));
        accumulate(n.inputs[1], gy);
        (void)bimg;
        break;
      }
      case LayerKind::Dropout: {
        DropoutResult dr;
        dr.mask = acts.dropout_mask.at(n.id);
        accumulate(n.inputs[0], dropout_backward(dr, gy));
        break;
      }
      case LayerKind::SoftmaxLoss:
        break;
    }
  }
  return out;
}

// Inference helper: logits -> per-pixel argmax label in {1, 2}
inline LabelMap argmax_labels(const Tensor& logits) {
  const int H = logits.shape[1], W = logits.shape[2];
  LabelMap m(H, W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (std::size_t i = 0; i < plane; ++i)
    m.values[i] = logits.data[i] >= logits.data[plane + i] ? kSkin : kLesion;
  return m;
}

inline std::size_t parameter_count(const Checkpoint& ckpt) {
  std::size_t n = 0;
  for (const auto& [name, t] : ckpt.entries())
    if (is_trainable_param(name)) n += t.numel();
  return n;
}

inline int conv_layer_count(const GraphSpec& spec) {
  int n = 0;
  for (const auto& node : spec.nodes)
    if (node.kind == LayerKind::Conv) ++n;
  return n;
}

}  // namespace lesionseg
