#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/checkpoint.hpp"
#include "kdasc/ops.hpp"
#include "kdasc/rng.hpp"

namespace kdasc {

enum class Arch { Cpm, Cpr, Baseline };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::Cpm: return "cpm";
    case Arch::Cpr: return "cpr";
    case Arch::Baseline: return "baseline";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "cpm" || s == "CPM") return Arch::Cpm;
  if (s == "cpr" || s == "CPR") return Arch::Cpr;
  if (s == "baseline") return Arch::Baseline;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected cpm, cpr or baseline)");
}

/// CP-Mobile width knobs.
struct CpmConfig {
  int base_channels = 32;
  int expansion_rate = 3;
  double channels_multiplier = 2.3;
  int n_classes = 10;

  void validate() const {
    if (base_channels < 4) throw std::invalid_argument("cpm: base_channels must be >= 4");
    if (expansion_rate < 1) throw std::invalid_argument("cpm: expansion_rate must be >= 1");
    if (!(channels_multiplier >= 1.0)) throw std::invalid_argument("cpm: channels_multiplier must be >= 1");
    if (n_classes < 2) throw std::invalid_argument("cpm: n_classes must be >= 2");
  }
};

/// CP-ResNet width knob.
struct CprConfig {
  int base_channels = 32;
  int n_classes = 10;

  void validate() const {
    if (base_channels < 4) throw std::invalid_argument("cpr: base_channels must be >= 4");
    if (n_classes < 2) throw std::invalid_argument("cpr: n_classes must be >= 2");
  }
};

/// Architecture plus knobs; enough to rebuild a graph from a checkpoint.
struct ModelSpec {
  Arch arch = Arch::Cpm;
  int base_channels = 32;
  int expansion_rate = 3;
  double channels_multiplier = 2.3;
  int n_classes = 10;

  static ModelSpec cpm(const CpmConfig& c) {
    return {Arch::Cpm, c.base_channels, c.expansion_rate, c.channels_multiplier, c.n_classes};
  }
  static ModelSpec cpr(const CprConfig& c) { return {Arch::Cpr, c.base_channels, 1, 1.0, c.n_classes}; }
};

enum class LayerKind { Input, Conv, BatchNorm, ReLU, Add, GlobalAvgPool, Linear };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Add: return "add";
    case LayerKind::GlobalAvgPool: return "avgpool";
    case LayerKind::Linear: return "linear";
  }
  return "?";
}

/// One node of a model graph. Inputs index earlier nodes.
struct Layer {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<std::size_t> inputs;

  // conv / linear geometry
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  Tensor weight;
  std::optional<Tensor> bias;
  Tensor gamma;
  Tensor beta;
  BatchNormStats<float> stats;
};

/// A built network: topologically ordered layer list with its parameters.
class ModelGraph {
 public:
  ModelGraph() = default;
  explicit ModelGraph(ModelSpec spec) : spec_(spec) {
    Layer in;
    in.name = "input";
    layers_.push_back(std::move(in));
  }

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  std::size_t output() const { return layers_.size() - 1; }

  std::size_t add_conv(const std::string& name, std::size_t from, std::size_t in_ch, std::size_t out_ch,
                       std::size_t kernel, std::size_t stride = 1, std::size_t groups = 1,
                       bool with_bias = false) {
    Layer l;
    l.name = name;
    l.kind = LayerKind::Conv;
    l.inputs = {from};
    l.in_channels = in_ch;
    l.out_channels = out_ch;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = kernel / 2;
    l.groups = groups;
    l.weight = Tensor(Shape{out_ch, in_ch / groups, kernel, kernel}, 0.0f, true);
    if (with_bias) l.bias = Tensor(Shape{out_ch}, 0.0f, true);
    return push(std::move(l));
  }

  std::size_t add_bn(const std::string& name, std::size_t from, std::size_t channels) {
    Layer l;
    l.name = name;
    l.kind = LayerKind::BatchNorm;
    l.inputs = {from};
    l.in_channels = l.out_channels = channels;
    l.gamma = Tensor(Shape{channels}, 1.0f, true);
    l.beta = Tensor(Shape{channels}, 0.0f, true);
    l.stats = BatchNormStats<float>(channels);
    return push(std::move(l));
  }

  std::size_t add_simple(const std::string& name, LayerKind kind, std::vector<std::size_t> from) {
    Layer l;
    l.name = name;
    l.kind = kind;
    l.inputs = std::move(from);
    return push(std::move(l));
  }

  std::size_t add_linear(const std::string& name, std::size_t from, std::size_t in_f, std::size_t out_f) {
    Layer l;
    l.name = name;
    l.kind = LayerKind::Linear;
    l.inputs = {from};
    l.in_channels = in_f;
    l.out_channels = out_f;
    l.weight = Tensor(Shape{out_f, in_f}, 0.0f, true);
    l.bias = Tensor(Shape{out_f}, 0.0f, true);
    return push(std::move(l));
  }

  /// Trainable tensors in layer order.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers_) {
      if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
        out.push_back(l.weight);
        if (l.bias) out.push_back(*l.bias);
      } else if (l.kind == LayerKind::BatchNorm) {
        out.push_back(l.gamma);
        out.push_back(l.beta);
      }
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  /// Kaiming fan-out normal for conv/linear weights; BN gamma 1, beta 0.
  void init_weights(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& l : layers_) {
      if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
        const double fan_out = l.kind == LayerKind::Conv
                                   ? static_cast<double>(l.out_channels * l.kernel * l.kernel / l.groups)
                                   : static_cast<double>(l.out_channels);
        const double std = std::sqrt(2.0 / fan_out);
        for (auto& v : l.weight.data()) v = static_cast<float>(rng.normal(0.0, std));
        if (l.bias) std::fill(l.bias->data().begin(), l.bias->data().end(), 0.0f);
      } else if (l.kind == LayerKind::BatchNorm) {
        std::fill(l.gamma.data().begin(), l.gamma.data().end(), 1.0f);
        std::fill(l.beta.data().begin(), l.beta.data().end(), 0.0f);
        l.stats = BatchNormStats<float>(l.out_channels);
      }
    }
  }

  /// Zeroes the final classifier layer so that every input maps to zero logits.
  void zero_head() {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      if (it->kind == LayerKind::Conv || it->kind == LayerKind::Linear) {
        std::fill(it->weight.data().begin(), it->weight.data().end(), 0.0f);
        if (it->bias) std::fill(it->bias->data().begin(), it->bias->data().end(), 0.0f);
        return;
      }
    }
  }

  /// [N, C, F, T] -> [N, n_classes] logits.
  Tensor forward(const Tensor& x, bool training) {
    if (x.rank() != 4) throw ShapeError("model input must be [N,C,F,T], got " + shape_str(x.shape()));
    std::vector<Tensor> values(layers_.size());
    values[0] = x;
    BatchNormOptions bn_opt;
    bn_opt.training = training;
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      Layer& l = layers_[i];
      const Tensor& in = values[l.inputs.at(0)];
      switch (l.kind) {
        case LayerKind::Conv:
          values[i] = conv2d(in, l.weight, l.bias, Conv2dOptions{l.stride, l.padding, l.groups});
          break;
        case LayerKind::BatchNorm:
          values[i] = batch_norm(in, l.gamma, l.beta, l.stats, bn_opt);
          break;
        case LayerKind::ReLU: values[i] = relu(in); break;
        case LayerKind::Add: values[i] = add(in, values[l.inputs.at(1)]); break;
        case LayerKind::GlobalAvgPool: values[i] = global_avg_pool(in); break;
        case LayerKind::Linear: values[i] = linear(in, l.weight, l.bias); break;
        case LayerKind::Input: throw std::logic_error("input layer inside graph");
      }
    }
    return values.back();
  }

  /// Parameters, running statistics and architecture metadata, keyed by name.
  TensorMap state_dict() const {
    TensorMap m;
    for (const auto& l : layers_) {
      if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
        m[l.name + ".weight"] = l.weight;
        if (l.bias) m[l.name + ".bias"] = *l.bias;
      } else if (l.kind == LayerKind::BatchNorm) {
        m[l.name + ".weight"] = l.gamma;
        m[l.name + ".bias"] = l.beta;
        m[l.name + ".running_mean"] = l.stats.running_mean;
        m[l.name + ".running_var"] = l.stats.running_var;
      }
    }
    m["meta.arch"] = Tensor(Shape{5}, std::vector<float>{static_cast<float>(static_cast<int>(spec_.arch)),
                                                         static_cast<float>(spec_.base_channels),
                                                         static_cast<float>(spec_.expansion_rate),
                                                         static_cast<float>(spec_.channels_multiplier),
                                                         static_cast<float>(spec_.n_classes)});
    return m;
  }

  /// Copies values from a state dict produced by a graph of the same spec.
  void load_state_dict(const TensorMap& m) {
    auto copy = [&](const std::string& key, Tensor& dst) {
      auto it = m.find(key);
      if (it == m.end()) throw std::runtime_error("checkpoint missing tensor " + key);
      if (it->second.shape() != dst.shape()) {
        throw ShapeError("checkpoint tensor " + key + " has shape " + shape_str(it->second.shape()) +
                         ", model expects " + shape_str(dst.shape()));
      }
      dst.data() = it->second.data();
    };
    for (auto& l : layers_) {
      if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
        copy(l.name + ".weight", l.weight);
        if (l.bias) copy(l.name + ".bias", *l.bias);
      } else if (l.kind == LayerKind::BatchNorm) {
        copy(l.name + ".weight", l.gamma);
        copy(l.name + ".bias", l.beta);
        copy(l.name + ".running_mean", l.stats.running_mean);
        copy(l.name + ".running_var", l.stats.running_var);
      }
    }
  }

 private:
  std::size_t push(Layer l) {
    for (auto i : l.inputs) {
      if (i >= layers_.size()) throw std::logic_error("layer " + l.name + " references a later node");
    }
    layers_.push_back(std::move(l));
    return layers_.size() - 1;
  }

  ModelSpec spec_;
  std::vector<Layer> layers_;
};

/// Per-sample output shapes [C, F, T] (or [K] after pooling) of every layer.
inline std::vector<Shape> infer_shapes(const ModelGraph& g, const Shape& input_chw) {
  if (input_chw.size() != 3) throw ShapeError("input shape must be [C,F,T], got " + shape_str(input_chw));
  std::vector<Shape> shapes(g.layers().size());
  shapes[0] = input_chw;
  for (std::size_t i = 1; i < g.layers().size(); ++i) {
    const Layer& l = g.layers()[i];
    const Shape& in = shapes[l.inputs.at(0)];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (in.size() != 3 || in[0] != l.in_channels) {
          throw ShapeError(l.name + ": expects " + std::to_string(l.in_channels) + " channels, got " +
                           shape_str(in));
        }
        const auto f = conv_out_size(in[1], l.kernel, l.stride, l.padding);
        const auto t = conv_out_size(in[2], l.kernel, l.stride, l.padding);
        if (f == 0 || t == 0) {
          throw ShapeError(l.name + ": zero-sized feature map for input " + shape_str(input_chw));
        }
        shapes[i] = {l.out_channels, f, t};
        break;
      }
      case LayerKind::Add:
        if (in != shapes[l.inputs.at(1)]) throw ShapeError(l.name + ": residual shapes differ");
        shapes[i] = in;
        break;
      case LayerKind::GlobalAvgPool: shapes[i] = {in.at(0)}; break;
      case LayerKind::Linear:
        if (numel_of(in) != l.in_channels) throw ShapeError(l.name + ": feature count mismatch");
        shapes[i] = {l.out_channels};
        break;
      default: shapes[i] = in; break;
    }
  }
  return shapes;
}

namespace detail {

inline std::size_t conv_bn_relu(ModelGraph& g, const std::string& name, std::size_t from, std::size_t in,
                                std::size_t out, std::size_t kernel, std::size_t stride,
                                std::size_t groups = 1, bool with_relu = true) {
  auto c = g.add_conv(name + ".conv", from, in, out, kernel, stride, groups);
  auto b = g.add_bn(name + ".bn", c, out);
  return with_relu ? g.add_simple(name + ".relu", LayerKind::ReLU, {b}) : b;
}

}  // namespace detail

inline const Shape kDefaultInputShape{1, 64, 101};

/// Blocks per stage of the CP-Mobile graph.
inline constexpr std::size_t kCpmBlocks[3] = {2, 3, 3};

/// CP-Mobile: two stride-2 3x3 stem convs, three stages of inverted-residual
/// blocks (1x1 expand, 3x3 depthwise, 1x1 project) with widths
/// (base, base, base * multiplier), stride 2 on the first block of the last
/// stage, and a 1x1 conv + BN + global-average-pool head.
inline ModelGraph build_cpm(const CpmConfig& cfg, const Shape& input_chw = kDefaultInputShape,
                            std::uint64_t seed = 0) {
  cfg.validate();
  ModelGraph g(ModelSpec::cpm(cfg));
  const std::size_t bc = static_cast<std::size_t>(cfg.base_channels);
  const std::size_t er = static_cast<std::size_t>(cfg.expansion_rate);
  auto x = detail::conv_bn_relu(g, "stem.0", 0, input_chw.at(0), bc / 2, 3, 2);
  x = detail::conv_bn_relu(g, "stem.1", x, bc / 2, bc, 3, 2);
  const std::size_t widths[3] = {bc, bc,
                                 static_cast<std::size_t>(std::lround(static_cast<double>(bc) * cfg.channels_multiplier))};
  const std::size_t strides[3] = {1, 1, 2};
  std::size_t ch = bc;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < kCpmBlocks[s]; ++b) {
      const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const std::size_t stride = b == 0 ? strides[s] : 1;
      const std::size_t hidden = ch * er;
      const std::size_t in = x;
      auto y = detail::conv_bn_relu(g, name + ".expand", x, ch, hidden, 1, 1);
      y = detail::conv_bn_relu(g, name + ".depthwise", y, hidden, hidden, 3, stride, hidden);
      y = detail::conv_bn_relu(g, name + ".project", y, hidden, widths[s], 1, 1, 1, false);
      if (stride == 1 && ch == widths[s]) y = g.add_simple(name + ".residual", LayerKind::Add, {y, in});
      x = y;
      ch = widths[s];
    }
  }
  auto head = g.add_conv("head.conv", x, ch, static_cast<std::size_t>(cfg.n_classes), 1);
  head = g.add_bn("head.bn", head, static_cast<std::size_t>(cfg.n_classes));
  g.add_simple("head.pool", LayerKind::GlobalAvgPool, {head});
  infer_shapes(g, input_chw);
  g.init_weights(seed);
  return g;
}

/// Kernel sizes (first conv, second conv) of the six CP-ResNet basic blocks.
/// Late-stage 3x3 convs become 1x1 to bound the receptive field.
inline constexpr std::size_t kCprKernels[6][2] = {{3, 3}, {3, 3}, {3, 1}, {1, 1}, {1, 1}, {1, 1}};

/// CP-ResNet: 5x5 stride-2 stem, three stages of two basic residual blocks with
/// widths (base, 2 base, 4 base), and a 1x1 conv + global-average-pool head.
inline ModelGraph build_cpr(const CprConfig& cfg, const Shape& input_chw = kDefaultInputShape,
                            std::uint64_t seed = 0) {
  cfg.validate();
  ModelGraph g(ModelSpec::cpr(cfg));
  const std::size_t bc = static_cast<std::size_t>(cfg.base_channels);
  auto x = detail::conv_bn_relu(g, "stem", 0, input_chw.at(0), bc, 5, 2);
  const std::size_t widths[3] = {bc, 2 * bc, 4 * bc};
  const std::size_t strides[3] = {1, 2, 2};
  std::size_t ch = bc;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const std::size_t stride = b == 0 ? strides[s] : 1;
      const auto& k = kCprKernels[s * 2 + b];
      const std::size_t w = widths[s];
      auto y = detail::conv_bn_relu(g, name + ".conv1", x, ch, w, k[0], stride);
      y = detail::conv_bn_relu(g, name + ".conv2", y, w, w, k[1], 1, 1, false);
      std::size_t shortcut = x;
      if (stride != 1 || ch != w) {
        shortcut = detail::conv_bn_relu(g, name + ".shortcut", x, ch, w, 1, stride, 1, false);
      }
      y = g.add_simple(name + ".add", LayerKind::Add, {y, shortcut});
      x = g.add_simple(name + ".relu", LayerKind::ReLU, {y});
      ch = w;
    }
  }
  auto head = g.add_conv("head.conv", x, ch, static_cast<std::size_t>(cfg.n_classes), 1, 1, 1, true);
  g.add_simple("head.pool", LayerKind::GlobalAvgPool, {head});
  infer_shapes(g, input_chw);
  g.init_weights(seed);
  return g;
}

/// Two conv layers plus a 1x1 classifier; the reference learner for toy-data sanity runs.
inline ModelGraph build_baseline(int n_classes = 10, int width = 16,
                                 const Shape& input_chw = kDefaultInputShape, std::uint64_t seed = 0) {
  ModelGraph g(ModelSpec{Arch::Baseline, width, 1, 1.0, n_classes});
  const std::size_t w = static_cast<std::size_t>(width);
  auto x = detail::conv_bn_relu(g, "conv1", 0, input_chw.at(0), w, 3, 2);
  x = detail::conv_bn_relu(g, "conv2", x, w, 2 * w, 3, 2);
  auto head = g.add_conv("head.conv", x, 2 * w, static_cast<std::size_t>(n_classes), 1, 1, 1, true);
  g.add_simple("head.pool", LayerKind::GlobalAvgPool, {head});
  infer_shapes(g, input_chw);
  g.init_weights(seed);
  return g;
}

inline ModelGraph build_model(const ModelSpec& spec, const Shape& input_chw = kDefaultInputShape,
                              std::uint64_t seed = 0) {
  switch (spec.arch) {
    case Arch::Cpm:
      return build_cpm(CpmConfig{spec.base_channels, spec.expansion_rate, spec.channels_multiplier,
                                 spec.n_classes},
                       input_chw, seed);
    case Arch::Cpr: return build_cpr(CprConfig{spec.base_channels, spec.n_classes}, input_chw, seed);
    case Arch::Baseline: return build_baseline(spec.n_classes, spec.base_channels, input_chw, seed);
  }
  throw std::invalid_argument("unknown architecture");
}

inline ModelSpec spec_from_state(const TensorMap& m) {
  auto it = m.find("meta.arch");
  if (it == m.end() || it->second.numel() != 5) throw std::runtime_error("checkpoint lacks architecture metadata");
  const auto& v = it->second;
  ModelSpec s;
  s.arch = static_cast<Arch>(static_cast<int>(v[0]));
  s.base_channels = static_cast<int>(v[1]);
  s.expansion_rate = static_cast<int>(v[2]);
  s.channels_multiplier = v[3];
  s.n_classes = static_cast<int>(v[4]);
  return s;
}

}  // namespace kdasc
