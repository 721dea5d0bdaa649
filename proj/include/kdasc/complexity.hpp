#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kdasc/models.hpp"

namespace kdasc {

struct LayerComplexity {
  std::string name;
  LayerKind kind = LayerKind::Input;
  Shape out_shape;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Parameter and multiply-accumulate totals for one inference pass.
struct ModelComplexity {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::vector<LayerComplexity> layers;
};

/// Analytic accounting over a [C, F, T] input. Conv MACs are
/// outF * outT * outC * kF * kT * inC / groups, linear MACs in * out;
/// batch norm, activations, adds and pooling cost none.
inline ModelComplexity count_complexity(const ModelGraph& g, const Shape& input_chw = kDefaultInputShape) {
  const auto shapes = infer_shapes(g, input_chw);
  ModelComplexity c;
  for (std::size_t i = 1; i < g.layers().size(); ++i) {
    const Layer& l = g.layers()[i];
    LayerComplexity lc{l.name, l.kind, shapes[i], 0, 0};
    switch (l.kind) {
      case LayerKind::Conv:
        lc.params = l.weight.numel() + (l.bias ? l.bias->numel() : 0);
        lc.macs = static_cast<std::uint64_t>(shapes[i][1]) * shapes[i][2] * l.out_channels * l.kernel *
                  l.kernel * (l.in_channels / l.groups);
        break;
      case LayerKind::Linear:
        lc.params = l.weight.numel() + (l.bias ? l.bias->numel() : 0);
        lc.macs = static_cast<std::uint64_t>(l.in_channels) * l.out_channels;
        break;
      case LayerKind::BatchNorm: lc.params = l.gamma.numel() + l.beta.numel(); break;
      default: break;
    }
    c.params += lc.params;
    c.macs += lc.macs;
    c.layers.push_back(std::move(lc));
  }
  return c;
}

inline constexpr std::uint64_t kMaxParams = 128000;
inline constexpr std::uint64_t kMaxMacs = 30000000;

struct BudgetVerdict {
  bool pass = true;
  std::string violated;  // "params" or "macs" when failing
  std::string layer;     // first layer whose running total crosses the limit
  std::string message;
};

/// Checks the parameter and MAC limits; on failure names the first layer at
/// which the running total exceeds a limit.
inline BudgetVerdict assert_budget(const ModelComplexity& c, std::uint64_t max_params = kMaxParams,
                                   std::uint64_t max_macs = kMaxMacs) {
  BudgetVerdict v;
  std::uint64_t params = 0, macs = 0;
  for (const auto& l : c.layers) {
    params += l.params;
    macs += l.macs;
    if (params > max_params || macs > max_macs) {
      v.pass = false;
      v.violated = params > max_params ? "params" : "macs";
      v.layer = l.name;
      break;
    }
  }
  if (v.pass && (c.params > max_params || c.macs > max_macs)) {
    v.pass = false;
    v.violated = c.params > max_params ? "params" : "macs";
  }
  std::ostringstream os;
  if (v.pass) {
    os << "PASS: " << c.params << " params <= " << max_params << ", " << c.macs << " MACs <= " << max_macs;
  } else {
    os << "FAIL: " << v.violated << " limit exceeded";
    if (!v.layer.empty()) os << " at layer " << v.layer;
    os << " (" << c.params << " params / " << max_params << ", " << c.macs << " MACs / " << max_macs << ")";
  }
  v.message = os.str();
  return v;
}

inline std::string format_complexity_table(const ModelComplexity& c) {
  std::ostringstream os;
  os << std::left << std::setw(34) << "layer" << std::setw(16) << "out_shape" << std::right
     << std::setw(10) << "params" << std::setw(14) << "MACs" << '\n';
  for (const auto& l : c.layers) {
    if (l.params == 0 && l.macs == 0) continue;
    os << std::left << std::setw(34) << l.name << std::setw(16) << shape_str(l.out_shape) << std::right
       << std::setw(10) << l.params << std::setw(14) << l.macs << '\n';
  }
  os << std::left << std::setw(50) << "total" << std::right << std::setw(10) << c.params << std::setw(14)
     << c.macs << '\n';
  return os.str();
}

inline std::string format_complexity_csv(const ModelComplexity& c) {
  std::ostringstream os;
  os << "layer,kind,out_shape,params,macs\n";
  for (const auto& l : c.layers) {
    std::string s = shape_str(l.out_shape);
    for (auto& ch : s)
      if (ch == ',') ch = 'x';
    os << l.name << ',' << layer_kind_name(l.kind) << ',' << s << ',' << l.params << ',' << l.macs << '\n';
  }
  os << "total,,," << c.params << ',' << c.macs << '\n';
  return os.str();
}

}  // namespace kdasc
