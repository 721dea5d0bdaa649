#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "kdasc/tensor.hpp"

namespace kdasc {

namespace detail {

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const BasicTensor<T>& a, std::size_t rank, const char* op, const char* what) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (detail::should_record(a, b)) {
    Tape<T>::active().record("add", out, [a, b, out]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (detail::should_record(a, b)) {
    Tape<T>::active().record("mul", out, [a, b, out]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += out.grad()[i] * b[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += out.grad()[i] * a[i];
    });
  }
  return out;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::should_record(x)) {
    Tape<T>::active().record("relu", out, [x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i)
        if (x[i] > T(0)) x.grad()[i] += out.grad()[i];
    });
  }
  return out;
}

/// Sum of all elements, as a shape-[1] tensor.
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (detail::should_record(x)) {
    Tape<T>::active().record("sum", out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
  const double n = static_cast<double>(x.numel());
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc / n));
  if (detail::should_record(x)) {
    Tape<T>::active().record("mean", out, [x, out, n]() mutable {
      const T g = static_cast<T>(out.grad()[0] / n);
      for (auto& v : x.grad()) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t padding) {
  const long span = static_cast<long>(in + 2 * padding) - static_cast<long>(kernel);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

namespace detail {

// Valid output range [lo, hi) along one axis for kernel tap k.
inline void conv_valid_range(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                             std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride + k - pad < in
  const long kk = static_cast<long>(k) - static_cast<long>(pad);
  long first = 0;
  if (kk < 0) first = (-kk + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long last = (static_cast<long>(in) - 1 - kk);
  last = last < 0 ? -1 : last / static_cast<long>(stride);
  lo = static_cast<std::size_t>(std::max<long>(first, 0));
  hi = static_cast<std::size_t>(std::clamp<long>(last + 1, 0, static_cast<long>(out)));
  if (hi < lo) hi = lo;
}

}  // namespace detail

/// 2-D cross-correlation over [N, C, F, T] input with an [O, C/groups, kF, kT] kernel.
///
/// groups == C gives a depthwise convolution, a 1x1 kernel a pointwise one.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const std::optional<BasicTensor<T>>& bias, Conv2dOptions opt) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  if (opt.stride == 0 || opt.groups == 0) throw ShapeError("conv2d: stride and groups must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t o = weight.dim(0), cg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t g = opt.groups;
  if (c % g != 0 || o % g != 0) {
    throw ShapeError("conv2d: channels in=" + std::to_string(c) + " out=" + std::to_string(o) +
                     " not divisible by groups=" + std::to_string(g));
  }
  if (cg != c / g) {
    throw ShapeError("conv2d: weight expects " + std::to_string(cg) + " input channels per group, input has " +
                     std::to_string(c / g) + " (input " + shape_str(input.shape()) + ", weight " +
                     shape_str(weight.shape()) + ")");
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != o)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(o) + " output channels");
  }
  const std::size_t oh = conv_out_size(h, kh, opt.stride, opt.padding);
  const std::size_t ow = conv_out_size(w, kw, opt.stride, opt.padding);
  if (oh == 0 || ow == 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " with padding " +
                     std::to_string(opt.padding) + " does not fit input " + shape_str(input.shape()));
  }
  const std::size_t og = o / g;
  const std::size_t s = opt.stride, p = opt.padding;

  BasicTensor<T> out(Shape{n, o, oh, ow});
  const T* in = input.ptr();
  const T* wt = weight.ptr();
  T* dst = out.ptr();

  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      T* oplane = dst + (b * o + oc) * oh * ow;
      if (bias) std::fill(oplane, oplane + oh * ow, (*bias)[oc]);
      const std::size_t grp = oc / og;
      for (std::size_t ic = 0; ic < cg; ++ic) {
        const T* iplane = in + (b * c + grp * cg + ic) * h * w;
        const T* kern = wt + (oc * cg + ic) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t y0, y1;
          detail::conv_valid_range(h, oh, ky, s, p, y0, y1);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t x0, x1;
            detail::conv_valid_range(w, ow, kx, s, p, x0, x1);
            const T k = kern[ky * kw + kx];
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const T* irow = iplane + (oy * s + ky - p) * w;
              T* orow = oplane + oy * ow;
              if (s == 1) {
                for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += k * irow[ox + kx - p];
              } else {
                for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += k * irow[ox * s + kx - p];
              }
            }
          }
        }
      }
    }
  }

  const bool bias_grad = bias && bias->requires_grad();
  if (Tape<T>::active().recording() &&
      (input.requires_grad() || weight.requires_grad() || bias_grad)) {
    std::optional<BasicTensor<T>> bcap = bias;
    Tape<T>::active().record("conv2d", out, [input, weight, bcap, out, opt, n, c, h, w, o, cg, kh, kw,
                                             oh, ow, og]() mutable {
      const std::size_t s = opt.stride, p = opt.padding;
      const T* gout = out.grad().data();
      const T* in = input.ptr();
      const T* wt = weight.ptr();
      T* gin = input.requires_grad() ? input.grad().data() : nullptr;
      T* gw = weight.requires_grad() ? weight.grad().data() : nullptr;
      if (bcap && bcap->requires_grad()) {
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < o; ++oc) {
            const T* gp = gout + (b * o + oc) * oh * ow;
            double acc = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += gp[i];
            bcap->grad()[oc] += static_cast<T>(acc);
          }
      }
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t oc = 0; oc < o; ++oc) {
          const T* gplane = gout + (b * o + oc) * oh * ow;
          const std::size_t grp = oc / og;
          for (std::size_t ic = 0; ic < cg; ++ic) {
            const std::size_t ichan = (b * c + grp * cg + ic) * h * w;
            const std::size_t kbase = (oc * cg + ic) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              std::size_t y0, y1;
              detail::conv_valid_range(h, oh, ky, s, p, y0, y1);
              for (std::size_t kx = 0; kx < kw; ++kx) {
                std::size_t x0, x1;
                detail::conv_valid_range(w, ow, kx, s, p, x0, x1);
                const T k = wt[kbase + ky * kw + kx];
                T kacc = T(0);
                for (std::size_t oy = y0; oy < y1; ++oy) {
                  const std::size_t ioff = ichan + (oy * s + ky - p) * w;
                  const T* grow = gplane + oy * ow;
                  const T* irow = in + ioff;
                  if (gin) {
                    T* girow = gin + ioff;
                    for (std::size_t ox = x0; ox < x1; ++ox) girow[ox * s + kx - p] += k * grow[ox];
                  }
                  if (gw) {
                    for (std::size_t ox = x0; ox < x1; ++ox) kacc += irow[ox * s + kx - p] * grow[ox];
                  }
                }
                if (gw) gw[kbase + ky * kw + kx] += kacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, Conv2dOptions opt = {}) {
  return conv2d(input, weight, std::optional<BasicTensor<T>>{}, opt);
}

// ---------------------------------------------------------------------------
// Normalization

/// Running statistics of one batch-norm layer.
template <class T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BatchNormStats<T>& stats,
                          BatchNormOptions opt = {}) {
  detail::require_rank(input, 4, "batch_norm", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c ||
      stats.running_var.numel() != c) {
    throw ShapeError("batch_norm: parameters sized for " + std::to_string(gamma.numel()) +
                     " channels, input " + shape_str(input.shape()) + " has " + std::to_string(c));
  }
  const std::size_t m = n * hw;
  std::vector<T> mean_c(c), inv_std(c);
  if (opt.training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = input.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = input.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = src[i] - mu;
          v += d * d;
        }
      }
      const double var = v / static_cast<double>(m);
      mean_c[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
      stats.running_mean[ch] =
          static_cast<T>((1.0 - opt.momentum) * stats.running_mean[ch] + opt.momentum * mu);
      stats.running_var[ch] =
          static_cast<T>((1.0 - opt.momentum) * stats.running_var[ch] + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean_c[ch] = stats.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[ch]) + opt.eps));
    }
  }

  BasicTensor<T> out(input.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = input.ptr() + (b * c + ch) * hw;
      T* dst = out.ptr() + (b * c + ch) * hw;
      const T scale = gamma[ch] * inv_std[ch];
      const T shift = beta[ch] - mean_c[ch] * scale;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * scale + shift;
    }

  if (detail::should_record(input, gamma, beta)) {
    const bool training = opt.training;
    Tape<T>::active().record("batch_norm", out, [input, gamma, beta, out, mean_c, inv_std, n, c, hw,
                                                 m, training]() mutable {
      const T* gout = out.grad().data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const T* src = input.ptr() + (b * c + ch) * hw;
          const T* gp = gout + (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double xhat = (src[i] - mean_c[ch]) * inv_std[ch];
            sum_g += gp[i];
            sum_gx += gp[i] * xhat;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[ch] += static_cast<T>(sum_gx);
        if (beta.requires_grad()) beta.grad()[ch] += static_cast<T>(sum_g);
        if (!input.requires_grad()) continue;
        const double gscale = static_cast<double>(gamma[ch]) * inv_std[ch];
        const double md = static_cast<double>(m);
        for (std::size_t b = 0; b < n; ++b) {
          const T* src = input.ptr() + (b * c + ch) * hw;
          const T* gp = gout + (b * c + ch) * hw;
          T* gi = input.grad().data() + (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (training) {
              const double xhat = (src[i] - mean_c[ch]) * inv_std[ch];
              gi[i] += static_cast<T>(gscale * (gp[i] - sum_g / md - xhat * sum_gx / md));
            } else {
              gi[i] += static_cast<T>(gscale * gp[i]);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers and pooling

/// y = x W^T + b for x [N, in], W [out, in], b [out].
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const std::optional<BasicTensor<T>>& bias = std::nullopt) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.dim(0), in = x.dim(1), outf = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input has " + std::to_string(in) + " features, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias && bias->numel() != outf) throw ShapeError("linear: bias size mismatch");
  BasicTensor<T> out(Shape{n, outf});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < outf; ++j) {
      double acc = bias ? static_cast<double>((*bias)[j]) : 0.0;
      for (std::size_t k = 0; k < in; ++k) acc += static_cast<double>(x[b * in + k]) * weight[j * in + k];
      out[b * outf + j] = static_cast<T>(acc);
    }
  const bool bias_grad = bias && bias->requires_grad();
  if (Tape<T>::active().recording() && (x.requires_grad() || weight.requires_grad() || bias_grad)) {
    std::optional<BasicTensor<T>> bcap = bias;
    Tape<T>::active().record("linear", out, [x, weight, bcap, out, n, in, outf]() mutable {
      const auto& g = out.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < outf; ++j) {
          const T gj = g[b * outf + j];
          if (bcap && bcap->requires_grad()) bcap->grad()[j] += gj;
          for (std::size_t k = 0; k < in; ++k) {
            if (x.requires_grad()) x.grad()[b * in + k] += gj * weight[j * in + k];
            if (weight.requires_grad()) weight.grad()[j * in + k] += gj * x[b * in + k];
          }
        }
    });
  }
  return out;
}

/// Mean over the two spatial axes: [N, C, F, T] -> [N, C].
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> out(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) acc += x[i * hw + k];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  if (detail::should_record(x)) {
    Tape<T>::active().record("global_avg_pool", out, [x, out, n, c, hw]() mutable {
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t i = 0; i < n * c; ++i) {
        const T g = out.grad()[i] * inv;
        for (std::size_t k = 0; k < hw; ++k) x.grad()[i * hw + k] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise softmax of logits / tau over the last axis of an [N, K] tensor.
template <class T>
BasicTensor<T> softmax_t(const BasicTensor<T>& logits, double tau = 1.0) {
  detail::require_rank(logits, 2, "softmax_t", "logits");
  if (!(tau > 0.0)) throw std::invalid_argument("softmax_t: temperature must be positive");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> out(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.ptr() + b * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]) / tau);
    double z = 0.0;
    std::vector<double> e(k);
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) / tau - mx);
      z += e[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[b * k + j] = static_cast<T>(e[j] / z);
  }
  if (detail::should_record(logits)) {
    Tape<T>::active().record("softmax_t", out, [logits, out, n, k, tau]() mutable {
      for (std::size_t b = 0; b < n; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(out.grad()[b * k + j]) * out[b * k + j];
        for (std::size_t j = 0; j < k; ++j) {
          const double pj = out[b * k + j];
          logits.grad()[b * k + j] += static_cast<T>(pj * (out.grad()[b * k + j] - dot) / tau);
        }
      }
    });
  }
  return out;
}

/// Row-wise log-softmax of logits / tau, computed in double. Not taped.
template <class T>
std::vector<double> log_softmax_rows(const BasicTensor<T>& logits, double tau = 1.0) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n * k);
  for (std::size_t b = 0; b < n; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[b * k + j]) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(logits[b * k + j]) / tau - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[b * k + j] = static_cast<double>(logits[b * k + j]) / tau - lz;
  }
  return out;
}

namespace detail {

template <class T>
void check_labels(const BasicTensor<T>& logits, const std::vector<int>& labels, const char* op) {
  detail::require_rank(logits, 2, op, "logits");
  if (labels.size() != logits.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(logits.dim(0)));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1)) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                              std::to_string(logits.dim(1)) + ")");
    }
  }
}

}  // namespace detail

/// Batch-mean cross-entropy of softmax(logits) against integer labels.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  detail::check_labels(logits, labels, "cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const auto ls = log_softmax_rows(logits);
  double acc = 0.0;
  for (std::size_t b = 0; b < n; ++b) acc -= ls[b * k + static_cast<std::size_t>(labels[b])];
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (detail::should_record(logits)) {
    Tape<T>::active().record("cross_entropy", out, [logits, labels, out, ls, n, k]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(n);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp(ls[b * k + j]);
          const double onehot = static_cast<std::size_t>(labels[b]) == j ? 1.0 : 0.0;
          logits.grad()[b * k + j] += static_cast<T>(g * (p - onehot));
        }
    });
  }
  return out;
}

}  // namespace kdasc
