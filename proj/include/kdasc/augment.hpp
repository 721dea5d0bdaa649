#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/fft.hpp"
#include "kdasc/rng.hpp"
#include "kdasc/tensor.hpp"
#include "kdasc/wav.hpp"

namespace kdasc {

// ---------------------------------------------------------------------------
// Freq-MixStyle

struct FmsConfig {
  double alpha = 0.3;  // Beta(alpha, alpha) shape for the mixing coefficient
  double p = 0.4;      // probability of applying to a batch

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("freq_mixstyle: alpha must be positive");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("freq_mixstyle: p must lie in [0,1]");
  }
};

inline constexpr double kMixStyleEps = 1e-5;

/// Per-(sample, channel, frequency) mean and population std over time.
struct FrequencyStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

inline FrequencyStats frequency_stats(const Tensor& x) {
  const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2), t = x.dim(3);
  FrequencyStats s{std::vector<double>(rows), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.ptr() + r * t;
    double mu = 0.0;
    for (std::size_t i = 0; i < t; ++i) mu += row[i];
    mu /= static_cast<double>(t);
    double var = 0.0;
    for (std::size_t i = 0; i < t; ++i) var += (row[i] - mu) * (row[i] - mu);
    s.mean[r] = mu;
    s.stddev[r] = std::sqrt(var / static_cast<double>(t));
  }
  return s;
}

/// Normalizes every frequency band of each sample by its own time statistics
/// and re-scales it with statistics mixed between sample i and sample perm[i].
/// The statistics are constants for backward; gradient flows through x.
inline Tensor mix_frequency_statistics(const Tensor& x, double lambda_mix,
                                       const std::vector<std::size_t>& perm) {
  if (x.rank() != 4) throw ShapeError("freq_mixstyle: expected [N,C,F,T] input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), f = x.dim(2), t = x.dim(3);
  if (f == 0 || t == 0 || n == 0) throw ShapeError("freq_mixstyle: empty frequency or time axis");
  if (perm.size() != n) throw ShapeError("freq_mixstyle: permutation length does not match batch");
  const auto st = frequency_stats(x);
  const std::size_t per_sample = c * f;
  std::vector<double> scale(n * per_sample), target_mu(n * per_sample);
  for (std::size_t i = 0; i < n; ++i) {
    if (perm[i] >= n) throw std::out_of_range("freq_mixstyle: permutation index out of range");
    for (std::size_t k = 0; k < per_sample; ++k) {
      const std::size_t a = i * per_sample + k, b = perm[i] * per_sample + k;
      const double mix_mu = lambda_mix * st.mean[a] + (1.0 - lambda_mix) * st.mean[b];
      const double mix_sigma = lambda_mix * st.stddev[a] + (1.0 - lambda_mix) * st.stddev[b];
      // eps sits on both sides so unchanged statistics reproduce x exactly
      const double sc = (mix_sigma + kMixStyleEps) / (st.stddev[a] + kMixStyleEps);
      scale[a] = sc;
      target_mu[a] = mix_mu;
    }
  }
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n * per_sample; ++r)
    for (std::size_t i = 0; i < t; ++i)
      out[r * t + i] = static_cast<float>((x[r * t + i] - st.mean[r]) * scale[r] + target_mu[r]);
  if (detail::should_record(x)) {
    Tape<float>::active().record("freq_mixstyle", out, [x, out, scale, t]() mutable {
      for (std::size_t r = 0; r < scale.size(); ++r)
        for (std::size_t i = 0; i < t; ++i) x.grad()[r * t + i] += static_cast<float>(out.grad()[r * t + i] * scale[r]);
    });
  }
  return out;
}

/// Applies Freq-MixStyle to a spectrogram batch with probability cfg.p.
/// One apply-draw, one Beta(alpha, alpha) coefficient and one permutation per batch.
inline Tensor freq_mixstyle(const Tensor& batch, const FmsConfig& cfg, Rng& rng) {
  cfg.validate();
  if (batch.rank() != 4 || batch.dim(0) == 0) {
    throw ShapeError("freq_mixstyle: expected non-empty [N,C,F,T] batch, got " + shape_str(batch.shape()));
  }
  if (batch.dim(2) == 0 || batch.dim(3) == 0) throw ShapeError("freq_mixstyle: empty frequency or time axis");
  if (!rng.bernoulli(cfg.p)) return batch;
  const double lambda_mix = rng.beta(cfg.alpha, cfg.alpha);
  const auto perm = rng.permutation(batch.dim(0));
  return mix_frequency_statistics(batch, lambda_mix, perm);
}

// ---------------------------------------------------------------------------
// Device impulse response augmentation

using ImpulseResponse = std::vector<float>;

struct DirConfig {
  double p = 0.6;  // probability that a sample is convolved
  std::vector<ImpulseResponse> ir_bank;

  void validate() const {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("dir_augment: p must lie in [0,1]");
    if (p > 0.0 && ir_bank.empty()) throw std::invalid_argument("dir_augment: empty impulse-response bank");
    for (const auto& ir : ir_bank) {
      if (ir.empty()) throw std::invalid_argument("dir_augment: empty impulse response");
    }
  }
};

inline ImpulseResponse peak_normalized(ImpulseResponse ir) {
  float peak = 0.0f;
  for (float v : ir) peak = std::max(peak, std::abs(v));
  if (peak > 0.0f)
    for (auto& v : ir) v /= peak;
  return ir;
}

/// Convolves w with ir (FFT, truncated to the input length) and rescales the
/// result to the input's peak.
inline Waveform convolve_ir(const Waveform& w, const ImpulseResponse& ir) {
  if (ir.empty()) throw std::invalid_argument("convolve_ir: empty impulse response");
  std::vector<double> x(w.samples.begin(), w.samples.end());
  std::vector<double> h(ir.begin(), ir.end());
  auto y = fft_convolve_truncated(x, h);
  double in_peak = 0.0, out_peak = 0.0;
  for (double v : x) in_peak = std::max(in_peak, std::abs(v));
  for (double v : y) out_peak = std::max(out_peak, std::abs(v));
  const double gain = out_peak > 0.0 ? in_peak / out_peak : 0.0;
  Waveform out{std::vector<float>(y.size()), w.sample_rate};
  for (std::size_t i = 0; i < y.size(); ++i) out.samples[i] = static_cast<float>(y[i] * gain);
  return out;
}

inline Waveform dir_augment(const Waveform& w, const DirConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.p == 0.0 || !rng.bernoulli(cfg.p)) return w;
  const auto& ir = cfg.ir_bank[rng.uniform_int(0, cfg.ir_bank.size() - 1)];
  return convolve_ir(w, ir);
}

/// Batch form: sample i draws from its own sub-seed derived from batch_seed.
inline std::vector<Waveform> dir_augment_batch(const std::vector<Waveform>& batch, const DirConfig& cfg,
                                               std::uint64_t batch_seed) {
  std::vector<Waveform> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng(derive_seed(batch_seed, i));
    out.push_back(dir_augment(batch[i], cfg, rng));
  }
  return out;
}

/// Eight exponentially decaying filtered-noise responses of 64 to 512 taps.
inline std::vector<ImpulseResponse> synthetic_ir_bank(std::uint64_t seed = 7) {
  std::vector<ImpulseResponse> bank;
  for (std::size_t k = 0; k < 8; ++k) {
    Rng rng(derive_seed(seed, k));
    const std::size_t taps = 64 + 64 * k;
    const double decay = static_cast<double>(taps) / rng.uniform(3.0, 8.0);
    const double smooth = rng.uniform(0.1, 0.9);  // one-pole low-pass coefficient
    ImpulseResponse ir(taps);
    double state = 0.0;
    for (std::size_t i = 0; i < taps; ++i) {
      state = smooth * state + (1.0 - smooth) * rng.normal();
      ir[i] = static_cast<float>(state * std::exp(-static_cast<double>(i) / decay));
    }
    ir[0] = 1.0f;
    bank.push_back(peak_normalized(std::move(ir)));
  }
  return bank;
}

/// Loads every .wav under dir in sorted filename order and peak-normalizes it.
inline std::vector<ImpulseResponse> load_ir_bank(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  std::vector<ImpulseResponse> bank;
  for (const auto& f : files) {
    auto w = load_wav(f);
    if (w.samples.empty()) throw std::invalid_argument("empty impulse response file " + f.string());
    bank.push_back(peak_normalized(std::move(w.samples)));
  }
  if (bank.empty()) throw std::invalid_argument("no .wav impulse responses in " + dir.string());
  return bank;
}

// ---------------------------------------------------------------------------
// Shifted crops

inline Waveform crop_at(const Waveform& w, std::size_t offset, std::size_t crop_len) {
  if (w.samples.size() < crop_len) {
    throw std::invalid_argument("crop: clip of " + std::to_string(w.samples.size()) +
                                " samples shorter than crop length " + std::to_string(crop_len));
  }
  if (offset + crop_len > w.samples.size()) throw std::out_of_range("crop: offset past end of clip");
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(w.samples.begin() + static_cast<long>(offset),
                     w.samples.begin() + static_cast<long>(offset + crop_len));
  return out;
}

/// Contiguous window at a uniformly random offset.
inline Waveform shifted_crop(const Waveform& w, std::size_t crop_len, Rng& rng) {
  if (w.samples.size() < crop_len) return crop_at(w, 0, crop_len);
  const std::size_t max_offset = w.samples.size() - crop_len;
  return crop_at(w, max_offset ? rng.uniform_int(0, max_offset) : 0, crop_len);
}

/// Deterministic evaluation crop.
inline Waveform center_crop(const Waveform& w, std::size_t crop_len) {
  if (w.samples.size() < crop_len) return crop_at(w, 0, crop_len);
  return crop_at(w, (w.samples.size() - crop_len) / 2, crop_len);
}

}  // namespace kdasc
