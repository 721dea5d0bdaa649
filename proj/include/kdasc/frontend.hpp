#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/fft.hpp"
#include "kdasc/tensor.hpp"
#include "kdasc/wav.hpp"

namespace kdasc {

/// Spectrogram parameters. Defaults: 32 kHz, 1024-point FFT, hop 320, 64 mel bins.
struct FrontendConfig {
  std::uint32_t sample_rate = 32000;
  std::size_t n_fft = 1024;
  std::size_t hop = 320;
  std::size_t mel_bins = 64;
  double f_min = 0.0;
  double f_max = 16000.0;
};

/// Complex STFT, bin-major: value(bin, frame).
struct Spectrogram {
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::uint32_t sample_rate = 0;
  std::size_t n_fft = 0;
  std::vector<Complex> values;

  const Complex& at(std::size_t bin, std::size_t frame) const { return values[bin * frames + frame]; }
  Complex& at(std::size_t bin, std::size_t frame) { return values[bin * frames + frame]; }
};

struct LogMelSpec {
  Tensor values;  // [1, mel_bins, frames]
  std::size_t mel_bins() const { return values.dim(1); }
  std::size_t frames() const { return values.dim(2); }
};

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

/// Centered STFT with reflect padding and a periodic Hann window.
inline Spectrogram stft(const Waveform& w, std::size_t n_fft, std::size_t hop) {
  if (!is_power_of_two(n_fft)) throw std::invalid_argument("stft: n_fft must be a power of two");
  if (hop == 0) throw std::invalid_argument("stft: hop must be positive");
  if (w.samples.size() < n_fft) {
    throw std::invalid_argument("stft: clip of " + std::to_string(w.samples.size()) +
                                " samples is shorter than one frame of " + std::to_string(n_fft));
  }
  const std::size_t len = w.samples.size();
  const std::size_t pad = n_fft / 2;
  auto sample = [&](long i) -> double {
    // reflect without repeating the edge sample
    const long n = static_cast<long>(len);
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return w.samples[static_cast<std::size_t>(i)];
  };
  const auto window = hann_window(n_fft);
  Spectrogram spec;
  spec.bins = n_fft / 2 + 1;
  spec.frames = 1 + len / hop;
  spec.sample_rate = w.sample_rate;
  spec.n_fft = n_fft;
  spec.values.assign(spec.bins * spec.frames, Complex{});
  std::vector<Complex> buf(n_fft);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const long start = static_cast<long>(t * hop) - static_cast<long>(pad);
    for (std::size_t i = 0; i < n_fft; ++i) buf[i] = sample(start + static_cast<long>(i)) * window[i];
    fft_inplace(buf);
    for (std::size_t b = 0; b < spec.bins; ++b) spec.at(b, t) = buf[b];
  }
  return spec;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filters [mel_bins x (n_fft/2+1)], area-normalized so that a
/// flat power spectrum gives comparable energy in every band.
inline std::vector<std::vector<double>> mel_filterbank(std::size_t mel_bins, std::size_t n_fft,
                                                       std::uint32_t sample_rate, double f_min,
                                                       double f_max) {
  if (mel_bins < 2) throw std::invalid_argument("log_mel: need at least 2 mel bins");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw std::invalid_argument("log_mel: need 0 <= f_min < f_max <= sample_rate/2");
  }
  const std::size_t bins = n_fft / 2 + 1;
  const double mlo = hz_to_mel(f_min), mhi = hz_to_mel(f_max);
  std::vector<double> edges(mel_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / static_cast<double>(mel_bins + 1));
  std::vector<std::vector<double>> fb(mel_bins, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < mel_bins; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    const double norm = 2.0 / (hi - lo);
    for (std::size_t b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / static_cast<double>(n_fft);
      double v = 0.0;
      if (f > lo && f <= mid) v = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) v = (hi - f) / (hi - mid);
      fb[m][b] = v * norm;
    }
  }
  return fb;
}

inline constexpr double kLogMelOffset = 1e-5;

/// log(mel-filtered power + 1e-5), as a [1, mel_bins, frames] tensor.
inline LogMelSpec log_mel(const Spectrogram& spec, std::size_t mel_bins, double f_min, double f_max) {
  const auto fb = mel_filterbank(mel_bins, spec.n_fft, spec.sample_rate, f_min, f_max);
  LogMelSpec out{Tensor(Shape{1, mel_bins, spec.frames})};
  std::vector<double> power(spec.bins);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t b = 0; b < spec.bins; ++b) power[b] = std::norm(spec.at(b, t));
    for (std::size_t m = 0; m < mel_bins; ++m) {
      double e = 0.0;
      for (std::size_t b = 0; b < spec.bins; ++b) e += fb[m][b] * power[b];
      out.values[m * spec.frames + t] = static_cast<float>(std::log(e + kLogMelOffset));
    }
  }
  return out;
}

/// Full waveform -> log-mel pipeline under a frontend config.
inline LogMelSpec compute_log_mel(const Waveform& w, const FrontendConfig& cfg) {
  if (w.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("audio sample rate " + std::to_string(w.sample_rate) +
                                " Hz does not match configured " + std::to_string(cfg.sample_rate) + " Hz");
  }
  return log_mel(stft(w, cfg.n_fft, cfg.hop), cfg.mel_bins, cfg.f_min, cfg.f_max);
}

}  // namespace kdasc
