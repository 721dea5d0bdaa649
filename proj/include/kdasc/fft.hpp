#pragma once

#include <complex>
#include <cstddef>
#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include <fftw3.h>

namespace kdasc {

using Complex = std::complex<double>;

inline bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace detail {

/// Cached FFTW plan over fftw_malloc'd buffers, so every call of a given
/// length runs the same codelets on equally aligned memory.
class FftPlan {
 public:
  FftPlan(std::size_t n, int sign) : n_(n) {
    in_ = fftw_alloc_complex(n);
    out_ = fftw_alloc_complex(n);
    if (!in_ || !out_) throw std::bad_alloc();
    plan_ = fftw_plan_dft_1d(static_cast<int>(n), in_, out_, sign, FFTW_ESTIMATE);
    if (!plan_) throw std::runtime_error("fft: FFTW could not create a plan");
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
  ~FftPlan() {
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }

  void run(std::vector<Complex>& a) {
    std::memcpy(in_, a.data(), n_ * sizeof(fftw_complex));
    fftw_execute(plan_);
    std::memcpy(static_cast<void*>(a.data()), out_, n_ * sizeof(fftw_complex));
  }

 private:
  std::size_t n_;
  fftw_complex* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

inline FftPlan& fft_plan(std::size_t n, bool inverse) {
  thread_local std::map<std::pair<std::size_t, bool>, std::unique_ptr<FftPlan>> plans;
  auto& p = plans[{n, inverse}];
  if (!p) p = std::make_unique<FftPlan>(n, inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  return *p;
}

}  // namespace detail

/// In-place DFT of any length. inverse=true computes the unscaled inverse.
inline void fft_inplace(std::vector<Complex>& a, bool inverse = false) {
  if (a.empty()) throw std::invalid_argument("fft: empty input");
  detail::fft_plan(a.size(), inverse).run(a);
}

inline std::vector<Complex> fft(std::vector<Complex> a) {
  fft_inplace(a);
  return a;
}

inline std::vector<Complex> ifft(std::vector<Complex> a) {
  fft_inplace(a, true);
  const double inv = 1.0 / static_cast<double>(a.size());
  for (auto& v : a) v *= inv;
  return a;
}

/// Linear convolution of x with h, truncated to x.size(), via zero-padded FFT.
inline std::vector<double> fft_convolve_truncated(const std::vector<double>& x,
                                                  const std::vector<double>& h) {
  if (x.empty() || h.empty()) return std::vector<double>(x.size(), 0.0);
  const std::size_t n = next_power_of_two(x.size() + h.size() - 1);
  std::vector<Complex> a(n), b(n);
  for (std::size_t i = 0; i < x.size(); ++i) a[i] = x[i];
  for (std::size_t i = 0; i < h.size(); ++i) b[i] = h[i];
  fft_inplace(a);
  fft_inplace(b);
  for (std::size_t i = 0; i < n; ++i) a[i] *= b[i];
  a = ifft(std::move(a));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a[i].real();
  return out;
}

}  // namespace kdasc
