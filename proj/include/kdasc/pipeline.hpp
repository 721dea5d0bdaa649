#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "kdasc/augment.hpp"
#include "kdasc/checkpoint.hpp"
#include "kdasc/dataset.hpp"
#include "kdasc/frontend.hpp"

namespace kdasc {

/// Frontend plus crop length: everything needed to turn a clip into model input.
struct InputPipeline {
  FrontendConfig frontend;
  std::size_t crop_samples = 32000;

  /// [C, F, T] shape of one model input.
  Shape input_shape() const {
    return {1, frontend.mel_bins, 1 + crop_samples / frontend.hop};
  }

  Tensor to_tensor() const {
    return Tensor(Shape{7}, std::vector<float>{static_cast<float>(frontend.sample_rate),
                                               static_cast<float>(frontend.n_fft),
                                               static_cast<float>(frontend.hop),
                                               static_cast<float>(frontend.mel_bins),
                                               static_cast<float>(frontend.f_min),
                                               static_cast<float>(frontend.f_max),
                                               static_cast<float>(crop_samples)});
  }

  static InputPipeline from_tensor(const Tensor& t) {
    if (t.numel() != 7) throw std::runtime_error("malformed frontend metadata");
    InputPipeline p;
    p.frontend.sample_rate = static_cast<std::uint32_t>(t[0]);
    p.frontend.n_fft = static_cast<std::size_t>(t[1]);
    p.frontend.hop = static_cast<std::size_t>(t[2]);
    p.frontend.mel_bins = static_cast<std::size_t>(t[3]);
    p.frontend.f_min = t[4];
    p.frontend.f_max = t[5];
    p.crop_samples = static_cast<std::size_t>(t[6]);
    return p;
  }
};

/// Stacks single-clip [1, F, T] spectrograms into an [N, 1, F, T] batch.
inline Tensor stack_specs(const std::vector<LogMelSpec>& specs) {
  if (specs.empty()) throw ShapeError("stack_specs: empty batch");
  const Shape one = specs.front().values.shape();
  Shape s{specs.size(), one[0], one[1], one[2]};
  Tensor out(s);
  const std::size_t per = numel_of(one);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].values.shape() != one) throw ShapeError("stack_specs: ragged spectrogram shapes");
    std::copy(specs[i].values.data().begin(), specs[i].values.data().end(), out.data().begin() + i * per);
  }
  return out;
}

/// Decoded clips keyed by manifest path; each file is read once.
class AudioCache {
 public:
  const Waveform& get(const DatasetManifest& m, const ClipRecord& r) {
    auto it = clips_.find(r.clip_path);
    if (it != clips_.end()) return it->second;
    const auto path = m.resolve(r);
    if (!std::filesystem::exists(path)) throw std::runtime_error("missing clip file " + path.string());
    return clips_.emplace(r.clip_path, load_wav(path)).first->second;
  }

 private:
  std::map<std::string, Waveform> clips_;
};

}  // namespace kdasc
