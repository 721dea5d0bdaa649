#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/binio.hpp"

namespace kdasc {

/// Mono audio at a fixed sample rate, samples nominally in [-1, 1].
struct Waveform {
  std::vector<float> samples;
  std::uint32_t sample_rate = 0;

  std::size_t size() const { return samples.size(); }
  float peak() const {
    float p = 0.0f;
    for (float s : samples) p = std::max(p, std::abs(s));
    return p;
  }
};

class WavError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline constexpr std::uint16_t kWavPcm = 1;
inline constexpr std::uint16_t kWavFloat = 3;
inline constexpr std::uint16_t kWavExtensible = 0xFFFE;
}  // namespace detail

/// Reads RIFF/WAVE PCM16 or IEEE float32; multi-channel input is averaged to mono.
inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WavError("cannot open wav file: " + path.string());
  const auto where = path.string();
  char tag[4];
  auto read_tag = [&](const char* what) {
    if (!is.read(tag, 4)) throw WavError(where + ": truncated header reading " + what);
    return std::string(tag, 4);
  };
  try {
    if (read_tag("RIFF") != "RIFF") throw WavError(where + ": not a RIFF file");
    binio::read_le<std::uint32_t>(is, "riff size");
    if (read_tag("WAVE") != "WAVE") throw WavError(where + ": not a WAVE file");

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    while (true) {
      const std::string id = read_tag("chunk id");
      const auto size = binio::read_le<std::uint32_t>(is, "chunk size");
      if (id == "fmt ") {
        if (size < 16) throw WavError(where + ": fmt chunk too small");
        format = binio::read_le<std::uint16_t>(is, "format");
        channels = binio::read_le<std::uint16_t>(is, "channels");
        rate = binio::read_le<std::uint32_t>(is, "sample rate");
        binio::read_le<std::uint32_t>(is, "byte rate");
        binio::read_le<std::uint16_t>(is, "block align");
        bits = binio::read_le<std::uint16_t>(is, "bits per sample");
        std::uint32_t consumed = 16;
        if (format == detail::kWavExtensible && size >= 40) {
          binio::read_le<std::uint16_t>(is, "cb size");
          binio::read_le<std::uint16_t>(is, "valid bits");
          binio::read_le<std::uint32_t>(is, "channel mask");
          format = binio::read_le<std::uint16_t>(is, "subformat");
          consumed += 10;
        }
        is.ignore(size - consumed + (size & 1));
        have_fmt = true;
      } else if (id == "data") {
        if (!have_fmt) throw WavError(where + ": data chunk before fmt chunk");
        if (channels == 0 || rate == 0) throw WavError(where + ": invalid channel count or sample rate");
        const bool pcm16 = format == detail::kWavPcm && bits == 16;
        const bool f32 = format == detail::kWavFloat && bits == 32;
        if (!pcm16 && !f32) {
          throw WavError(where + ": unsupported codec (format " + std::to_string(format) + ", " +
                         std::to_string(bits) + " bits); need PCM16 or float32");
        }
        const std::size_t bytes_per = bits / 8;
        const std::size_t frames = size / (bytes_per * channels);
        Waveform w;
        w.sample_rate = rate;
        w.samples.resize(frames);
        for (std::size_t i = 0; i < frames; ++i) {
          double acc = 0.0;
          for (std::size_t ch = 0; ch < channels; ++ch) {
            if (pcm16) {
              const auto raw = static_cast<std::int16_t>(binio::read_le<std::uint16_t>(is, "sample"));
              acc += static_cast<double>(raw) / 32768.0;
            } else {
              acc += binio::read_f32(is, "sample");
            }
          }
          w.samples[i] = static_cast<float>(acc / channels);
        }
        for (float s : w.samples) {
          if (!std::isfinite(s)) throw WavError(where + ": non-finite sample");
        }
        return w;
      } else {
        is.ignore(size + (size & 1));
        if (!is) throw WavError(where + ": truncated chunk " + id);
      }
    }
  } catch (const binio::FormatError& e) {
    throw WavError(where + ": " + e.what());
  }
}

enum class WavEncoding { Pcm16, Float32 };

/// Writes a mono RIFF/WAVE file. PCM16 clips to [-1, 1) and rounds to nearest.
inline void write_wav(const std::filesystem::path& path, const Waveform& w,
                      WavEncoding enc = WavEncoding::Pcm16) {
  if (w.sample_rate == 0) throw WavError("write_wav: sample rate must be positive");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WavError("cannot open wav file for writing: " + path.string());
  const std::uint16_t bits = enc == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * bits / 8);
  os.write("RIFF", 4);
  binio::write_le<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  binio::write_le<std::uint32_t>(os, 16);
  binio::write_le<std::uint16_t>(os, enc == WavEncoding::Pcm16 ? detail::kWavPcm : detail::kWavFloat);
  binio::write_le<std::uint16_t>(os, 1);
  binio::write_le<std::uint32_t>(os, w.sample_rate);
  binio::write_le<std::uint32_t>(os, w.sample_rate * bits / 8);
  binio::write_le<std::uint16_t>(os, bits / 8);
  binio::write_le<std::uint16_t>(os, bits);
  os.write("data", 4);
  binio::write_le<std::uint32_t>(os, data_bytes);
  for (float s : w.samples) {
    if (enc == WavEncoding::Pcm16) {
      const double q = std::round(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32768.0);
      const auto v = static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
      binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(v));
    } else {
      binio::write_f32(os, s);
    }
  }
  if (!os) throw WavError("write failed: " + path.string());
}

}  // namespace kdasc
