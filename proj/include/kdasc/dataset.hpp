#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/fft.hpp"
#include "kdasc/rng.hpp"
#include "kdasc/wav.hpp"

namespace kdasc {

inline const std::vector<std::string>& scene_names() {
  static const std::vector<std::string> names{"airport",      "bus",           "metro",
                                              "metro_station", "park",          "public_square",
                                              "shopping_mall", "street_pedestrian", "street_traffic",
                                              "tram"};
  return names;
}

/// Accepts a scene name or a plain class index.
inline int parse_scene(const std::string& s) {
  const auto& names = scene_names();
  auto it = std::find(names.begin(), names.end(), s);
  if (it != names.end()) return static_cast<int>(it - names.begin());
  if (!s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    const int v = std::stoi(s);
    if (v < static_cast<int>(names.size())) return v;
  }
  throw std::invalid_argument("unknown scene label '" + s + "'");
}

enum class Split { Train, Val };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "val"; }
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw std::invalid_argument("unknown split '" + s + "' (expected train or val)");
}

struct ClipRecord {
  std::string clip_path;  // relative to the manifest directory
  int scene = 0;
  std::string device;
  Split split = Split::Train;
};

/// Clip list with labels, recording devices and splits.
struct DatasetManifest {
  std::vector<ClipRecord> records;
  std::filesystem::path root;  // directory clip paths are resolved against

  std::filesystem::path resolve(const ClipRecord& r) const { return root / r.clip_path; }

  std::vector<ClipRecord> split(Split s) const {
    std::vector<ClipRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }

  std::set<std::string> devices(Split s) const {
    std::set<std::string> out;
    for (const auto& r : records)
      if (r.split == s) out.insert(r.device);
    return out;
  }

  /// Validation devices never seen in training.
  std::set<std::string> unseen_devices() const {
    const auto train = devices(Split::Train);
    std::set<std::string> out;
    for (const auto& d : devices(Split::Val))
      if (!train.count(d)) out.insert(d);
    return out;
  }

  void validate() const {
    std::set<std::string> paths;
    bool has_val = false;
    for (const auto& r : records) {
      if (!paths.insert(r.clip_path).second) throw std::invalid_argument("manifest: duplicate clip path " + r.clip_path);
      if (r.scene < 0 || r.scene >= static_cast<int>(scene_names().size()))
        throw std::invalid_argument("manifest: scene label out of range for " + r.clip_path);
      if (r.device.empty()) throw std::invalid_argument("manifest: empty device id for " + r.clip_path);
      has_val = has_val || r.split == Split::Val;
    }
    if (!has_val) throw std::invalid_argument("manifest: validation split is empty");
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline constexpr const char* kManifestHeader = "clip_path,scene,device,split";

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw std::runtime_error(path.string() + ": expected header '" + kManifestHeader + "', got '" + line + "'");
  }
  DatasetManifest m;
  m.root = path.parent_path();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cols = detail::split_csv_line(line);
    if (cols.size() != 4) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    }
    m.records.push_back(ClipRecord{cols[0], parse_scene(cols[1]), cols[2], parse_split(cols[3])});
  }
  m.validate();
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    os << r.clip_path << ',' << scene_names().at(static_cast<std::size_t>(r.scene)) << ',' << r.device << ','
       << split_name(r.split) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic scenes recorded by synthetic devices

struct ToyDatasetOptions {
  std::uint64_t seed = 1;
  int n_scenes = 10;
  int n_devices = 9;
  int n_unseen = 3;
  int clips_per_cell = 4;  // training clips per (scene, seen device)
  int val_per_cell = 1;    // validation clips per (scene, device)
  std::uint32_t sample_rate = 32000;
  double clip_seconds = 1.0;

  void validate() const {
    if (n_scenes < 2 || n_scenes > static_cast<int>(scene_names().size()))
      throw std::invalid_argument("toy dataset: n_scenes must lie in [2,10]");
    if (n_devices < 1) throw std::invalid_argument("toy dataset: need at least one device");
    if (n_unseen < 0 || n_unseen >= n_devices)
      throw std::invalid_argument("toy dataset: n_unseen must satisfy 0 <= n_unseen < n_devices");
    if (clips_per_cell < 1 || val_per_cell < 1) throw std::invalid_argument("toy dataset: clip counts must be positive");
    if (sample_rate < 8000 || !(clip_seconds > 0.0)) throw std::invalid_argument("toy dataset: bad audio format");
  }
};

/// Scene texture: a band of coloured noise under an amplitude modulation, plus
/// two gated tones. The modulation and gating rhythms identify the scene even
/// after per-bin renormalization.
struct SceneTexture {
  double band_center = 1000.0;  // Hz
  double band_width = 0.5;      // octaves
  double tone_freq[2] = {440.0, 880.0};
  double tone_gain[2] = {0.2, 0.1};
  double tone_rate[2] = {1.0, 2.0};  // gate frequency, Hz
  double mod_rate = 2.0;             // Hz
  double mod_depth = 0.3;
};

struct DeviceColoration {
  std::vector<double> fir;
  double gain = 1.0;
};

namespace detail {

inline SceneTexture make_scene(std::uint64_t seed, int scene, int n_scenes, double nyquist) {
  Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(scene)));
  SceneTexture t;
  const double lo = std::log2(150.0), hi = std::log2(std::min(8000.0, 0.6 * nyquist));
  const double pos = (static_cast<double>(scene) + 0.5) / n_scenes;
  t.band_center = std::exp2(lo + (hi - lo) * pos + rng.uniform(-0.1, 0.1));
  t.band_width = rng.uniform(0.4, 1.2);
  for (int k = 0; k < 2; ++k) {
    t.tone_freq[k] = std::exp2(rng.uniform(lo, hi));
    t.tone_gain[k] = rng.uniform(0.1, 0.3);
    t.tone_rate[k] = rng.uniform(0.7, 6.0);
  }
  // modulation rates spread log-uniformly over 1.5..12 Hz, in an order unrelated to the band
  const int slot = (scene * 7 + 3) % n_scenes;
  t.mod_rate = std::exp2(std::log2(1.5) + 3.0 * (static_cast<double>(slot) + 0.5) / n_scenes);
  t.mod_depth = rng.uniform(0.7, 0.95);
  return t;
}

inline DeviceColoration make_device(std::uint64_t seed, int device) {
  Rng rng(derive_seed(seed, 2000 + static_cast<std::uint64_t>(device)));
  DeviceColoration d;
  const std::size_t taps = 32;
  d.fir.resize(taps);
  const double decay = rng.uniform(2.0, 8.0);
  for (std::size_t i = 0; i < taps; ++i) d.fir[i] = 0.6 * rng.normal() * std::exp(-static_cast<double>(i) / decay);
  d.fir[0] = 1.0;
  d.gain = rng.uniform(0.5, 1.0);
  return d;
}

inline std::vector<double> render_scene(const SceneTexture& t, std::size_t n, std::uint32_t rate, Rng& rng) {
  const std::size_t nfft = next_power_of_two(n);
  std::vector<Complex> spec(nfft);
  for (std::size_t i = 0; i < n; ++i) spec[i] = rng.normal();
  fft_inplace(spec);
  const double center = t.band_center * rng.uniform(0.95, 1.05);
  for (std::size_t k = 0; k <= nfft / 2; ++k) {
    const double f = std::max(1.0, static_cast<double>(k) * rate / static_cast<double>(nfft));
    const double oct = std::log2(f / center) / t.band_width;
    const double g = std::exp(-0.5 * oct * oct) + 0.02;
    spec[k] *= g;
    if (k != 0 && k != nfft / 2) spec[nfft - k] *= g;
  }
  spec = ifft(std::move(spec));
  std::vector<double> x(n);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = spec[i].real();
    peak = std::max(peak, std::abs(x[i]));
  }
  for (auto& v : x) v = 0.5 * v / (peak > 0 ? peak : 1.0);
  const double phase_mod = rng.uniform(0.0, 2.0 * std::numbers::pi);
  double phase[2] = {rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  const double jitter[2] = {rng.uniform(0.97, 1.03), rng.uniform(0.97, 1.03)};
  const double gate_phase[2] = {rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  for (std::size_t i = 0; i < n; ++i) {
    const double time = static_cast<double>(i) / rate;
    double v = x[i];
    v *= 1.0 - t.mod_depth * 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * t.mod_rate * time + phase_mod));
    for (int k = 0; k < 2; ++k) {
      if (std::sin(2.0 * std::numbers::pi * t.tone_rate[k] * time + gate_phase[k]) < 0.0) continue;
      v += t.tone_gain[k] * std::sin(2.0 * std::numbers::pi * t.tone_freq[k] * jitter[k] * time + phase[k]);
    }
    x[i] = v;
  }
  return x;
}

}  // namespace detail

inline std::string toy_device_name(int d) { return "d" + std::to_string(d + 1); }

/// Writes WAVs under out_dir/audio and returns the manifest (also written as
/// out_dir/manifest.csv). Fully determined by the options.
inline DatasetManifest generate_toy_dataset(const std::filesystem::path& out_dir, const ToyDatasetOptions& opt) {
  opt.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "audio");
  const std::size_t n = static_cast<std::size_t>(std::lround(opt.clip_seconds * opt.sample_rate));
  const double nyquist = opt.sample_rate / 2.0;
  std::vector<SceneTexture> scenes;
  for (int s = 0; s < opt.n_scenes; ++s) scenes.push_back(detail::make_scene(opt.seed, s, opt.n_scenes, nyquist));
  std::vector<DeviceColoration> devices;
  for (int d = 0; d < opt.n_devices; ++d) devices.push_back(detail::make_device(opt.seed, d));
  const int n_seen = opt.n_devices - opt.n_unseen;

  DatasetManifest m;
  m.root = out_dir;
  std::uint64_t clip_counter = 0;
  for (int s = 0; s < opt.n_scenes; ++s) {
    const std::string scene = scene_names()[static_cast<std::size_t>(s)];
    fs::create_directories(out_dir / "audio" / scene);
    for (int d = 0; d < opt.n_devices; ++d) {
      const bool seen = d < n_seen;
      const int total = seen ? opt.clips_per_cell + opt.val_per_cell : opt.val_per_cell;
      for (int k = 0; k < total; ++k) {
        Rng rng(derive_seed(opt.seed, 10000 + clip_counter++));
        auto x = detail::render_scene(scenes[static_cast<std::size_t>(s)], n, opt.sample_rate, rng);
        auto y = fft_convolve_truncated(x, devices[static_cast<std::size_t>(d)].fir);
        double peak = 0.0;
        for (double v : y) peak = std::max(peak, std::abs(v));
        const double g = devices[static_cast<std::size_t>(d)].gain * 0.9 / (peak > 0 ? peak : 1.0);
        Waveform w{std::vector<float>(n), opt.sample_rate};
        for (std::size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(y[i] * g);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%03d.wav", toy_device_name(d).c_str(), k);
        const std::string rel = "audio/" + scene + "/" + name;
        write_wav(out_dir / rel, w);
        const Split split = (seen && k < opt.clips_per_cell) ? Split::Train : Split::Val;
        m.records.push_back(ClipRecord{rel, s, toy_device_name(d), split});
      }
    }
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace kdasc
