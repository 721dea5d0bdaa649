#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdasc/binio.hpp"
#include "kdasc/models.hpp"
#include "kdasc/ops.hpp"
#include "kdasc/pipeline.hpp"

namespace kdasc {

/// Hard-label weight and softmax temperature of the distillation loss.
struct DistillConfig {
  double lambda = 0.02;
  double tau = 2.0;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("distill: lambda must lie in [0,1]");
    if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be positive");
  }
};

/// lambda * CE(softmax(z_s), y) + (1 - lambda) * tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau)),
/// both terms averaged over the batch. Teacher logits are constants.
template <class T>
BasicTensor<T> kd_loss(const BasicTensor<T>& student, const BasicTensor<T>& teacher,
                       const std::vector<int>& labels, const DistillConfig& cfg) {
  cfg.validate();
  detail::check_labels(student, labels, "kd_loss");
  if (student.shape() != teacher.shape()) {
    throw ShapeError("kd_loss: student logits " + shape_str(student.shape()) + " vs teacher " +
                     shape_str(teacher.shape()));
  }
  if (teacher.requires_grad()) throw std::invalid_argument("kd_loss: teacher logits must be detached constants");
  const std::size_t n = student.dim(0), k = student.dim(1);
  const double tau = cfg.tau, lambda = cfg.lambda;
  const auto ls = log_softmax_rows(student);
  const auto ls_t = log_softmax_rows(student, tau);
  const auto lt_t = log_softmax_rows(teacher, tau);

  double ce = 0.0, kl = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    ce -= ls[b * k + static_cast<std::size_t>(labels[b])];
    for (std::size_t j = 0; j < k; ++j) {
      const double pt = std::exp(lt_t[b * k + j]);
      if (pt > 0.0) kl += pt * (lt_t[b * k + j] - ls_t[b * k + j]);
    }
  }
  ce /= static_cast<double>(n);
  kl /= static_cast<double>(n);
  const double value = lambda * ce + (1.0 - lambda) * tau * tau * kl;
  auto out = BasicTensor<T>::scalar(static_cast<T>(value));
  if (detail::should_record(student)) {
    Tape<T>::active().record("kd_loss", out, [student, labels, out, ls, ls_t, lt_t, n, k, tau,
                                              lambda]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(n);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t i = b * k + j;
          const double onehot = static_cast<std::size_t>(labels[b]) == j ? 1.0 : 0.0;
          const double hard = std::exp(ls[i]) - onehot;
          // d/dz of tau^2 * KL is tau * (p_s - p_t) at temperature tau
          const double soft = tau * (std::exp(ls_t[i]) - std::exp(lt_t[i]));
          student.grad()[i] += static_cast<T>(g * (lambda * hard + (1.0 - lambda) * soft));
        }
    });
  }
  return out;
}

struct TauGradientPoint {
  double tau = 1.0;
  std::vector<double> scaled_grad;  // tau^2 * dKL_tau / dz_s
  double rel_err_to_limit = 0.0;
};

struct TauGradientReport {
  std::vector<double> limit;  // (1/K) * ((z_s - mean z_s) - (z_t - mean z_t))
  std::vector<TauGradientPoint> points;
  bool converged = false;  // largest tau within 5% of the limit
};

/// Evaluates tau^2-scaled soft-target gradients against their high-temperature limit.
inline TauGradientReport tau_gradient_scale_check(const std::vector<double>& z_s, const std::vector<double>& z_t,
                                                  const std::vector<double>& taus) {
  if (z_s.size() != z_t.size() || z_s.empty()) throw ShapeError("tau_gradient_scale_check: logit size mismatch");
  const std::size_t k = z_s.size();
  TauGradientReport rep;
  double ms = 0.0, mt = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    ms += z_s[j];
    mt += z_t[j];
  }
  ms /= static_cast<double>(k);
  mt /= static_cast<double>(k);
  rep.limit.resize(k);
  double limit_norm = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    rep.limit[j] = ((z_s[j] - ms) - (z_t[j] - mt)) / static_cast<double>(k);
    limit_norm += rep.limit[j] * rep.limit[j];
  }
  limit_norm = std::sqrt(limit_norm);
  for (double tau : taus) {
    if (tau < 1.0) throw std::invalid_argument("tau_gradient_scale_check: tau values must be >= 1");
    auto& tape = Tape<double>::active();
    tape.reset();
    BasicTensor<double> s(Shape{1, k}, z_s, true);
    BasicTensor<double> t(Shape{1, k}, z_t);
    auto loss = kd_loss(s, t, std::vector<int>{0}, DistillConfig{0.0, tau});
    tape.backward(loss);
    TauGradientPoint p{tau, s.grad(), 0.0};
    double diff = 0.0, gnorm = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      diff += (p.scaled_grad[j] - rep.limit[j]) * (p.scaled_grad[j] - rep.limit[j]);
      gnorm += p.scaled_grad[j] * p.scaled_grad[j];
    }
    p.rel_err_to_limit = limit_norm > 0.0 ? std::sqrt(diff) / limit_norm : std::sqrt(gnorm);
    rep.points.push_back(std::move(p));
    tape.reset();
  }
  if (!rep.points.empty()) {
    auto best = std::max_element(rep.points.begin(), rep.points.end(),
                                 [](const auto& a, const auto& b) { return a.tau < b.tau; });
    rep.converged = best->rel_err_to_limit < 0.05;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Logit stores

/// Per-clip class logits, keyed and ordered by clip id.
class LogitStore {
 public:
  LogitStore() = default;
  explicit LogitStore(std::size_t class_count) : k_(class_count) {}

  std::size_t class_count() const { return k_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  const std::map<std::string, std::vector<float>>& entries() const { return entries_; }

  const std::vector<float>& at(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw std::out_of_range("logit store has no entry for clip " + id);
    return it->second;
  }

  void add(const std::string& id, std::vector<float> logits) {
    if (logits.size() != k_) {
      throw std::invalid_argument("logit store: clip " + id + " has " + std::to_string(logits.size()) +
                                  " logits, store holds " + std::to_string(k_) + " classes");
    }
    for (float v : logits)
      if (!std::isfinite(v)) throw std::invalid_argument("logit store: non-finite logit for clip " + id);
    if (!entries_.emplace(id, std::move(logits)).second) {
      throw std::invalid_argument("logit store: duplicate clip id " + id);
    }
  }

  bool operator==(const LogitStore& o) const { return k_ == o.k_ && entries_ == o.entries_; }

 private:
  std::size_t k_ = 0;
  std::map<std::string, std::vector<float>> entries_;
};

inline constexpr std::uint32_t kLogitStoreVersion = 1;

/// DFLG layout: magic, u32 version, u32 K, u64 count, then per entry in id
/// order: u16 id length, UTF-8 id, K little-endian f32.
inline void write_logits(const std::filesystem::path& path, const LogitStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open logit store for writing: " + path.string());
  binio::write_magic(os, "DFLG");
  binio::write_le<std::uint32_t>(os, kLogitStoreVersion);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(store.class_count()));
  binio::write_le<std::uint64_t>(os, store.size());
  for (const auto& [id, logits] : store.entries()) {
    if (id.size() > 0xFFFF) throw std::invalid_argument("clip id too long: " + id);
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (float v : logits) binio::write_f32(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline LogitStore import_logits(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open logit store: " + path.string());
  const std::string where = path.string();
  binio::expect_magic(is, "DFLG", where);
  const auto version = binio::read_le<std::uint32_t>(is, "version");
  if (version != kLogitStoreVersion) {
    throw binio::FormatError(where + ": unsupported logit store version " + std::to_string(version));
  }
  const auto k = binio::read_le<std::uint32_t>(is, "class count");
  if (k == 0) throw binio::FormatError(where + ": zero class count");
  const auto count = binio::read_le<std::uint64_t>(is, "entry count");
  LogitStore store(k);
  std::string prev;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = binio::read_le<std::uint16_t>(is, "id length");
    std::string id = binio::read_string(is, len, "clip id");
    if (i > 0 && !(prev < id)) throw binio::FormatError(where + ": entries not sorted or duplicated at " + id);
    std::vector<float> logits(k);
    for (auto& v : logits) v = binio::read_f32(is, "logits");
    try {
      store.add(id, std::move(logits));
    } catch (const std::invalid_argument& e) {
      throw binio::FormatError(where + ": " + e.what());
    }
    prev = std::move(id);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw binio::FormatError(where + ": trailing bytes");
  return store;
}

/// Per-clip arithmetic mean of logits across stores.
inline LogitStore ensemble_logits(const std::vector<LogitStore>& stores) {
  if (stores.empty()) throw std::invalid_argument("ensemble_logits: no stores given");
  const auto& first = stores.front();
  for (std::size_t s = 1; s < stores.size(); ++s) {
    if (stores[s].class_count() != first.class_count()) {
      throw std::invalid_argument("ensemble_logits: store " + std::to_string(s) + " has " +
                                  std::to_string(stores[s].class_count()) + " classes, expected " +
                                  std::to_string(first.class_count()));
    }
    std::vector<std::string> missing;
    for (const auto& [id, v] : first.entries())
      if (!stores[s].contains(id)) missing.push_back(id);
    for (const auto& [id, v] : stores[s].entries())
      if (!first.contains(id)) missing.push_back(id);
    if (!missing.empty()) {
      std::string msg = "ensemble_logits: clip id sets differ between store 0 and store " + std::to_string(s) +
                        "; missing ids:";
      for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 5); ++i) msg += " " + missing[i];
      if (missing.size() > 5) msg += " ... (" + std::to_string(missing.size()) + " total)";
      throw std::invalid_argument(msg);
    }
  }
  const std::size_t k = first.class_count();
  LogitStore out(k);
  std::vector<double> column(stores.size());
  for (const auto& [id, v0] : first.entries()) {
    std::vector<float> mean(k);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t s = 0; s < stores.size(); ++s) column[s] = stores[s].at(id)[j];
      // summation order fixed by value so the result does not depend on store order
      std::sort(column.begin(), column.end());
      double acc = 0.0;
      for (double c : column) acc += c;
      mean[j] = static_cast<float>(acc / static_cast<double>(stores.size()));
    }
    out.add(id, std::move(mean));
  }
  return out;
}

/// Eval-mode logits for every clip of a split (or all clips), from the
/// deterministic center crop.
inline LogitStore export_logits(ModelGraph& model, const InputPipeline& pipe, const DatasetManifest& manifest,
                                std::optional<Split> split, AudioCache* cache = nullptr,
                                std::size_t batch_size = 32) {
  AudioCache local;
  AudioCache& audio = cache ? *cache : local;
  std::vector<ClipRecord> clips;
  for (const auto& r : manifest.records)
    if (!split || r.split == *split) clips.push_back(r);
  LogitStore store(static_cast<std::size_t>(model.spec().n_classes));
  NoGradGuard<float> no_grad;
  for (std::size_t start = 0; start < clips.size(); start += batch_size) {
    const std::size_t end = std::min(clips.size(), start + batch_size);
    std::vector<LogMelSpec> specs;
    for (std::size_t i = start; i < end; ++i) {
      const auto& w = audio.get(manifest, clips[i]);
      specs.push_back(compute_log_mel(center_crop(w, pipe.crop_samples), pipe.frontend));
    }
    const Tensor logits = model.forward(stack_specs(specs), false);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t b = i - start;
      store.add(clips[i].clip_path,
                std::vector<float>(logits.data().begin() + static_cast<long>(b * k),
                                   logits.data().begin() + static_cast<long>((b + 1) * k)));
    }
  }
  return store;
}

}  // namespace kdasc
