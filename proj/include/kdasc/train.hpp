#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kdasc/augment.hpp"
#include "kdasc/checkpoint.hpp"
#include "kdasc/complexity.hpp"
#include "kdasc/config.hpp"
#include "kdasc/distill.hpp"
#include "kdasc/metrics.hpp"
#include "kdasc/optim.hpp"

namespace kdasc {

/// Raised when a student configuration exceeds the complexity budget.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double lr = 0.0;
  MetricsReport report;
};

struct RunResult {
  std::uint64_t seed = 0;
  double initial_loss = 0.0;  // first batch, before any update
  std::vector<EpochRecord> epochs;
  std::vector<std::filesystem::path> checkpoints;  // last keep_last epochs
  std::filesystem::path final_checkpoint;
  double final_loss() const { return epochs.back().train_loss; }
};

struct TrainResult {
  std::vector<RunResult> runs;
  std::vector<MetricsReport> window_reports;  // runs x last keep_last epochs
  MetricsReport aggregate;
};

/// Input for one second of audio under the configured frontend, the unit the budget is stated for.
inline Shape one_second_input(const InputPipeline& pipe) {
  return {1, pipe.frontend.mel_bins, 1 + pipe.frontend.sample_rate / pipe.frontend.hop};
}

inline void check_student_budget(const ExperimentConfig& cfg) {
  if (cfg.role != Role::Student) return;
  const auto g = build_model(cfg.model, one_second_input(cfg.pipe));
  const auto verdict = assert_budget(count_complexity(g, one_second_input(cfg.pipe)));
  if (!verdict.pass) throw BudgetError("refusing to train student: " + verdict.message);
}

inline TensorMap checkpoint_tensors(const ModelGraph& model, const InputPipeline& pipe) {
  auto m = model.state_dict();
  m["meta.frontend"] = pipe.to_tensor();
  return m;
}

/// A model restored from a checkpoint together with the frontend it was trained with.
struct LoadedModel {
  ModelGraph model;
  InputPipeline pipe;
};

inline LoadedModel load_model(const std::filesystem::path& ckpt) {
  const auto tensors = load_checkpoint(ckpt);
  auto it = tensors.find("meta.frontend");
  if (it == tensors.end()) throw std::runtime_error(ckpt.string() + ": checkpoint lacks frontend metadata");
  LoadedModel lm{ModelGraph{}, InputPipeline::from_tensor(it->second)};
  lm.model = build_model(spec_from_state(tensors), lm.pipe.input_shape());
  lm.model.load_state_dict(tensors);
  return lm;
}

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

inline std::string epoch_name(int e) {
  std::ostringstream os;
  os << "epoch_" << std::setw(3) << std::setfill('0') << e << ".ckpt";
  return os.str();
}

}  // namespace detail

/// One training run: crop, DIR, log-mel, Freq-MixStyle, forward, loss, Adam.
/// Evaluates on the validation split after every epoch, appends a JSON line
/// per epoch to metrics_log and checkpoints the last keep_last epochs into run_dir.
inline RunResult train_run(const ExperimentConfig& cfg, const DatasetManifest& manifest, AudioCache& cache,
                           const std::optional<LogitStore>& teacher, std::uint64_t seed,
                           const std::filesystem::path& run_dir, std::ostream* metrics_log,
                           const ProgressFn& progress = {}) {
  check_student_budget(cfg);
  std::filesystem::create_directories(run_dir);
  const auto train_clips = manifest.split(Split::Train);
  if (train_clips.empty()) throw std::runtime_error("training split is empty");
  if (teacher) {
    if (teacher->class_count() != static_cast<std::size_t>(cfg.model.n_classes)) {
      throw std::invalid_argument("teacher logits have " + std::to_string(teacher->class_count()) +
                                  " classes, model has " + std::to_string(cfg.model.n_classes));
    }
    for (const auto& r : train_clips)
      if (!teacher->contains(r.clip_path)) throw std::runtime_error("teacher logits missing clip " + r.clip_path);
  }

  ModelGraph model = build_model(cfg.model, cfg.pipe.input_shape(), derive_seed(seed, 1));
  auto params = model.parameters();
  AdamState opt_state = AdamState::for_params(params);
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  const std::size_t steps_per_epoch = (train_clips.size() + batch - 1) / batch;
  LrSchedule sched{cfg.train.lr, steps_per_epoch * static_cast<std::size_t>(cfg.train.warmup_epochs),
                   steps_per_epoch * static_cast<std::size_t>(cfg.train.epochs)};
  const DirConfig dir = cfg.dir_config();
  auto& tape = Tape<float>::active();

  RunResult result;
  result.seed = seed;
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    Rng order_rng(derive_seed(seed, 100 + static_cast<std::uint64_t>(epoch)));
    const auto order = order_rng.permutation(train_clips.size());
    double loss_sum = 0.0;
    double last_lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::uint64_t batch_seed =
          derive_seed(seed, (static_cast<std::uint64_t>(epoch) << 32) + static_cast<std::uint64_t>(b));
      const std::size_t lo = b * batch, hi = std::min(train_clips.size(), lo + batch);
      std::vector<Waveform> waves;
      std::vector<int> labels;
      std::vector<float> teacher_rows;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& rec = train_clips[order[i]];
        Rng crop_rng(derive_seed(batch_seed, 2 * (i - lo)));
        waves.push_back(shifted_crop(cache.get(manifest, rec), cfg.pipe.crop_samples, crop_rng));
        labels.push_back(rec.scene);
        if (teacher) {
          const auto& t = teacher->at(rec.clip_path);
          teacher_rows.insert(teacher_rows.end(), t.begin(), t.end());
        }
      }
      if (dir.p > 0.0) waves = dir_augment_batch(waves, dir, derive_seed(batch_seed, 0xD1));
      std::vector<LogMelSpec> specs;
      for (const auto& w : waves) specs.push_back(compute_log_mel(w, cfg.pipe.frontend));
      Tensor x = stack_specs(specs);
      if (cfg.augment.use_fms) {
        Rng fms_rng(derive_seed(batch_seed, 0xF5));
        x = freq_mixstyle(x, cfg.augment.fms, fms_rng);
      }

      tape.reset();
      model.zero_grad();
      Tensor logits = model.forward(x, true);
      Tensor loss = teacher ? kd_loss(logits, Tensor(logits.shape(), teacher_rows), labels, cfg.distill)
                            : cross_entropy(logits, labels);
      if (!loss.all_finite()) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch));
      }
      if (step == 0) result.initial_loss = loss.item();
      backward(loss);
      last_lr = sched.at(step);
      optimizer_step(params, opt_state, last_lr);
      tape.reset();
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(hi - lo);
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_clips.size());
    rec.lr = last_lr;
    rec.report = evaluate(model, cfg.pipe, manifest, Split::Val, &cache);
    rec.report.run_ids = {static_cast<int>(seed)};
    rec.report.epoch_window = {epoch};
    if (metrics_log) {
      nlohmann::json j;
      j["run"] = seed;
      j["epoch"] = epoch;
      j["train_loss"] = rec.train_loss;
      j["lr"] = rec.lr;
      j["metrics"] = to_json(rec.report);
      *metrics_log << j.dump() << '\n';
      metrics_log->flush();
    }
    if (progress) {
      std::ostringstream os;
      os << "seed " << seed << " epoch " << epoch << "/" << cfg.train.epochs << " loss " << std::fixed
         << std::setprecision(4) << rec.train_loss << " val_acc " << rec.report.overall_acc;
      progress(os.str());
    }
    if (epoch > cfg.train.epochs - cfg.train.keep_last) {
      const auto path = run_dir / detail::epoch_name(epoch);
      save_checkpoint(path, checkpoint_tensors(model, cfg.pipe));
      result.checkpoints.push_back(path);
    }
    result.epochs.push_back(std::move(rec));
  }
  result.final_checkpoint = result.checkpoints.back();
  return result;
}

/// Runs cfg.train.runs seeds (seed, seed+1, ...) and averages the last
/// keep_last epoch evaluations of every run. Writes metrics.jsonl and summary.json.
inline TrainResult train(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                         const ProgressFn& progress = {}) {
  check_student_budget(cfg);
  if (cfg.manifest.empty()) throw ConfigError("[data] manifest is required");
  const auto manifest = read_manifest(cfg.manifest);
  std::optional<LogitStore> teacher;
  if (!cfg.teacher_logits.empty()) teacher = import_logits(cfg.teacher_logits);
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "metrics.jsonl");
  AudioCache cache;
  TrainResult res;
  for (int r = 0; r < cfg.train.runs; ++r) {
    const std::uint64_t seed = cfg.train.seed + static_cast<std::uint64_t>(r);
    res.runs.push_back(train_run(cfg, manifest, cache, teacher, seed, out_dir / ("run_" + std::to_string(seed)),
                                 &log, progress));
    const auto& epochs = res.runs.back().epochs;
    const std::size_t keep = std::min<std::size_t>(epochs.size(), static_cast<std::size_t>(cfg.train.keep_last));
    for (std::size_t i = epochs.size() - keep; i < epochs.size(); ++i) res.window_reports.push_back(epochs[i].report);
  }
  res.aggregate = aggregate_reports(res.window_reports);

  nlohmann::json s;
  s["aggregate"] = to_json(res.aggregate);
  s["window"] = nlohmann::json::array();
  for (const auto& w : res.window_reports) s["window"].push_back(to_json(w));
  s["runs"] = nlohmann::json::array();
  for (const auto& run : res.runs) {
    nlohmann::json jr;
    jr["seed"] = run.seed;
    jr["initial_loss"] = run.initial_loss;
    jr["final_loss"] = run.final_loss();
    jr["final_checkpoint"] = run.final_checkpoint.lexically_relative(out_dir).string();
    s["runs"].push_back(jr);
  }
  std::ofstream(out_dir / "summary.json") << s.dump(2) << '\n';
  return res;
}

}  // namespace kdasc
