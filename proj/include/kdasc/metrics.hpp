#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "kdasc/dataset.hpp"
#include "kdasc/distill.hpp"

namespace kdasc {

/// Accuracies of one evaluation, or the mean over several.
struct MetricsReport {
  double overall_acc = 0.0;
  std::map<std::string, double> per_device_acc;
  std::optional<double> unseen_acc;  // empty when no validation device is unseen
  std::optional<double> seen_acc;
  std::size_t clip_count = 0;
  std::vector<int> run_ids;
  std::vector<int> epoch_window;
  std::size_t evaluations = 1;  // number of evaluations averaged into this report
};

/// Index of the largest logit; ties go to the lowest index.
inline int argmax_lowest(const std::vector<float>& logits) {
  int best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  return best;
}

inline MetricsReport evaluate(const LogitStore& store, const DatasetManifest& manifest, Split split = Split::Val) {
  const auto unseen = manifest.unseen_devices();
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_device;  // correct, total
  std::size_t correct = 0, total = 0, u_correct = 0, u_total = 0, s_correct = 0, s_total = 0;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    if (!store.contains(r.clip_path)) throw std::runtime_error("evaluate: no logits for clip " + r.clip_path);
    const bool hit = argmax_lowest(store.at(r.clip_path)) == r.scene;
    ++total;
    correct += hit;
    auto& d = per_device[r.device];
    d.first += hit;
    ++d.second;
    if (unseen.count(r.device)) {
      ++u_total;
      u_correct += hit;
    } else {
      ++s_total;
      s_correct += hit;
    }
  }
  if (total == 0) throw std::runtime_error("evaluate: split " + split_name(split) + " is empty");
  MetricsReport rep;
  rep.clip_count = total;
  rep.overall_acc = static_cast<double>(correct) / static_cast<double>(total);
  for (const auto& [dev, ct] : per_device)
    rep.per_device_acc[dev] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
  if (u_total) rep.unseen_acc = static_cast<double>(u_correct) / static_cast<double>(u_total);
  if (s_total) rep.seen_acc = static_cast<double>(s_correct) / static_cast<double>(s_total);
  return rep;
}

inline MetricsReport evaluate(ModelGraph& model, const InputPipeline& pipe, const DatasetManifest& manifest,
                              Split split = Split::Val, AudioCache* cache = nullptr) {
  return evaluate(export_logits(model, pipe, manifest, split, cache), manifest, split);
}

/// Arithmetic mean of several reports (runs x epochs); run ids and epochs are merged.
inline MetricsReport aggregate_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate_reports: nothing to aggregate");
  MetricsReport out;
  const double n = static_cast<double>(reports.size());
  std::size_t unseen_n = 0, seen_n = 0;
  double unseen_sum = 0.0, seen_sum = 0.0, overall_sum = 0.0;
  std::map<std::string, std::pair<double, std::size_t>> dev;
  for (const auto& r : reports) {
    overall_sum += r.overall_acc;
    if (r.unseen_acc) {
      unseen_sum += *r.unseen_acc;
      ++unseen_n;
    }
    if (r.seen_acc) {
      seen_sum += *r.seen_acc;
      ++seen_n;
    }
    for (const auto& [d, a] : r.per_device_acc) {
      dev[d].first += a;
      ++dev[d].second;
    }
    for (int id : r.run_ids)
      if (std::find(out.run_ids.begin(), out.run_ids.end(), id) == out.run_ids.end()) out.run_ids.push_back(id);
    for (int e : r.epoch_window)
      if (std::find(out.epoch_window.begin(), out.epoch_window.end(), e) == out.epoch_window.end())
        out.epoch_window.push_back(e);
  }
  out.overall_acc = overall_sum / n;
  if (unseen_n) out.unseen_acc = unseen_sum / static_cast<double>(unseen_n);
  if (seen_n) out.seen_acc = seen_sum / static_cast<double>(seen_n);
  for (const auto& [d, s] : dev) out.per_device_acc[d] = s.first / static_cast<double>(s.second);
  out.clip_count = reports.front().clip_count;
  out.evaluations = reports.size();
  std::sort(out.run_ids.begin(), out.run_ids.end());
  std::sort(out.epoch_window.begin(), out.epoch_window.end());
  return out;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["overall_acc"] = r.overall_acc;
  j["per_device_acc"] = r.per_device_acc;
  j["unseen_acc"] = r.unseen_acc ? nlohmann::json(*r.unseen_acc) : nlohmann::json(nullptr);
  j["seen_acc"] = r.seen_acc ? nlohmann::json(*r.seen_acc) : nlohmann::json(nullptr);
  j["clip_count"] = r.clip_count;
  j["run_ids"] = r.run_ids;
  j["epoch_window"] = r.epoch_window;
  j["evaluations"] = r.evaluations;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.overall_acc = j.at("overall_acc").get<double>();
  r.per_device_acc = j.at("per_device_acc").get<std::map<std::string, double>>();
  if (!j.at("unseen_acc").is_null()) r.unseen_acc = j.at("unseen_acc").get<double>();
  if (j.contains("seen_acc") && !j.at("seen_acc").is_null()) r.seen_acc = j.at("seen_acc").get<double>();
  r.clip_count = j.value("clip_count", std::size_t{0});
  r.run_ids = j.value("run_ids", std::vector<int>{});
  r.epoch_window = j.value("epoch_window", std::vector<int>{});
  r.evaluations = j.value("evaluations", std::size_t{1});
  return r;
}

inline std::string format_report(const MetricsReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "overall_acc " << r.overall_acc << "\n";
  os << "unseen_acc  ";
  if (r.unseen_acc) os << *r.unseen_acc; else os << "n/a";
  os << "\n";
  for (const auto& [d, a] : r.per_device_acc) os << "  device " << d << " " << a << "\n";
  os << "clips " << r.clip_count << ", evaluations " << r.evaluations << "\n";
  return os.str();
}

}  // namespace kdasc
