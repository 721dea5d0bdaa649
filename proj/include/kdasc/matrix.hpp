#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "kdasc/train.hpp"

namespace kdasc {

/// Architectures x DG presets x seeds, plus the ensembles to distill from.
struct MatrixSpec {
  std::vector<std::string> architectures{"cpr"};  // cpr, cpm, passt-import
  std::vector<std::string> dg_presets{"DIRFMS"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int cpr_base_channels = 8;
  int cpm_base_channels = 8;
  int cpm_expansion_rate = 3;
  double cpm_channels_multiplier = 2.3;
  std::string passt_logits;  // template with {dg} and {seed}
  std::vector<std::string> ensembles{"all"};  // "all" or "arch1+arch2/dg1+dg2"
  ModelSpec student{Arch::Cpm, 8, 2, 2.0, 10};
  std::string student_preset = "DIRFMS";
  ExperimentConfig base;  // shared [data], [train], [distill], [augment] settings

  static MatrixSpec from_document(const ConfigDocument& doc, const std::filesystem::path& base_dir = {}) {
    static const std::vector<std::string> keys{
        "architectures", "dg_presets", "seeds", "cpr_base_channels", "cpm_base_channels", "cpm_expansion_rate",
        "cpm_channels_multiplier", "passt_logits", "ensembles", "student_arch", "student_base_channels",
        "student_expansion_rate", "student_channels_multiplier", "student_preset"};
    for (const auto& k : doc.keys("matrix"))
      if (std::find(keys.begin(), keys.end(), k) == keys.end())
        throw ConfigError("unknown config key 'matrix." + k + "'");
    MatrixSpec m;
    m.base = ExperimentConfig::from_document(doc, base_dir);
    if (doc.has("matrix", "architectures")) m.architectures = doc.get_list("matrix", "architectures");
    if (doc.has("matrix", "dg_presets")) m.dg_presets = doc.get_list("matrix", "dg_presets");
    if (doc.has("matrix", "seeds")) {
      m.seeds.clear();
      for (const auto& s : doc.get_list("matrix", "seeds"))
        m.seeds.push_back(static_cast<std::uint64_t>(ConfigDocument::to_double(s, "matrix.seeds")));
    }
    m.cpr_base_channels = static_cast<int>(doc.get_int("matrix", "cpr_base_channels", m.cpr_base_channels));
    m.cpm_base_channels = static_cast<int>(doc.get_int("matrix", "cpm_base_channels", m.cpm_base_channels));
    m.cpm_expansion_rate = static_cast<int>(doc.get_int("matrix", "cpm_expansion_rate", m.cpm_expansion_rate));
    m.cpm_channels_multiplier = doc.get_double("matrix", "cpm_channels_multiplier", m.cpm_channels_multiplier);
    m.passt_logits = doc.get_string("matrix", "passt_logits", "");
    if (!m.passt_logits.empty() && !base_dir.empty() && !std::filesystem::path(m.passt_logits).is_absolute())
      m.passt_logits = (base_dir / m.passt_logits).string();
    if (doc.has("matrix", "ensembles")) m.ensembles = doc.get_list("matrix", "ensembles");
    m.student.arch = parse_arch(doc.get_string("matrix", "student_arch", "cpm"));
    m.student.base_channels = static_cast<int>(doc.get_int("matrix", "student_base_channels", m.student.base_channels));
    m.student.expansion_rate =
        static_cast<int>(doc.get_int("matrix", "student_expansion_rate", m.student.expansion_rate));
    m.student.channels_multiplier =
        doc.get_double("matrix", "student_channels_multiplier", m.student.channels_multiplier);
    m.student.n_classes = m.base.model.n_classes;
    m.student_preset = doc.get_string("matrix", "student_preset", m.student_preset);
    return m;
  }

  static MatrixSpec load(const std::filesystem::path& path) {
    return from_document(ConfigDocument::load(path), path.parent_path());
  }
};

inline bool is_import_arch(const std::string& a) { return a == "passt-import" || a == "passt"; }

/// One logit source: a trained teacher or an imported store.
struct TeacherJob {
  std::string arch;
  std::string dg;
  std::uint64_t seed = 0;
  bool imported = false;
  std::string import_path;
  std::string name() const { return arch + "_" + dg + "_seed" + std::to_string(seed); }
  std::string group() const { return arch + "_" + dg; }
};

struct EnsembleJob {
  std::string name;
  std::vector<std::size_t> sources;  // indices into MatrixPlan::teachers
};

struct MatrixPlan {
  std::vector<TeacherJob> teachers;
  std::vector<EnsembleJob> ensembles;  // one student per ensemble

  std::size_t trained_teacher_count() const {
    return static_cast<std::size_t>(std::count_if(teachers.begin(), teachers.end(),
                                                  [](const auto& t) { return !t.imported; }));
  }
  std::size_t student_count() const { return ensembles.size(); }
};

namespace detail {

inline std::vector<std::string> split_plus(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == '+') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

}  // namespace detail

/// Expands the matrix into teacher jobs and ensembles without running anything.
/// Every referenced DG preset and imported store is validated here.
inline MatrixPlan plan_matrix(const MatrixSpec& spec) {
  MatrixPlan plan;
  for (const auto& dg : spec.dg_presets) dg_preset(dg, "cpr", Role::Teacher);  // throws on undefined presets
  for (const auto& arch : spec.architectures) {
    if (!is_import_arch(arch)) parse_arch(arch);
    for (const auto& dg : spec.dg_presets) {
      for (auto seed : spec.seeds) {
        TeacherJob j{arch, dg, seed, is_import_arch(arch), ""};
        if (j.imported) {
          if (spec.passt_logits.empty()) throw ConfigError("matrix: " + arch + " requires matrix.passt_logits");
          j.import_path = detail::replace_all(detail::replace_all(spec.passt_logits, "{dg}", dg), "{seed}",
                                              std::to_string(seed));
          if (!std::filesystem::exists(j.import_path))
            throw ConfigError("matrix: missing imported logit store " + j.import_path);
        }
        plan.teachers.push_back(std::move(j));
      }
    }
  }
  for (const auto& e : spec.ensembles) {
    EnsembleJob ens;
    std::set<std::string> archs, dgs;
    if (e == "all") {
      ens.name = "all";
      archs.insert(spec.architectures.begin(), spec.architectures.end());
      dgs.insert(spec.dg_presets.begin(), spec.dg_presets.end());
    } else {
      const auto slash = e.find('/');
      if (slash == std::string::npos) throw ConfigError("matrix: ensemble '" + e + "' must look like archs/dgs");
      for (const auto& a : detail::split_plus(e.substr(0, slash))) archs.insert(a);
      for (const auto& d : detail::split_plus(e.substr(slash + 1))) dgs.insert(d);
      ens.name = detail::replace_all(detail::replace_all(e, "/", "__"), "+", "-");
    }
    for (const auto& d : dgs)
      if (std::find(spec.dg_presets.begin(), spec.dg_presets.end(), d) == spec.dg_presets.end())
        throw ConfigError("matrix: ensemble '" + e + "' uses undefined DG preset " + d);
    for (std::size_t i = 0; i < plan.teachers.size(); ++i)
      if (archs.count(plan.teachers[i].arch) && dgs.count(plan.teachers[i].dg)) ens.sources.push_back(i);
    if (ens.sources.empty()) throw ConfigError("matrix: ensemble '" + e + "' selects no teachers");
    plan.ensembles.push_back(std::move(ens));
  }
  return plan;
}

struct ResultRow {
  std::string kind;  // teacher, ensemble, student
  std::string name;
  std::string arch;
  std::string dg;
  std::size_t models = 0;
  std::size_t evaluations = 0;
  std::optional<double> val_acc;
  std::optional<double> unseen_acc;
};

inline std::string format_acc(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * *v;
  return os.str();
}

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "kind,name,architecture,dg_preset,models,evaluations,val_acc,unseen_acc\n";
  for (const auto& r : rows)
    os << r.kind << ',' << r.name << ',' << r.arch << ',' << r.dg << ',' << r.models << ',' << r.evaluations << ','
       << format_acc(r.val_acc) << ',' << format_acc(r.unseen_acc) << '\n';
  return os.str();
}

inline std::string results_markdown(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "| Kind | Name | Arch | DG | #Models | #Evals | Val Acc | Unseen Acc |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.kind << " | " << r.name << " | " << r.arch << " | " << r.dg << " | " << r.models << " | "
       << r.evaluations << " | " << format_acc(r.val_acc) << " | " << format_acc(r.unseen_acc) << " |\n";
  return os.str();
}

/// Full-precision companion of results.csv.
inline nlohmann::json results_json(const std::vector<ResultRow>& rows) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"kind", r.kind}, {"name", r.name}, {"architecture", r.arch}, {"dg_preset", r.dg},
                   {"models", r.models}, {"evaluations", r.evaluations}, {"val_acc", opt(r.val_acc)},
                   {"unseen_acc", opt(r.unseen_acc)}});
  return out;
}

namespace detail {

inline ExperimentConfig teacher_config(const MatrixSpec& spec, const TeacherJob& job) {
  ExperimentConfig c = spec.base;
  c.role = Role::Teacher;
  c.model.arch = parse_arch(job.arch);
  if (c.model.arch == Arch::Cpr) {
    c.model.base_channels = spec.cpr_base_channels;
  } else {
    c.model.base_channels = spec.cpm_base_channels;
    c.model.expansion_rate = spec.cpm_expansion_rate;
    c.model.channels_multiplier = spec.cpm_channels_multiplier;
  }
  c.dg_preset = job.dg;
  c.augment = dg_preset(job.dg, job.arch, Role::Teacher);
  c.teacher_logits.clear();
  c.train.seed = job.seed;
  c.train.runs = 1;
  return c;
}

inline nlohmann::json read_summary(const std::filesystem::path& dir) {
  std::ifstream is(dir / "summary.json");
  if (!is) throw std::runtime_error("missing job artifact " + (dir / "summary.json").string());
  return nlohmann::json::parse(is);
}

/// The stored last-epoch evaluations of a training job.
inline std::vector<MetricsReport> read_window(const std::filesystem::path& dir) {
  const auto summary = read_summary(dir);
  std::vector<MetricsReport> out;
  for (const auto& w : summary.at("window")) out.push_back(report_from_json(w));
  return out;
}

}  // namespace detail

struct MatrixResult {
  MatrixPlan plan;
  std::vector<ResultRow> rows;
};

/// Trains every teacher, exports its logits, builds the ensembles, distills one
/// student per ensemble and writes results.csv, results.md and results.json. The results table is
/// assembled from the job artifacts on disk.
inline MatrixResult run_matrix(const MatrixSpec& spec, const std::filesystem::path& out_dir,
                               const ProgressFn& progress = {}) {
  namespace fs = std::filesystem;
  MatrixResult res;
  res.plan = plan_matrix(spec);
  if (spec.base.manifest.empty()) throw ConfigError("[data] manifest is required");
  const auto manifest = read_manifest(spec.base.manifest);

  {
    ExperimentConfig sc = spec.base;
    sc.role = Role::Student;
    sc.model = spec.student;
    check_student_budget(sc);
  }

  fs::create_directories(out_dir);
  AudioCache cache;
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };

  // teachers
  for (const auto& job : res.plan.teachers) {
    const fs::path dir = out_dir / "teachers" / job.name();
    fs::create_directories(dir);
    if (job.imported) {
      fs::copy_file(job.import_path, dir / "teacher.logits", fs::copy_options::overwrite_existing);
      continue;
    }
    say("teacher " + job.name());
    auto cfg = detail::teacher_config(spec, job);
    const auto tr = train(cfg, dir, progress);
    auto loaded = load_model(tr.runs.back().final_checkpoint);
    write_logits(dir / "teacher.logits", export_logits(loaded.model, loaded.pipe, manifest, std::nullopt, &cache));
  }

  // teacher rows: mean over seeds x last epochs, per (arch, dg)
  std::vector<std::string> groups;
  for (const auto& t : res.plan.teachers)
    if (std::find(groups.begin(), groups.end(), t.group()) == groups.end()) groups.push_back(t.group());
  for (const auto& g : groups) {
    std::vector<MetricsReport> reports;
    ResultRow row{"teacher", g, "", "", 0, 0, std::nullopt, std::nullopt};
    for (const auto& t : res.plan.teachers) {
      if (t.group() != g) continue;
      row.arch = t.arch;
      row.dg = t.dg;
      ++row.models;
      const fs::path dir = out_dir / "teachers" / t.name();
      if (t.imported) {
        try {
          auto rep = evaluate(import_logits(dir / "teacher.logits"), manifest, Split::Val);
          reports.push_back(rep);
        } catch (const std::runtime_error&) {
          // imported stores need not cover the validation split
        }
      } else {
        for (auto& w : detail::read_window(dir)) reports.push_back(std::move(w));
      }
    }
    if (!reports.empty()) {
      const auto agg = aggregate_reports(reports);
      row.val_acc = agg.overall_acc;
      row.unseen_acc = agg.unseen_acc;
      row.evaluations = agg.evaluations;
    }
    res.rows.push_back(row);
  }

  // ensembles and students
  for (const auto& ens : res.plan.ensembles) {
    std::vector<LogitStore> stores;
    std::set<std::string> archs, dgs;
    for (auto i : ens.sources) {
      const auto& t = res.plan.teachers[i];
      stores.push_back(import_logits(out_dir / "teachers" / t.name() / "teacher.logits"));
      archs.insert(t.arch);
      dgs.insert(t.dg);
    }
    auto join = [](const std::set<std::string>& s) {
      std::string out;
      for (const auto& v : s) out += (out.empty() ? "" : "+") + v;
      return out;
    };
    const fs::path edir = out_dir / "ensembles";
    fs::create_directories(edir);
    const auto ens_path = edir / (ens.name + ".logits");
    const auto ensemble = ensemble_logits(stores);
    write_logits(ens_path, ensemble);
    ResultRow erow{"ensemble", ens.name, join(archs), join(dgs), stores.size(), 1, std::nullopt, std::nullopt};
    try {
      const auto rep = evaluate(ensemble, manifest, Split::Val);
      erow.val_acc = rep.overall_acc;
      erow.unseen_acc = rep.unseen_acc;
    } catch (const std::runtime_error&) {
      erow.evaluations = 0;
    }
    res.rows.push_back(erow);

    say("student " + ens.name);
    ExperimentConfig sc = spec.base;
    sc.role = Role::Student;
    sc.model = spec.student;
    sc.dg_preset = spec.student_preset;
    sc.augment = dg_preset(spec.student_preset, arch_name(spec.student.arch), Role::Student);
    sc.teacher_logits = ens_path.string();
    sc.train.seed = spec.seeds.front();
    sc.train.runs = 1;
    const fs::path sdir = out_dir / "students" / ens.name;
    train(sc, sdir, progress);
    const auto srep = aggregate_reports(detail::read_window(sdir));
    res.rows.push_back(ResultRow{"student", ens.name, arch_name(spec.student.arch), spec.student_preset, 1,
                                 srep.evaluations, srep.overall_acc, srep.unseen_acc});
  }

  std::ofstream(out_dir / "results.csv") << results_csv(res.rows);
  std::ofstream(out_dir / "results.md") << results_markdown(res.rows);
  std::ofstream(out_dir / "results.json") << results_json(res.rows).dump(2) << '\n';
  return res;
}

}  // namespace kdasc
