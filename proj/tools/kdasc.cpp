// Command-line front end: toy data, training, distillation, logit handling,
// evaluation, complexity accounting and the experiment matrix.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "kdasc/matrix.hpp"

namespace fs = std::filesystem;
using namespace kdasc;

namespace {

void print_progress(const std::string& s) { std::cerr << s << '\n'; }

std::optional<Split> split_arg(const std::string& s) {
  if (s == "all") return std::nullopt;
  return parse_split(s);
}

int run_training(const std::string& config_path, const std::string& out, int runs, int epochs,
                 const std::string& teacher_logits, bool student) {
  auto cfg = ExperimentConfig::load(config_path);
  if (runs > 0) cfg.train.runs = runs;
  if (epochs > 0) cfg.train.epochs = epochs;
  if (!teacher_logits.empty()) cfg.teacher_logits = teacher_logits;
  if (student) {
    cfg.role = Role::Student;
    if (cfg.teacher_logits.empty()) throw ConfigError("distill needs teacher logits ([distill] teacher_logits)");
  }
  const auto res = train(cfg, out, print_progress);
  std::cout << format_report(res.aggregate);
  for (const auto& r : res.runs)
    std::cout << "run " << r.seed << " initial_loss " << r.initial_loss << " final_loss " << r.final_loss() << " -> "
              << r.final_checkpoint.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdasc: low-complexity acoustic scene classification with knowledge distillation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic multi-device scene dataset and manifest");
  std::string gen_out;
  ToyDatasetOptions toy;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", toy.seed);
  gen->add_option("--scenes", toy.n_scenes);
  gen->add_option("--devices", toy.n_devices);
  gen->add_option("--unseen", toy.n_unseen, "devices held out of training");
  gen->add_option("--clips-per-cell", toy.clips_per_cell);
  gen->add_option("--val-per-cell", toy.val_per_cell);
  gen->add_option("--sample-rate", toy.sample_rate);
  gen->add_option("--seconds", toy.clip_seconds);

  // train / distill
  std::string cfg_path, out_dir, teacher_path;
  int runs = 0, epochs = 0;
  auto* tr = app.add_subcommand("train", "train a model from a config file");
  tr->add_option("--config", cfg_path)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--runs", runs, "independent seeded runs");
  tr->add_option("--epochs", epochs);
  tr->add_option("--teacher-logits", teacher_path);
  auto* ds = app.add_subcommand("distill", "train a student against teacher logits");
  ds->add_option("--config", cfg_path)->required()->check(CLI::ExistingFile);
  ds->add_option("--out", out_dir)->required();
  ds->add_option("--runs", runs);
  ds->add_option("--epochs", epochs);
  ds->add_option("--teacher-logits", teacher_path);

  // export-logits
  std::string model_path, manifest_path, split = "all", logits_out;
  auto* ex = app.add_subcommand("export-logits", "run a checkpoint over a manifest and store its logits");
  ex->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  ex->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  ex->add_option("--split", split, "train, val or all");
  ex->add_option("--out", logits_out)->required();

  // ensemble-logits
  std::vector<std::string> inputs;
  auto* en = app.add_subcommand("ensemble-logits", "average several logit stores");
  en->add_option("inputs", inputs)->required()->check(CLI::ExistingFile);
  en->add_option("--out", logits_out)->required();

  // evaluate
  std::string eval_logits, eval_split = "val";
  bool as_json = false;
  auto* ev = app.add_subcommand("evaluate", "accuracy of a checkpoint or a logit store");
  auto* ev_model = ev->add_option("--model", model_path)->check(CLI::ExistingFile);
  auto* ev_logits = ev->add_option("--logits", eval_logits)->check(CLI::ExistingFile);
  ev_model->excludes(ev_logits);
  ev->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  ev->add_option("--split", eval_split, "train or val");
  ev->add_flag("--json", as_json);

  // count-complexity
  std::string arch = "cpm";
  ModelSpec spec;
  std::size_t mel_bins = 64, frames = 101;
  bool csv = false, enforce = false;
  auto* cc = app.add_subcommand("count-complexity", "per-layer parameter and MAC table");
  cc->add_option("--arch", arch, "cpm, cpr or baseline");
  cc->add_option("--base-channels", spec.base_channels);
  cc->add_option("--expansion-rate", spec.expansion_rate);
  cc->add_option("--channels-multiplier", spec.channels_multiplier);
  cc->add_option("--classes", spec.n_classes);
  cc->add_option("--mel-bins", mel_bins);
  cc->add_option("--frames", frames);
  cc->add_flag("--csv", csv);
  cc->add_flag("--enforce-budget", enforce, "exit non-zero when the budget is exceeded");

  // matrix
  bool plan_only = false;
  auto* mx = app.add_subcommand("matrix", "train teachers, ensemble their logits and distill students");
  mx->add_option("--config", cfg_path)->required()->check(CLI::ExistingFile);
  mx->add_option("--out", out_dir)->required();
  mx->add_flag("--plan-only", plan_only, "print the expanded job list and stop");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto m = generate_toy_dataset(gen_out, toy);
      std::cout << "wrote " << m.records.size() << " clips to " << gen_out << '\n';
    } else if (*tr) {
      return run_training(cfg_path, out_dir, runs, epochs, teacher_path, false);
    } else if (*ds) {
      return run_training(cfg_path, out_dir, runs, epochs, teacher_path, true);
    } else if (*ex) {
      auto lm = load_model(model_path);
      const auto manifest = read_manifest(manifest_path);
      const auto store = export_logits(lm.model, lm.pipe, manifest, split_arg(split));
      write_logits(logits_out, store);
      std::cout << "wrote " << store.size() << " clips to " << logits_out << '\n';
    } else if (*en) {
      std::vector<LogitStore> stores;
      for (const auto& p : inputs) stores.push_back(import_logits(p));
      const auto e = ensemble_logits(stores);
      write_logits(logits_out, e);
      std::cout << "averaged " << stores.size() << " stores over " << e.size() << " clips\n";
    } else if (*ev) {
      const auto manifest = read_manifest(manifest_path);
      MetricsReport rep;
      if (!eval_logits.empty()) {
        rep = evaluate(import_logits(eval_logits), manifest, parse_split(eval_split));
      } else if (!model_path.empty()) {
        auto lm = load_model(model_path);
        rep = evaluate(lm.model, lm.pipe, manifest, parse_split(eval_split));
      } else {
        throw std::invalid_argument("evaluate needs --model or --logits");
      }
      if (as_json) std::cout << to_json(rep).dump(2) << '\n';
      else std::cout << format_report(rep);
    } else if (*cc) {
      spec.arch = parse_arch(arch);
      const Shape input{1, mel_bins, frames};
      const auto g = build_model(spec, input);
      const auto c = count_complexity(g, input);
      std::cout << (csv ? format_complexity_csv(c) : format_complexity_table(c));
      const auto verdict = assert_budget(c);
      std::cerr << verdict.message << '\n';
      if (enforce && !verdict.pass) return 2;
    } else if (*mx) {
      const auto spec_m = MatrixSpec::load(cfg_path);
      const auto plan = plan_matrix(spec_m);
      std::cout << plan.teachers.size() << " teacher sources (" << plan.trained_teacher_count() << " trained), "
                << plan.ensembles.size() << " ensembles, " << plan.student_count() << " students\n";
      if (plan_only) {
        for (const auto& t : plan.teachers)
          std::cout << "  teacher " << t.name() << (t.imported ? " [import " + t.import_path + "]" : "") << '\n';
        for (const auto& e : plan.ensembles) std::cout << "  ensemble " << e.name << " (" << e.sources.size() << ")\n";
        return 0;
      }
      const auto res = run_matrix(spec_m, out_dir, print_progress);
      std::cout << results_markdown(res.rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
