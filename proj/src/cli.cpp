#include "aunet/cli.hpp"

#include "aunet/data.hpp"
#include "aunet/evaluation.hpp"
#include "aunet/gradcheck_suite.hpp"
#include "aunet/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace aunet {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct SynthArgs {
  std::string out, config;
  std::uint64_t seed = 1;
  int subjects = 0, sessions = 0, frames = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig c = a.config.empty() ? SynthConfig{} : synth_config_from_json(read_json_file(a.config));
  if (a.subjects > 0) c.subjects = a.subjects;
  if (a.sessions > 0) c.sessions = a.sessions;
  if (a.frames > 0) c.frames = a.frames;
  c.validate();
  nlohmann::json echo = to_json(c);
  echo["seed"] = a.seed;
  out << "synth config: " << echo.dump() << "\n";
  const DatasetManifest m = generate_dataset(c, a.seed, a.out);
  std::size_t sessions = 0;
  for (const auto& s : m.subjects) sessions += s.sessions.size();
  out << "wrote " << m.subjects.size() << " subjects, " << sessions << " sessions to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string mode, config, data, out, init;
  int fold = 0, folds = 3, iters = -1;
  std::uint64_t seed = 1, split_seed = 0;
  bool fold_set = false, folds_set = false, seed_set = false, split_seed_set = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  RunConfig base;
  base.model.image = data.image;
  base.model.aus = data.aus;
  RunConfig run = base;
  if (!a.config.empty()) run = run_config_from_json(read_json_file(a.config), base);
  // Flags override the config file.
  if (!a.mode.empty()) run.train.mode = train_mode_from_string(a.mode);
  if (a.folds_set) run.train.folds = a.folds;
  if (a.fold_set) run.train.fold = a.fold;
  if (a.seed_set) run.train.seed = a.seed;
  if (a.split_seed_set) run.train.split_seed = a.split_seed;
  if (a.iters >= 0) run.train.max_iterations = a.iters;
  if (!a.init.empty()) run.train.init_checkpoint = a.init;
  out << "train config: " << to_json(run).dump() << "\n";
  const TrainResult r = train_run(run, data, a.out);
  out << "iterations " << r.checkpoint.iteration;
  if (!r.log.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ", final loss %.6f", r.log.back().loss);
    out << buf;
  }
  out << "\ncheckpoint " << r.checkpoint_path << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, out;
  int fold = 0;
  bool fold_set = false;
  double threshold = 0.5;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(a.data);
  const EvalResult r = evaluate(ck, data, a.fold_set ? std::optional<int>(a.fold) : std::nullopt, a.threshold);
  out << "eval: checkpoint " << a.checkpoint << ", mode " << r.mode << ", fold " << r.fold << ", threshold "
      << r.threshold << ", " << r.frames.size() << " frames\n";
  const std::string table = metrics_table(r);
  out << table;
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / "metrics.json", metrics_json(r).dump(2) + "\n");
    write_text(fs::path(a.out) / "metrics.txt", table);
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tol, bool skip_model, std::ostream& out) {
  out << "gradcheck: seed " << seed << ", eps " << eps << ", tolerance " << tol << "\n";
  auto cases = run_op_gradchecks(seed, eps);
  if (!skip_model) cases.push_back(run_model_gradcheck(seed, eps));
  bool ok = true;
  for (const auto& c : cases) {
    const bool pass = c.result.passed(tol);
    ok = ok && pass;
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %12.3e  %-4s  branch crossings %ld\n", c.name.c_str(),
                  c.result.max_rel_error, pass ? "PASS" : "FAIL", static_cast<long>(c.result.branch_crossings));
    out << line;
    if (!pass && !c.result.message.empty()) out << "  " << c.result.message << "\n";
  }
  out << (ok ? "all checks passed\n" : "some checks failed\n");
  return ok ? kExitOk : kExitRuntime;
}

struct ReportArgs {
  std::string runs, out, data;
  std::vector<double> thresholds;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  std::string text;
  if (a.data.empty()) {
    const auto runs = collect_runs(a.runs);
    if (runs.empty()) throw std::runtime_error("no metrics.json found below " + a.runs);
    text = render_report(summarize_runs(runs));
  } else {
    // Threshold sweep: re-evaluate every checkpoint below the runs directory.
    std::vector<fs::path> ckpts;
    for (const auto& e : fs::recursive_directory_iterator(a.runs)) {
      if (e.is_regular_file() && e.path().filename() == "checkpoint.bin") ckpts.push_back(e.path());
    }
    std::sort(ckpts.begin(), ckpts.end());
    if (ckpts.empty()) throw std::runtime_error("no checkpoint.bin found below " + a.runs);
    const Dataset data = load_dataset(a.data);
    const std::vector<double> thresholds = a.thresholds.empty() ? std::vector<double>{0.5} : a.thresholds;
    std::vector<std::vector<RunMetrics>> per(thresholds.size());
    for (const auto& p : ckpts) {
      const Checkpoint ck = load_checkpoint(p.string());
      const TrainConfig t = run_config_of(ck).train;
      const auto frames = t.fold < 0 ? training_frames(data, t) : heldout_frames(data, t);
      const ProbMatrix probs = predict_frames(ck, data, frames);
      const LabelMatrix labels = data.labels(frames);
      for (std::size_t i = 0; i < thresholds.size(); ++i) {
        EvalResult r;
        r.mode = ck.mode;
        r.fold = t.fold;
        r.threshold = thresholds[i];
        r.aus = data.aus;
        r.frames = frames;
        r.f1 = f1_per_label(probs, labels, thresholds[i]);
        per[i].push_back(run_metrics_from_json(metrics_json(r)));
      }
    }
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      char head[64];
      std::snprintf(head, sizeof head, "threshold %.3g\n", thresholds[i]);
      text += head + render_report(summarize_runs(per[i])) + "\n";
    }
  }
  out << text;
  if (!a.out.empty()) write_text(a.out, text);
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Facial action unit detection: synthetic data, training, evaluation, gradient checks, reports"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic face-sequence dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Master seed");
  s->add_option("--subjects", synth.subjects, "Number of subjects")->check(CLI::PositiveNumber);
  s->add_option("--sessions", synth.sessions, "Sessions per subject")->check(CLI::PositiveNumber);
  s->add_option("--frames", synth.frames, "Frames per session")->check(CLI::PositiveNumber);
  s->add_option("--config", synth.config, "Generator config JSON");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one mode on one fold");
  t->add_option("--mode", train.mode, "Training mode")
      ->check(CLI::IsMember({"fvgg", "roi", "single_au", "roi_lstm1", "roi_lstm2", "roi_lstm3", "transfer"}));
  auto* fold_opt = t->add_option("--fold", train.fold, "Held-out fold (-1: train on every subject)");
  auto* folds_opt = t->add_option("--folds", train.folds, "Number of subject folds");
  t->add_option("--config", train.config, "Run config JSON");
  t->add_option("--data", train.data, "Dataset directory or manifest")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  auto* seed_opt = t->add_option("--seed", train.seed, "Training seed");
  auto* split_opt = t->add_option("--split-seed", train.split_seed, "Fold split seed");
  t->add_option("--iters", train.iters, "Override max_iterations");
  t->add_option("--init", train.init, "Initial/source checkpoint");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Per-AU F1 of a checkpoint on its held-out fold");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory or manifest")->required();
  auto* efold = e->add_option("--fold", ev.fold, "Fold to evaluate (default: the checkpoint's)");
  e->add_option("--threshold", ev.threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));
  e->add_option("--out", ev.out, "Directory for metrics.json / metrics.txt");

  std::uint64_t gc_seed = 7;
  double gc_eps = 1e-3, gc_tol = 1e-4;
  bool gc_skip_model = false;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference checks of every op and the ROI+LSTM model");
  g->add_option("--seed", gc_seed, "Seed");
  g->add_option("--eps", gc_eps, "Finite-difference step");
  g->add_option("--tolerance", gc_tol, "Relative error tolerance");
  g->add_flag("--ops-only", gc_skip_model, "Skip the whole-model check");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Fold-averaged ablation table");
  r->add_option("--runs", rep.runs, "Directory searched for metrics.json (or checkpoint.bin with --data)")->required();
  r->add_option("--out", rep.out, "Report file");
  r->add_option("--data", rep.data, "Re-evaluate checkpoints on this dataset");
  r->add_option("--thresholds", rep.thresholds, "Thresholds to sweep (with --data)")->delimiter(',');

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kExitUsage;
  }
  train.fold_set = fold_opt->count() > 0;
  train.folds_set = folds_opt->count() > 0;
  train.seed_set = seed_opt->count() > 0;
  train.split_seed_set = split_opt->count() > 0;
  ev.fold_set = efold->count() > 0;

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(train, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (g->parsed()) return cmd_gradcheck(gc_seed, gc_eps, gc_tol, gc_skip_model, out);
    if (r->parsed()) return cmd_report(rep, out);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace aunet
