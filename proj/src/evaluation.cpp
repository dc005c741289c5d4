#include "aunet/evaluation.hpp"

#include "aunet/ops.hpp"
#include "aunet/training.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

namespace aunet {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kEvalBatch = 64;

bool is_temporal_network(const Network& net) {
  return net.params.contains("lstm.layer0.Wf");
}

std::string head_prefix(const Network& net) {
  if (net.arch == Architecture::transfer) return "transfer_head.";
  return is_temporal_network(net) ? "lstm_head." : "head.";
}

ProbMatrix predict_static(const Network& net, const Dataset& data, const std::vector<std::size_t>& frames,
                          const std::vector<RegionWindows>& windows) {
  NoGradGuard guard;
  ProbMatrix out(static_cast<Index>(frames.size()), net.config.num_aus());
  for (std::size_t start = 0; start < frames.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, frames.size() - start);
    std::span<const std::size_t> chunk(frames.data() + start, n);
    std::vector<RegionWindows> wins;
    for (std::size_t f : chunk) wins.push_back(windows[f]);
    const Tensor images = image_batch(data, chunk, net.config);
    Tensor probs;
    if (net.arch == Architecture::transfer) {
      probs = predict_probs(net.params, global_feature(net, images, wins), head_prefix(net));
    } else {
      probs = static_probs(net, images, wins);
    }
    out.middleRows(static_cast<Index>(start), static_cast<Index>(n)) =
        probs.as_matrix(static_cast<Index>(n), probs.dim(1));
  }
  return out;
}

ProbMatrix predict_temporal(const Network& net, const Dataset& data, const std::vector<std::size_t>& frames,
                            const std::vector<RegionWindows>& windows, const std::string& scheme) {
  NoGradGuard guard;
  const auto T = static_cast<std::size_t>(net.config.lstm.sequence_len);
  std::set<std::size_t> sessions;
  for (std::size_t f : frames) sessions.insert(data.frames.at(f).session_index);
  std::vector<EvalWindow> all;
  std::vector<std::size_t> needed;
  for (std::size_t si : sessions) {
    auto w = scheme == "chunked" ? evaluation_windows(data, si, T) : anchored_windows(data, si, T);
    all.insert(all.end(), w.begin(), w.end());
    const auto& fr = data.sessions[si].frames;
    needed.insert(needed.end(), fr.begin(), fr.end());
  }
  const FeatureTable table = feature_table(net, data, needed, windows, kEvalBatch);
  const auto layers = lstm_layers(net.params, net.config, table.rows.cols());
  const std::string head = head_prefix(net);

  std::map<std::size_t, Eigen::RowVectorXd> scored;
  for (std::size_t start = 0; start < all.size(); start += kEvalBatch) {
    const std::size_t B = std::min(kEvalBatch, all.size() - start);
    std::vector<Tensor> steps;
    for (std::size_t k = 0; k < T; ++k) {
      std::vector<std::size_t> step(B);
      for (std::size_t b = 0; b < B; ++b) step[b] = all[start + b].frames[k];
      steps.push_back(table.gather(step));
    }
    const auto outs = run_stack(steps, layers);
    for (std::size_t k = 0; k < T; ++k) {
      bool any = false;
      for (std::size_t b = 0; b < B; ++b) any = any || all[start + b].scored[k];
      if (!any) continue;
      const Tensor p = predict_probs(net.params, outs[k], head);
      const auto m = p.as_matrix(p.dim(0), p.dim(1));
      for (std::size_t b = 0; b < B; ++b) {
        const auto& w = all[start + b];
        if (w.scored[k]) scored[w.frames[k]] = m.row(static_cast<Index>(b));
      }
    }
  }
  ProbMatrix out(static_cast<Index>(frames.size()), net.config.num_aus());
  for (std::size_t i = 0; i < frames.size(); ++i) out.row(static_cast<Index>(i)) = scored.at(frames[i]);
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

ProbMatrix predict_frames(const Checkpoint& ckpt, const Dataset& data, const std::vector<std::size_t>& frames) {
  const Network net = network_from_checkpoint(ckpt);
  if (net.config.image.height != data.image.height || net.config.image.width != data.image.width) {
    throw std::invalid_argument("checkpoint image size does not match the dataset");
  }
  if (net.config.aus != data.aus) throw std::invalid_argument("checkpoint AU list does not match the dataset");
  const auto windows = dataset_windows(net, data);
  if (frames.empty()) return ProbMatrix(0, net.config.num_aus());
  return is_temporal_network(net) ? predict_temporal(net, data, frames, windows, run_config_of(ckpt).train.temporal_eval)
                                  : predict_static(net, data, frames, windows);
}

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data, std::optional<int> fold, double threshold) {
  TrainConfig t = run_config_of(ckpt).train;
  if (fold) t.fold = *fold;
  if (t.fold < -1 || t.fold >= t.folds) throw std::invalid_argument("fold out of range for " + std::to_string(t.folds) + " folds");
  EvalResult r;
  r.mode = ckpt.mode;
  r.fold = t.fold;
  r.threshold = threshold;
  r.aus = data.aus;
  r.frames = t.fold < 0 ? training_frames(data, t) : heldout_frames(data, t);
  if (r.frames.empty()) throw std::invalid_argument("fold " + std::to_string(t.fold) + " has no frames");
  r.probs = predict_frames(ckpt, data, r.frames);
  r.labels = data.labels(r.frames);
  r.f1 = f1_per_label(r.probs, r.labels, threshold);
  return r;
}

nlohmann::json metrics_json(const EvalResult& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t j = 0; j < r.aus.size(); ++j) {
    per.push_back({{"au", r.aus[j]},
                   {"f1", 100.0 * r.f1.per_au[j]},
                   {"tp", r.f1.counts.tp[j]},
                   {"fp", r.f1.counts.fp[j]},
                   {"fn", r.f1.counts.fn[j]},
                   {"tn", r.f1.counts.tn[j]}});
  }
  return {{"mode", r.mode},
          {"fold", r.fold},
          {"threshold", r.threshold},
          {"frames", r.frames.size()},
          {"per_au", per},
          {"average", 100.0 * r.f1.average}};
}

std::string metrics_table(const EvalResult& r) {
  std::string out = "AU      F1 (" + r.mode + ", fold " + std::to_string(r.fold) + ")\n";
  for (std::size_t j = 0; j < r.aus.size(); ++j) {
    char line[64];
    std::snprintf(line, sizeof line, "%-6d  %6.1f\n", r.aus[j], 100.0 * r.f1.per_au[j]);
    out += line;
  }
  out += "Avg     " + fmt("%6.1f", 100.0 * r.f1.average) + "\n";
  return out;
}

RunMetrics run_metrics_from_json(const nlohmann::json& j) {
  RunMetrics m;
  m.mode = j.at("mode").get<std::string>();
  m.fold = j.at("fold").get<int>();
  for (const auto& e : j.at("per_au")) {
    m.aus.push_back(e.at("au").get<int>());
    m.f1.push_back(e.at("f1").get<double>());
  }
  m.average = j.at("average").get<double>();
  return m;
}

std::vector<ModeSummary> summarize_runs(const std::vector<RunMetrics>& runs) {
  static const std::vector<std::string> order{"fvgg", "roi", "single_au", "roi_lstm1", "roi_lstm2", "roi_lstm3",
                                              "transfer"};
  std::map<std::string, ModeSummary> by_mode;
  for (const auto& r : runs) {
    auto [it, fresh] = by_mode.try_emplace(r.mode);
    ModeSummary& s = it->second;
    if (fresh) {
      s.mode = r.mode;
      s.aus = r.aus;
      s.f1.assign(r.aus.size(), 0.0);
    } else if (s.aus != r.aus) {
      throw std::invalid_argument("runs of mode " + r.mode + " disagree on the AU list");
    }
    for (std::size_t j = 0; j < r.f1.size(); ++j) s.f1[j] += r.f1[j];
    s.average += r.average;
    ++s.runs;
  }
  std::vector<ModeSummary> out;
  auto finish = [&](ModeSummary s) {
    for (double& v : s.f1) v /= s.runs;
    s.average /= s.runs;
    out.push_back(std::move(s));
  };
  for (const auto& m : order) {
    auto it = by_mode.find(m);
    if (it != by_mode.end()) {
      finish(it->second);
      by_mode.erase(it);
    }
  }
  for (auto& [_, s] : by_mode) finish(s);
  return out;
}

const std::vector<LiteratureColumn>& literature_reference() {
  static const std::vector<int> bp4d{1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24};
  static const std::vector<int> disfa{1, 2, 4, 6, 9, 12, 25, 26};
  static const std::vector<LiteratureColumn> cols{
      {"BP4D", "LSVM", bp4d, {23.2, 22.8, 23.1, 27.2, 47.1, 77.2, 63.7, 64.3, 18.4, 33.0, 19.4, 20.7}, 35.3},
      {"BP4D", "JPML", bp4d, {32.6, 25.6, 37.4, 42.3, 50.5, 72.2, 74.1, 65.7, 38.1, 40.0, 30.4, 42.3}, 45.9},
      {"BP4D", "DRML", bp4d, {36.4, 41.8, 43.0, 55.0, 67.0, 66.3, 65.8, 54.1, 36.7, 48.0, 31.7, 30.0}, 48.3},
      {"BP4D", "CPM", bp4d, {43.4, 40.7, 43.4, 59.2, 61.3, 62.1, 68.5, 52.5, 34.0, 54.3, 39.5, 37.8}, 50.0},
      {"BP4D", "CNN+LSTM", bp4d, {31.4, 31.1, 71.4, 63.3, 77.1, 45.0, 82.6, 72.9, 33.2, 53.9, 38.6, 37.0}, 53.2},
      {"BP4D", "FVGG", bp4d, {27.8, 27.6, 18.3, 69.7, 69.1, 78.1, 63.2, 36.4, 26.1, 50.7, 22.8, 35.9}, 43.8},
      {"BP4D", "ROI", bp4d, {36.2, 31.6, 43.4, 77.1, 73.7, 85.0, 87.0, 62.6, 45.7, 58.0, 38.3, 37.4}, 56.4},
      {"BP4D", "R-T1", bp4d, {47.1, 56.2, 52.4, 78.5, 80.8, 87.8, 89.4, 74.8, 58.5, 68.4, 40.4, 59.4}, 66.1},
      {"BP4D", "R-T2", bp4d, {45.8, 48.0, 45.9, 76.7, 79.6, 85.3, 87.2, 71.6, 48.0, 59.5, 37.5, 51.1}, 61.4},
      {"DISFA", "LSVM", disfa, {10.8, 10.0, 21.8, 15.7, 11.5, 70.4, 12.0, 22.1}, 21.8},
      {"DISFA", "APL", disfa, {11.4, 12.0, 30.1, 12.4, 10.1, 65.9, 21.4, 26.9}, 23.8},
      {"DISFA", "DRML", disfa, {17.3, 17.7, 37.4, 29.0, 10.7, 37.7, 38.5, 20.1}, 26.7},
      {"DISFA", "FVGG", disfa, {32.5, 24.3, 61.0, 34.2, 1.67, 72.1, 87.3, 7.1}, 40.2},
      {"DISFA", "ROI", disfa, {41.5, 26.4, 66.4, 50.7, 8.5, 89.3, 88.9, 15.6}, 48.5},
      {"DISFA", "R-T1", disfa, {42.6, 27.2, 65.5, 55.5, 22.8, 82.9, 88.3, 25.9}, 51.3},
  };
  return cols;
}

std::string render_report(const std::vector<ModeSummary>& summaries) {
  std::vector<int> aus;
  for (const auto& s : summaries) {
    for (int a : s.aus) {
      if (std::find(aus.begin(), aus.end(), a) == aus.end()) aus.push_back(a);
    }
  }
  // Reference columns: the published R-T1 results of both datasets.
  std::vector<const LiteratureColumn*> refs;
  for (const auto& c : literature_reference()) {
    if (c.method == "R-T1") refs.push_back(&c);
  }

  std::string out = "Fold-averaged F1 (%) on the evaluation data; reference columns are published numbers\n";
  out += "AU   ";
  auto right = [](const std::string& name) {
    return " " + std::string(static_cast<std::size_t>(std::max<int>(0, 10 - static_cast<int>(name.size()))), ' ') + name;
  };
  for (const auto& s : summaries) out += right(s.mode);
  for (const auto* r : refs) out += right(r->dataset + " " + r->method);
  out += "\n";
  auto cell = [](std::optional<double> v) { return v ? fmt(" %10.1f", *v) : std::string("          -"); };
  for (int a : aus) {
    out += fmt("%-5.0f", static_cast<double>(a));
    for (const auto& s : summaries) {
      const auto it = std::find(s.aus.begin(), s.aus.end(), a);
      out += cell(it == s.aus.end() ? std::nullopt : std::optional<double>(s.f1[static_cast<std::size_t>(it - s.aus.begin())]));
    }
    for (const auto* r : refs) {
      const auto it = std::find(r->aus.begin(), r->aus.end(), a);
      out += cell(it == r->aus.end() ? std::nullopt : std::optional<double>(r->f1[static_cast<std::size_t>(it - r->aus.begin())]));
    }
    out += "\n";
  }
  out += "Avg  ";
  for (const auto& s : summaries) out += cell(s.average);
  for (const auto* r : refs) out += cell(r->average);
  out += "\nRuns ";
  for (const auto& s : summaries) out += fmt(" %10.0f", static_cast<double>(s.runs));
  out += "\n\nPublished averages:";
  for (const auto& c : literature_reference()) out += "\n  " + c.dataset + " " + c.method + fmt(" %.1f", c.average);
  out += "\n";
  return out;
}

std::vector<RunMetrics> collect_runs(const std::string& runs_dir) {
  if (!fs::is_directory(runs_dir)) throw std::runtime_error("runs directory " + runs_dir + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(runs_dir)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunMetrics> runs;
  for (const auto& p : files) {
    std::ifstream in(p);
    nlohmann::json j;
    try {
      in >> j;
      runs.push_back(run_metrics_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(p.string() + ": " + e.what());
    }
  }
  return runs;
}

}  // namespace aunet
