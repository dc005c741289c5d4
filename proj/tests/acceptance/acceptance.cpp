// Acceptance run: one PASS/FAIL line per criterion. Arguments select a
// subset of criteria by number (default: all nine).

#include "aunet/cli.hpp"
#include "aunet/evaluation.hpp"
#include "aunet/gradcheck_suite.hpp"
#include "aunet/lstm.hpp"
#include "aunet/ops.hpp"
#include "aunet/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

using namespace aunet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

bool all_passed = true;

void report(int id, bool ok, const std::string& detail) {
  all_passed = all_passed && ok;
  std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

fs::path work_dir() {
  const fs::path p = fs::current_path() / "acceptance_work";
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  long cases = 0, failed = 0, crossings = 0;
  std::string first_failure;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& c : run_gradcheck_suite(seed, 1e-3)) {
      ++cases;
      worst = std::max(worst, c.result.max_rel_error);
      crossings += c.result.branch_crossings;
      if (!c.result.passed(1e-4)) {
        ++failed;
        if (first_failure.empty()) first_failure = c.name + " seed " + std::to_string(seed);
      }
    }
  }
  const double secs = seconds_since(t0);
  report(1, failed == 0 && secs < 120,
         std::to_string(cases) + " checks over 20 seeds, max rel error " + fmt("%.2e", worst) + ", " +
             std::to_string(crossings) + " branch crossings, " + fmt("%.1f s", secs) +
             (first_failure.empty() ? "" : ", first failure " + first_failure));
}

double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void lstm_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<Index> dim(1, 6);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index B = dim(rng), I = dim(rng), H = dim(rng);
    LstmLayerParams p = make_lstm_layer(I, H, 0.6, 1.0, rng);
    for (Tensor* b : {&p.bf, &p.bi, &p.bc, &p.bo})
      for (Index j = 0; j < H; ++j) b->mutable_value()[j] = u(rng);
    const Tensor x({B, I}, Tensor::Array::NullaryExpr(B * I, [&] { return u(rng); }));
    const Tensor h0({B, H}, Tensor::Array::NullaryExpr(B * H, [&] { return u(rng); }));
    const Tensor c0({B, H}, Tensor::Array::NullaryExpr(B * H, [&] { return 2 * u(rng); }));
    const LstmState s = cell_step(x, {h0, c0}, p);
    for (Index n = 0; n < B; ++n) {
      for (Index j = 0; j < H; ++j) {
        auto gate = [&](const Tensor& W, const Tensor& b) {
          double z = b[j];
          for (Index k = 0; k < H; ++k) z += W[j * (H + I) + k] * h0[n * H + k];
          for (Index k = 0; k < I; ++k) z += W[j * (H + I) + H + k] * x[n * I + k];
          return z;
        };
        const double c = sigm(gate(p.Wf, p.bf)) * c0[n * H + j] + sigm(gate(p.Wi, p.bi)) * std::tanh(gate(p.Wc, p.bc));
        const double h = sigm(gate(p.Wo, p.bo)) * std::tanh(c);
        worst = std::max({worst, std::abs(c - s.c[n * H + j]), std::abs(h - s.h[n * H + j])});
      }
    }
  }
  // Scalar case with every pre-activation equal to 1.
  LstmLayerParams q;
  q.input_len = 1;
  q.hidden_len = 1;
  for (Tensor* W : {&q.Wf, &q.Wi, &q.Wc, &q.Wo}) *W = Tensor::from({1, 2}, {0.0, 1.0});
  for (Tensor* b : {&q.bf, &q.bi, &q.bc, &q.bo}) *b = Tensor::zeros({1});
  const double h = cell_step(Tensor::from({1, 1}, {1.0}), zero_state(1, 1), q).h[0];
  const double direct = sigm(1) * std::tanh(sigm(1) * std::tanh(1.0));
  const bool ok = worst < 1e-12 && std::abs(h - direct) < 1e-15;
  report(2, ok,
         "100 instances, max abs error " + fmt("%.2e", worst) + "; scalar case h = " + fmt("%.5f", h) +
             " (direct " + fmt("%.5f", direct) + "; the quoted 0.36876 differs by " + fmt("%.1e", std::abs(h - 0.36876)) +
             ")");
}

void loss_law() {
  bool ok = true;
  std::string why;
  LabelMatrix l(2, 2);
  l << 1, 0, 0, 1;
  if (multilabel_loss(l.cast<double>().eval(), l) != 0.0) ok = false, why += " nonzero at p=l;";
  const ProbMatrix opposite = (1 - l.cast<double>().array()).matrix();
  if (std::abs(multilabel_loss(opposite, l) - 4 * std::log(21.0)) > 4e-12) ok = false, why += " extremes;";
  Tensor t({2, 2}, Eigen::Map<const Tensor::Array>(opposite.data(), 4), true);
  const Tensor lt = multilabel_loss(t, l);
  backward(lt);
  if (!std::isfinite(lt.item()) || !t.grad().isFinite().all()) ok = false, why += " non-finite at bounds;";

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<Index> dim(1, 16);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Index r = dim(rng), c = dim(rng);
    const ProbMatrix p = ProbMatrix::NullaryExpr(r, c, [&] { return u(rng); });
    const LabelMatrix y = LabelMatrix::NullaryExpr(r, c, [&] { return static_cast<std::uint8_t>(u(rng) < 0.4); });
    double direct = 0;
    for (Index a = 0; a < r; ++a)
      for (Index b = 0; b < c; ++b)
        direct -= y(a, b) ? std::log((p(a, b) + 0.05) / 1.05) : std::log((1.05 - p(a, b)) / 1.05);
    worst = std::max(worst, std::abs(multilabel_loss(p, y) - direct));
  }
  ok = ok && worst < 1e-12;
  report(3, ok, "1000 matrices, max abs error " + fmt("%.2e", worst) + why);
}

void metric_oracle() {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<Index> dim(1, 30);
  long mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const Index r = dim(rng), c = dim(rng) % 12 + 1;
    // Coarse values so that ties with the threshold occur.
    const ProbMatrix p = ProbMatrix::NullaryExpr(r, c, [&] { return std::round(u(rng) * 10) / 10; });
    const LabelMatrix y = LabelMatrix::NullaryExpr(r, c, [&] { return static_cast<std::uint8_t>(u(rng) < 0.3); });
    const F1Scores s = f1_per_label(p, y);
    double avg = 0;
    for (Index a = 0; a < c; ++a) {
      long tp = 0, fp = 0, fn = 0;
      for (Index n = 0; n < r; ++n) {
        const bool pred = p(n, a) >= 0.5, truth = y(n, a) == 1;
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
      const double f1 = tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
      avg += f1;
      const auto k = static_cast<std::size_t>(a);
      if (s.counts.tp[k] != tp || s.counts.fp[k] != fp || s.counts.fn[k] != fn || s.per_au[k] != f1) ++mismatches;
    }
    if (std::abs(s.average - avg / static_cast<double>(c)) > 1e-15) ++mismatches;
  }
  std::vector<int> ids(41);
  for (int i = 0; i < 41; ++i) ids[static_cast<std::size_t>(i)] = 1000 + 7 * i;
  const FoldAssignment f = subject_kfold_split(ids, 3, 4);
  std::multiset<std::size_t> sizes;
  std::set<int> seen;
  bool disjoint = true;
  for (int k = 0; k < 3; ++k) {
    const auto in = f.subjects_in(k);
    sizes.insert(in.size());
    for (int s : in) disjoint = seen.insert(s).second && disjoint;
  }
  const bool folds_ok = disjoint && seen.size() == 41 && sizes == std::multiset<std::size_t>{13, 14, 14};
  report(4, mismatches == 0 && folds_ok,
         "1000 instances, " + std::to_string(mismatches) + " mismatches; 41 subjects -> folds of " +
             std::to_string(*sizes.rbegin()) + "/" + std::to_string(*std::next(sizes.begin())) + "/" +
             std::to_string(*sizes.begin()) + (folds_ok ? ", disjoint and exhaustive" : ", bad split"));
}

void geometry() {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> pos(0, 223), angle(0, 2 * M_PI), radius(0, 10);
  long violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const Point p{pos(rng), pos(rng)};
    const double a = angle(rng), r = radius(rng);
    const Point q = clamp_to_image({p.x + r * std::cos(a), p.y + r * std::sin(a)}, {224, 224});
    const GridCell g = map_to_feature_grid(p, {224, 224}, {14, 14});
    const GridCell h = map_to_feature_grid(q, {224, 224}, {14, 14});
    violations += std::abs(g.row - h.row) > 1 || std::abs(g.col - h.col) > 1;
  }
  report(5, violations == 0, "10000 points, " + std::to_string(violations) + " violations");
}

void locality() {
  ModelConfig c;
  c.init_scheme = "he";
  c.relu_bias = 0.1;
  const Network net = make_network(c, Architecture::roi, 3);
  const auto sd = generate_synthetic(SynthConfig{.subjects = 1, .sessions = 1, .frames = 2}, 3);
  const RegionWindows win = frame_windows(c, net.rules, sd.data.frames[0].landmarks);
  const std::vector<std::size_t> idx{0};
  const Tensor fmap = backbone_forward(c, net.params, image_batch(sd.data, idx, c)).detach();
  const std::vector<RegionWindows> w{win};
  const GridSize grid = c.grid();
  const Index C = fmap.dim(1);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  long feature_diffs = 0, gradient_diffs = 0;
  for (int k = 0; k < kNumRegions; ++k) {
    const GridWindow g = win[static_cast<std::size_t>(k)];
    Tensor::Array other = fmap.value();
    for (Index ch = 0; ch < C; ++ch)
      for (Index r = 0; r < grid.height; ++r)
        for (Index col = 0; col < grid.width; ++col)
          if (!g.contains(r, col)) other[(ch * grid.height + r) * grid.width + col] += n(rng);
    const Tensor moved(fmap.shape(), other);

    auto run = [&](const Tensor& m) {
      Network local = net;
      for (auto& [name, p] : local.params) p = Tensor(p.shape(), p.value(), true);
      const auto feats = roi_forward(c, local.params, m, w);
      backward(sum(feats[static_cast<std::size_t>(k)]));
      std::vector<Tensor::Array> grads;
      const std::string prefix = "roi" + std::to_string(k + 1) + ".";
      for (const auto& [name, p] : local.params)
        if (name.rfind(prefix, 0) == 0) grads.push_back(p.grad());
      return std::pair{feats[static_cast<std::size_t>(k)].value(), grads};
    };
    const auto [fa, ga] = run(fmap);
    const auto [fb, gb] = run(moved);
    feature_diffs += !(fa == fb).all();
    for (std::size_t i = 0; i < ga.size(); ++i) gradient_diffs += !(ga[i] == gb[i]).all();
  }
  report(6, feature_diffs == 0 && gradient_diffs == 0,
         "20 regions on the desk feature map, " + std::to_string(feature_diffs) + " feature and " +
             std::to_string(gradient_diffs) + " gradient differences");
}

void ablation() {
  const auto t0 = Clock::now();
  const Dataset data = generate_synthetic(SynthConfig{}, 1).data;
  const RunConfig desk = load_run_config(AUNET_SOURCE_DIR "/configs/desk.json");
  const fs::path root = work_dir() / "ablation";
  fs::remove_all(root);
  const std::vector<std::string> modes{"fvgg", "roi", "roi_lstm1", "roi_lstm3"};
  std::map<std::string, double> avg;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (int fold = 0; fold < 3; ++fold) {
      const fs::path dir = root / ("s" + std::to_string(seed)) / ("f" + std::to_string(fold));
      std::string line = "  seed " + std::to_string(seed) + " fold " + std::to_string(fold);
      for (const auto& m : modes) {
        RunConfig r = desk;
        r.train.mode = train_mode_from_string(m);
        r.train.seed = seed;
        r.train.fold = fold;
        if (is_temporal(r.train.mode)) r.train.init_checkpoint = (dir / "roi" / "checkpoint.bin").string();
        const TrainResult t = train_run(r, data, (dir / m).string());
        const double f1 = 100.0 * evaluate(t.checkpoint, data).f1.average;
        avg[m] += f1 / 9.0;
        line += "  " + m + " " + fmt("%.1f", f1);
      }
      std::printf("%s\n", line.c_str());
      std::fflush(stdout);
    }
  }
  const double secs = seconds_since(t0);
  const bool a = avg["roi"] >= avg["fvgg"] + 5;
  const bool b = avg["roi_lstm1"] >= avg["roi"];
  const bool c = avg["roi_lstm3"] <= avg["roi_lstm1"] + 1;
  report(7, a && b && c && secs < 1800,
         "mean F1 over 3 seeds x 3 folds: FVGG " + fmt("%.1f", avg["fvgg"]) + ", ROI " + fmt("%.1f", avg["roi"]) +
             ", R-T1 " + fmt("%.1f", avg["roi_lstm1"]) + ", R-T3 " + fmt("%.1f", avg["roi_lstm3"]) + "; (a) " +
             (a ? "ok" : "no") + " (b) " + (b ? "ok" : "no") + " (c) " + (c ? "ok" : "no") + ", " +
             fmt("%.0f s", secs));
}

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  if (code != 0) std::printf("  command failed (%d): %s\n", code, err.str().c_str());
  return code;
}

void determinism() {
  const fs::path root = work_dir() / "determinism";
  fs::remove_all(root);
  const std::string cfg = AUNET_SOURCE_DIR "/configs/desk.json";
  long differing = 0, compared = 0;
  bool ran = true;
  // Both runs use the same paths, since paths are recorded in configs.
  const fs::path d = root / "run";
  for (const char* tag : {"a", "b"}) {
    ran = ran && cli({"synth", "--out", (d / "data").string(), "--subjects", "3", "--sessions", "1", "--frames", "30", "--seed", "5"}) == 0;
    ran = ran && cli({"train", "--mode", "roi", "--config", cfg, "--data", (d / "data").string(), "--out",
                      (d / "roi").string(), "--iters", "40", "--seed", "3"}) == 0;
    ran = ran && cli({"train", "--mode", "roi_lstm1", "--config", cfg, "--data", (d / "data").string(), "--out",
                      (d / "rt1").string(), "--iters", "20", "--seed", "3", "--init", (d / "roi/checkpoint.bin").string()}) == 0;
    for (const char* run : {"roi", "rt1"}) {
      ran = ran && cli({"eval", "--checkpoint", (d / run / "checkpoint.bin").string(), "--data", (d / "data").string(),
                        "--out", (d / run).string()}) == 0;
    }
    if (ran) fs::rename(d, root / tag);
  }
  if (ran) {
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
      if (!e.is_regular_file() || e.path().filename() == "timing.txt") continue;
      ++compared;
      const fs::path other = root / "b" / fs::relative(e.path(), root / "a");
      differing += !fs::exists(other) || slurp(e.path()) != slurp(other);
    }
  }
  report(8, ran && differing == 0 && compared > 0,
         std::to_string(compared) + " files compared (data, checkpoints, loss logs, metric tables), " +
             std::to_string(differing) + " differ");
}

void overfit() {
  const Dataset data = generate_synthetic(SynthConfig{.subjects = 1, .sessions = 1, .frames = 40}, 9).data;
  RunConfig r = load_run_config(AUNET_SOURCE_DIR "/configs/desk.json");
  Network net = make_network(r.model, Architecture::roi, 4);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 8; ++i) idx.push_back(i * 5);
  const Tensor images = image_batch(data, idx, r.model);
  std::vector<RegionWindows> wins;
  for (std::size_t f : idx) wins.push_back(frame_windows(r.model, net.rules, data.frames[f].landmarks));
  const LabelMatrix labels = data.labels(idx);
  const double entries = static_cast<double>(labels.size());
  VelocityState v = make_velocity(net.params, {});
  double loss = 1;
  int it = 0;
  while (it < 2000) {
    net.params.zero_grad();
    const Tensor l = multilabel_loss(static_probs(net, images, wins), labels);
    loss = l.item() / entries;
    if (loss < 0.01) break;
    backward(l);
    sgd_momentum_step(net.params, v, r.train.lr, r.train.momentum);
    ++it;
  }
  report(9, loss < 0.01, "batch of 8 frames, desk config and lr, mean loss " + fmt("%.4f", loss) + " after " + std::to_string(it) + " iterations");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](int k) { return only.empty() || only.count(k) > 0; };
  const std::vector<void (*)()> criteria{gradients, lstm_oracle, loss_law, metric_oracle, geometry,
                                         locality,  ablation,    determinism, overfit};
  for (int k = 1; k <= 9; ++k) {
    if (!want(k)) continue;
    try {
      criteria[static_cast<std::size_t>(k - 1)]();
    } catch (const std::exception& e) {
      report(k, false, std::string("exception: ") + e.what());
    }
  }
  return all_passed ? 0 : 1;
}
