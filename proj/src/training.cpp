#include "aunet/training.hpp"

#include "aunet/ops.hpp"
#include "aunet/tensor_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace aunet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Modes and configuration

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::fvgg: return "fvgg";
    case TrainMode::roi: return "roi";
    case TrainMode::single_au: return "single_au";
    case TrainMode::roi_lstm1: return "roi_lstm1";
    case TrainMode::roi_lstm2: return "roi_lstm2";
    case TrainMode::roi_lstm3: return "roi_lstm3";
    case TrainMode::transfer: return "transfer";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  for (TrainMode m : {TrainMode::fvgg, TrainMode::roi, TrainMode::single_au, TrainMode::roi_lstm1,
                      TrainMode::roi_lstm2, TrainMode::roi_lstm3, TrainMode::transfer}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown mode '" + s +
                              "' (expected fvgg, roi, single_au, roi_lstm1, roi_lstm2, roi_lstm3, transfer)");
}

bool is_temporal(TrainMode m) { return lstm_depth(m) > 0; }

int lstm_depth(TrainMode m) {
  switch (m) {
    case TrainMode::roi_lstm1: return 1;
    case TrainMode::roi_lstm2: return 2;
    case TrainMode::roi_lstm3: return 3;
    default: return 0;
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(lr > 0) || !std::isfinite(lr)) fail("lr must be positive");
  if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0,1)");
  if (batch_size < 1) fail("batch_size must be positive");
  if (max_iterations < 0) fail("max_iterations must be non-negative");
  if (freeze_stages < 0) fail("freeze_stages must be non-negative");
  if (lr_patience < 1) fail("lr_patience must be positive");
  if (!(lr_factor > 0) || lr_factor > 1) fail("lr_factor must lie in (0,1]");
  if (lr_min_improvement < 0) fail("lr_min_improvement must be non-negative");
  if (folds < 1) fail("folds must be positive");
  if (fold < -1 || fold >= folds) fail("fold must be -1 or in [0, folds)");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  if (temporal_backbone != "frozen" && temporal_backbone != "joint") {
    fail("temporal_backbone must be 'frozen' or 'joint'");
  }
  if (temporal_loss != "per_timestep" && temporal_loss != "anchor") {
    fail("temporal_loss must be 'per_timestep' or 'anchor'");
  }
  if (temporal_iterations < 0) fail("temporal_iterations must be non-negative");
  if (temporal_eval != "anchored" && temporal_eval != "chunked") fail("temporal_eval must be 'anchored' or 'chunked'");
  if (!(head_lr >= 0) || !std::isfinite(head_lr)) fail("head_lr must be non-negative");
  if (mode == TrainMode::transfer && init_checkpoint.empty()) fail("transfer needs init_checkpoint");
}

namespace {

const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys{
      "mode",      "lr",         "momentum",       "batch_size",        "max_iterations",    "freeze_stages",
      "seed",      "lr_patience", "lr_factor",     "lr_min_improvement", "folds",            "fold",
      "split_seed", "checkpoint_every", "temporal_backbone", "temporal_loss", "init_checkpoint", "transfer_temporal",
      "temporal_iterations", "head_lr", "temporal_eval", "rules"};
  return keys;
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = to_json(c.model);
  const TrainConfig& t = c.train;
  j["mode"] = to_string(t.mode);
  j["lr"] = t.lr;
  j["momentum"] = t.momentum;
  j["batch_size"] = t.batch_size;
  j["max_iterations"] = t.max_iterations;
  j["freeze_stages"] = t.freeze_stages;
  j["seed"] = t.seed;
  j["lr_patience"] = t.lr_patience;
  j["lr_factor"] = t.lr_factor;
  j["lr_min_improvement"] = t.lr_min_improvement;
  j["folds"] = t.folds;
  j["fold"] = t.fold;
  j["split_seed"] = t.split_seed;
  j["checkpoint_every"] = t.checkpoint_every;
  j["temporal_backbone"] = t.temporal_backbone;
  j["temporal_loss"] = t.temporal_loss;
  j["init_checkpoint"] = t.init_checkpoint;
  j["transfer_temporal"] = t.transfer_temporal;
  j["temporal_iterations"] = t.temporal_iterations;
  j["head_lr"] = t.head_lr;
  j["temporal_eval"] = t.temporal_eval;
  j["rules"] = c.rules_path;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base) {
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  nlohmann::json model = to_json(base.model);
  const auto& tk = train_keys();
  for (const auto& [key, value] : j.items()) {
    if (std::find(tk.begin(), tk.end(), key) != tk.end()) continue;
    if (!model.contains(key)) throw std::invalid_argument("unknown config key '" + key + "'");
    model[key] = value;
  }
  RunConfig c = base;
  c.model = model_config_from_json(model);
  TrainConfig& t = c.train;
  if (j.contains("mode")) t.mode = train_mode_from_string(j.at("mode").get<std::string>());
  t.lr = j.value("lr", t.lr);
  t.momentum = j.value("momentum", t.momentum);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_iterations = j.value("max_iterations", t.max_iterations);
  t.freeze_stages = j.value("freeze_stages", t.freeze_stages);
  t.seed = j.value("seed", t.seed);
  t.lr_patience = j.value("lr_patience", t.lr_patience);
  t.lr_factor = j.value("lr_factor", t.lr_factor);
  t.lr_min_improvement = j.value("lr_min_improvement", t.lr_min_improvement);
  t.folds = j.value("folds", t.folds);
  t.fold = j.value("fold", t.fold);
  t.split_seed = j.value("split_seed", t.split_seed);
  t.checkpoint_every = j.value("checkpoint_every", t.checkpoint_every);
  t.temporal_backbone = j.value("temporal_backbone", t.temporal_backbone);
  t.temporal_loss = j.value("temporal_loss", t.temporal_loss);
  t.init_checkpoint = j.value("init_checkpoint", t.init_checkpoint);
  t.transfer_temporal = j.value("transfer_temporal", t.transfer_temporal);
  t.temporal_iterations = j.value("temporal_iterations", t.temporal_iterations);
  t.head_lr = j.value("head_lr", t.head_lr);
  t.temporal_eval = j.value("temporal_eval", t.temporal_eval);
  c.rules_path = j.value("rules", c.rules_path);
  return c;
}

RunConfig load_run_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

VelocityState make_velocity(const ParamSet& params, const std::set<std::string>& frozen) {
  VelocityState v;
  for (const auto& [name, t] : params) {
    if (!frozen.count(name)) v.buffers.emplace(name, Eigen::ArrayXd::Zero(t.size()));
  }
  return v;
}

void sgd_momentum_step(ParamSet& params, VelocityState& velocity, double lr, double momentum) {
  for (auto& [name, buf] : velocity.buffers) {
    const Tensor& p = params.at(name);
    if (buf.size() != p.size()) throw ShapeError("velocity buffer for " + name + " has the wrong size");
    if (p.has_grad() && !p.node().grad.allFinite()) {
      throw NonFiniteError("non-finite gradient in parameter " + name);
    }
  }
  for (auto& [name, buf] : velocity.buffers) {
    Tensor& p = params.at(name);
    if (p.has_grad()) buf = momentum * buf - lr * p.node().grad;
    else buf *= momentum;
    p.mutable_value() += buf;
  }
}

PlateauSchedule::PlateauSchedule(double lr, int window, double factor, double min_improvement)
    : lr_(lr), window_(window), factor_(factor), min_improvement_(min_improvement) {
  if (window < 1) throw std::invalid_argument("schedule window must be positive");
}

void PlateauSchedule::observe(double loss) {
  sum_ += loss;
  if (++count_ < window_) return;
  const double mean = sum_ / count_;
  if (has_previous_ && (previous_ - mean) < min_improvement_ * previous_) {
    lr_ *= factor_;
    ++decays_;
  }
  previous_ = mean;
  has_previous_ = true;
  sum_ = 0;
  count_ = 0;
}

// ---------------------------------------------------------------------------
// Sequences

SequenceSample assemble_sequence(const Dataset& data, std::size_t anchor, std::mt19937_64& rng,
                                 std::size_t sequence_len) {
  if (anchor >= data.frames.size()) throw std::out_of_range("assemble_sequence: anchor out of range");
  if (sequence_len < 1) throw std::invalid_argument("assemble_sequence: sequence length must be positive");
  const FrameRecord& a = data.frames[anchor];
  const auto& session = data.sessions.at(a.session_index).frames;
  const std::size_t priors_available = a.position;
  const std::size_t wanted = sequence_len - 1;
  if (priors_available == 0 && wanted > 0) {
    throw std::invalid_argument("assemble_sequence: frame " + std::to_string(a.frame) +
                                " is the first of its session and has no prior frames");
  }
  std::vector<std::size_t> positions(priors_available);
  for (std::size_t i = 0; i < priors_available; ++i) positions[i] = i;
  if (priors_available > wanted) {
    // Partial Fisher-Yates: the first `wanted` entries become a uniform sample.
    for (std::size_t i = 0; i < wanted; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, priors_available - 1);
      std::swap(positions[i], positions[pick(rng)]);
    }
    positions.resize(wanted);
    std::sort(positions.begin(), positions.end());
  }
  SequenceSample s;
  s.subject = a.subject;
  s.frames.reserve(sequence_len);
  if (wanted > 0) {
    const std::size_t pad = wanted - positions.size();
    for (std::size_t i = 0; i < pad; ++i) s.frames.push_back(session[positions.front()]);
    for (std::size_t p : positions) s.frames.push_back(session[p]);
  }
  s.frames.push_back(anchor);
  return s;
}

SequenceSample assemble_sequence(const Dataset& data, std::size_t anchor, std::uint64_t seed,
                                 std::size_t sequence_len) {
  std::mt19937_64 rng(seed);
  return assemble_sequence(data, anchor, rng, sequence_len);
}

std::vector<EvalWindow> anchored_windows(const Dataset& data, std::size_t session, std::size_t sequence_len) {
  const auto& frames = data.sessions.at(session).frames;
  std::vector<EvalWindow> out;
  if (sequence_len < 1) return out;
  const std::size_t k = sequence_len - 1;
  for (std::size_t p = 0; p < frames.size(); ++p) {
    EvalWindow w;
    if (p == 0) {
      w.frames.assign(sequence_len, frames[0]);
    } else if (p <= k) {
      w.frames.assign(k - p, frames[0]);
      w.frames.insert(w.frames.end(), frames.begin(), frames.begin() + static_cast<std::ptrdiff_t>(p));
      w.frames.push_back(frames[p]);
    } else {
      for (std::size_t j = 0; j < k; ++j) w.frames.push_back(frames[j * p / k]);
      w.frames.push_back(frames[p]);
    }
    w.scored.assign(sequence_len, false);
    w.scored.back() = true;
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<EvalWindow> evaluation_windows(const Dataset& data, std::size_t session, std::size_t sequence_len) {
  const auto& frames = data.sessions.at(session).frames;
  std::vector<EvalWindow> out;
  if (frames.empty() || sequence_len < 1) return out;
  if (frames.size() <= sequence_len) {
    // Short session: pad at the front with the first frame.
    EvalWindow w;
    const std::size_t pad = sequence_len - frames.size();
    w.frames.assign(pad, frames.front());
    w.scored.assign(pad, false);
    for (std::size_t f : frames) {
      w.frames.push_back(f);
      w.scored.push_back(true);
    }
    out.push_back(std::move(w));
    return out;
  }
  std::size_t start = 0;
  for (; start + sequence_len <= frames.size(); start += sequence_len) {
    EvalWindow w;
    w.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(start),
                    frames.begin() + static_cast<std::ptrdiff_t>(start + sequence_len));
    w.scored.assign(sequence_len, true);
    out.push_back(std::move(w));
  }
  if (start < frames.size()) {
    // Tail: the last full-length window, scoring only frames not yet covered.
    EvalWindow w;
    const std::size_t begin = frames.size() - sequence_len;
    w.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(begin), frames.end());
    w.scored.resize(sequence_len);
    for (std::size_t i = 0; i < sequence_len; ++i) w.scored[i] = begin + i >= start;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data plumbing

std::vector<std::size_t> training_frames(const Dataset& data, const TrainConfig& t) {
  if (t.fold < 0) {
    std::vector<std::size_t> all(data.frames.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  const auto split = subject_kfold_split(data.subject_ids(), t.folds, t.split_seed);
  return data.frames_of_subjects(split.subjects_outside(t.fold));
}

std::vector<std::size_t> heldout_frames(const Dataset& data, const TrainConfig& t) {
  if (t.fold < 0) return {};
  const auto split = subject_kfold_split(data.subject_ids(), t.folds, t.split_seed);
  return data.frames_of_subjects(split.subjects_in(t.fold));
}

Tensor image_batch(const Dataset& data, std::span<const std::size_t> frames, const ModelConfig& c) {
  const Index channels = c.in_channels;
  if (frames.empty()) throw std::invalid_argument("image_batch: no frames");
  const Index hw = data.image.height * data.image.width;
  Tensor::Array a(static_cast<Index>(frames.size()) * channels * hw);
  Index off = 0;
  for (std::size_t f : frames) {
    const auto& img = data.frames.at(f).image;
    if (img.size() != hw) throw ShapeError("image_batch: frame image has the wrong size");
    for (Index ch = 0; ch < channels; ++ch, off += hw) a.segment(off, hw) = (img - c.input_mean) * c.input_scale;
  }
  return Tensor({static_cast<Index>(frames.size()), channels, data.image.height, data.image.width}, std::move(a));
}

std::vector<RegionWindows> dataset_windows(const Network& net, const Dataset& data) {
  std::vector<RegionWindows> out;
  out.reserve(data.frames.size());
  for (const auto& f : data.frames) out.push_back(frame_windows(net.config, net.rules, f.landmarks));
  return out;
}

Tensor FeatureTable::gather(std::span<const std::size_t> frames) const {
  Tensor::Array a(static_cast<Index>(frames.size()) * rows.cols());
  Index off = 0;
  for (std::size_t f : frames) {
    const Index r = f < row_of.size() ? row_of[f] : -1;
    if (r < 0) throw std::out_of_range("feature table has no row for frame " + std::to_string(f));
    for (Index j = 0; j < rows.cols(); ++j) a[off++] = rows(r, j);
  }
  return Tensor({static_cast<Index>(frames.size()), rows.cols()}, std::move(a));
}

FeatureTable feature_table(const Network& net, const Dataset& data, std::span<const std::size_t> frames,
                           std::span<const RegionWindows> windows, std::size_t batch) {
  FeatureTable table;
  table.row_of.assign(data.frames.size(), -1);
  std::vector<std::size_t> unique;
  for (std::size_t f : frames) {
    if (table.row_of.at(f) < 0) {
      table.row_of[f] = static_cast<Index>(unique.size());
      unique.push_back(f);
    }
  }
  for (std::size_t start = 0; start < unique.size(); start += batch) {
    const std::size_t n = std::min(batch, unique.size() - start);
    std::span<const std::size_t> chunk(unique.data() + start, n);
    std::vector<RegionWindows> wins;
    for (std::size_t f : chunk) wins.push_back(windows[f]);
    const Tensor feats = extract_features(net, image_batch(data, chunk, net.config), wins);
    if (table.rows.size() == 0) table.rows.resize(static_cast<Index>(unique.size()), feats.dim(1));
    table.rows.middleRows(static_cast<Index>(start), static_cast<Index>(n)) =
        feats.as_matrix(static_cast<Index>(n), feats.dim(1));
  }
  return table;
}

std::string format_log(const std::vector<LogEntry>& log) {
  std::string out;
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d %.10g %.10g\n", e.iteration, e.loss, e.lr);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint <-> network

namespace {

std::string rules_text(const RuleTable& rules) {
  std::ostringstream os;
  write_rule_table(os, rules);
  return os.str();
}

RuleTable rules_from_text(const std::string& text) {
  std::istringstream is(text);
  return parse_rule_table(is);
}

Checkpoint make_checkpoint(const RunConfig& run, const Network& net, std::uint64_t iteration,
                           const std::string& source_arch = "") {
  Checkpoint ck;
  ck.mode = to_string(run.train.mode);
  ck.iteration = iteration;
  ck.config = {{"run", to_json(run)},
               {"arch", to_string(net.arch)},
               {"model", to_json(net.config)},
               {"rules", rules_text(net.rules)}};
  if (!source_arch.empty()) ck.config["source_arch"] = source_arch;
  for (const auto& [name, t] : net.params) ck.params.add(name, t.detach());
  return ck;
}

}  // namespace

RunConfig run_config_of(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("run")) throw FormatError("checkpoint has no run configuration");
  return run_config_from_json(ckpt.config.at("run"));
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  for (const char* key : {"arch", "model", "rules"}) {
    if (!ckpt.config.contains(key)) throw FormatError(std::string("checkpoint config lacks '") + key + "'");
  }
  Network net;
  net.arch = architecture_from_string(ckpt.config.at("arch").get<std::string>());
  net.config = model_config_from_json(ckpt.config.at("model"));
  net.rules = rules_from_text(ckpt.config.at("rules").get<std::string>());
  for (const auto& [name, t] : ckpt.params) {
    Tensor copy(t.shape(), t.value(), true);
    net.params.add(name, copy);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

using Clock = std::chrono::steady_clock;
using ParamValues = std::map<std::string, Eigen::ArrayXd>;

ParamValues snapshot(const ParamSet& params) {
  ParamValues v;
  for (const auto& [name, t] : params) v.emplace(name, t.value());
  return v;
}

void restore(ParamSet& params, const ParamValues& v) {
  for (auto& [name, t] : params) {
    auto it = v.find(name);
    if (it != v.end()) t.mutable_value() = it->second;
  }
}

bool all_finite(const ParamSet& params) {
  for (const auto& [name, t] : params) {
    if (!t.value().isFinite().all()) return false;
  }
  return true;
}

struct BatchLoss {
  Tensor loss;     // summed over every entry
  double entries;  // for the per-entry mean in the log
};

struct Session {
  const RunConfig& run;
  const Dataset& data;
  std::string out_dir;
  Network net;
  std::string source_arch;
  std::vector<LogEntry> log;
  int iteration = 0;
  ParamValues last_good;
  std::ofstream log_file;

  Session(const RunConfig& r, const Dataset& d, std::string out) : run(r), data(d), out_dir(std::move(out)) {
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      log_file.open(fs::path(out_dir) / "loss.log");
      if (!log_file) throw std::runtime_error("cannot write " + (fs::path(out_dir) / "loss.log").string());
    }
  }

  std::string checkpoint_path() const { return (fs::path(out_dir) / "checkpoint.bin").string(); }

  void save(const Network& n) {
    if (!out_dir.empty()) save_checkpoint(checkpoint_path(), make_checkpoint(run, n, static_cast<std::uint64_t>(iteration), source_arch));
  }

  // Plain SGD with momentum over `iterations` steps; parameters named in
  // `frozen` keep their values.
  void sgd_loop(const std::set<std::string>& frozen, int iterations, double lr,
                const std::function<BatchLoss()>& batch) {
    const TrainConfig& t = run.train;
    VelocityState velocity = make_velocity(net.params, frozen);
    PlateauSchedule schedule(lr, t.lr_patience, t.lr_factor, t.lr_min_improvement);
    for (int i = 0; i < iterations; ++i) {
      net.params.zero_grad();
      BatchLoss b = [&] {
        try {
          return batch();
        } catch (const std::invalid_argument& e) {
          // Overflowed activations surface as NaN probabilities in the loss;
          // a batch that worked on the first iteration only fails this way.
          if (iteration > 0 || !all_finite(net.params)) diverge(std::string(e.what()) + " at iteration " + std::to_string(iteration + 1));
          throw;
        }
      }();
      const double value = b.loss.item();
      if (!std::isfinite(value)) diverge("non-finite loss at iteration " + std::to_string(iteration + 1));
      last_good = snapshot(net.params);
      backward(b.loss);
      try {
        sgd_momentum_step(net.params, velocity, schedule.lr(), t.momentum);
      } catch (const NonFiniteError& e) {
        diverge(std::string(e.what()) + " at iteration " + std::to_string(iteration + 1));
      }
      ++iteration;
      const LogEntry entry{iteration, value / b.entries, schedule.lr()};
      log.push_back(entry);
      if (log_file) {
        log_file << format_log({entry});
        log_file.flush();
      }
      schedule.observe(entry.loss);
      if (t.checkpoint_every > 0 && iteration % t.checkpoint_every == 0) save(net);
    }
  }

  [[noreturn]] void diverge(const std::string& why) {
    if (!last_good.empty()) restore(net.params, last_good);
    save(net);
    throw DivergenceError("training diverged: " + why +
                          (out_dir.empty() ? "" : "; last good parameters saved to " + checkpoint_path()));
  }
};

std::vector<std::size_t> sample_with_replacement(std::span<const std::size_t> pool, std::size_t n,
                                                 std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = pool[pick(rng)];
  return out;
}

std::set<std::string> names_without_prefixes(const ParamSet& params, const std::vector<std::string>& keep) {
  std::set<std::string> out;
  for (const auto& [name, _] : params) {
    bool kept = false;
    for (const auto& p : keep) kept = kept || name.compare(0, p.size(), p) == 0;
    if (!kept) out.insert(name);
  }
  return out;
}

std::set<std::string> names_with_prefixes(const ParamSet& params, const std::vector<std::string>& prefixes) {
  std::set<std::string> out;
  for (const auto& [name, _] : params) {
    for (const auto& p : prefixes) {
      if (name.compare(0, p.size(), p) == 0) out.insert(name);
    }
  }
  return out;
}

void train_static(Session& s, const std::vector<std::size_t>& pool, const std::vector<RegionWindows>& windows,
                  const std::set<std::string>& frozen) {
  const TrainConfig& t = s.run.train;
  std::mt19937_64 rng(derive_seed(t.seed, 10));
  const double entries = static_cast<double>(t.batch_size) * static_cast<double>(s.net.config.num_aus());
  s.sgd_loop(frozen, t.max_iterations, t.lr, [&] {
    const auto idx = sample_with_replacement(pool, static_cast<std::size_t>(t.batch_size), rng);
    std::vector<RegionWindows> wins;
    for (std::size_t f : idx) wins.push_back(windows[f]);
    const Tensor probs = static_probs(s.net, image_batch(s.data, idx, s.net.config), wins);
    return BatchLoss{multilabel_loss(probs, s.data.labels(idx)), entries};
  });
}

void train_single_au(Session& s, const std::vector<std::size_t>& pool, const std::vector<RegionWindows>& windows,
                     const std::set<std::string>& stage_frozen) {
  const TrainConfig& t = s.run.train;
  const ModelConfig& c = s.net.config;
  for (std::size_t j = 0; j < c.aus.size(); ++j) {
    const int au = c.aus[j];
    const std::string prefix = "au" + std::to_string(au) + ".";
    std::set<std::string> frozen = names_without_prefixes(s.net.params, {prefix});
    frozen.insert(stage_frozen.begin(), stage_frozen.end());

    std::vector<std::size_t> pos, neg;
    for (std::size_t f : pool) (s.data.frames[f].labels.at(j) ? pos : neg).push_back(f);
    std::mt19937_64 rng(derive_seed(t.seed, 20, static_cast<std::uint64_t>(au)));
    const auto regions = s.net.rules.regions_for_au(au);
    const std::size_t half = static_cast<std::size_t>(t.batch_size) / 2;

    s.sgd_loop(frozen, t.max_iterations, t.lr, [&] {
      // Class-balanced batch; falls back to one class when the other is absent.
      std::vector<std::size_t> idx;
      if (pos.empty() || neg.empty()) {
        idx = sample_with_replacement(pos.empty() ? neg : pos, static_cast<std::size_t>(t.batch_size), rng);
      } else {
        idx = sample_with_replacement(pos, half, rng);
        const auto n = sample_with_replacement(neg, static_cast<std::size_t>(t.batch_size) - half, rng);
        idx.insert(idx.end(), n.begin(), n.end());
      }
      std::vector<RegionWindows> wins;
      for (std::size_t f : idx) wins.push_back(windows[f]);
      const Tensor fmap = backbone_forward(c, s.net.params, image_batch(s.data, idx, c), prefix);
      const auto feats = roi_forward(c, s.net.params, fmap, wins, regions, prefix);
      const Tensor probs = predict_probs(s.net.params, pair_symmetric(feats, au, s.net.rules), prefix + "head.");
      LabelMatrix labels(static_cast<Index>(idx.size()), 1);
      for (std::size_t b = 0; b < idx.size(); ++b) labels(static_cast<Index>(b), 0) = s.data.frames[idx[b]].labels[j];
      return BatchLoss{multilabel_loss(probs, labels), static_cast<double>(idx.size())};
    });
  }
}

// Temporal head trained over per-frame features. `features(frames)` returns
// [frames.size(), G]; it is a constant table lookup in frozen mode and a
// differentiable CNN pass in joint mode.
void train_temporal_head(Session& s, const std::vector<std::size_t>& pool, const std::set<std::string>& frozen,
                         int iterations, const std::string& lstm_prefix, const std::string& head,
                         const std::function<Tensor(const std::vector<std::size_t>&)>& features) {
  const TrainConfig& t = s.run.train;
  const ModelConfig& c = s.net.config;
  const auto T = static_cast<std::size_t>(c.lstm.sequence_len);
  std::vector<std::size_t> anchors;
  for (std::size_t f : pool) {
    if (s.data.frames[f].position > 0 || T == 1) anchors.push_back(f);
  }
  if (anchors.empty()) throw std::invalid_argument("no training frame has a prior frame in its session");
  std::mt19937_64 batch_rng(derive_seed(t.seed, 12));
  std::mt19937_64 seq_rng(derive_seed(t.seed, 11));
  const auto B = static_cast<std::size_t>(t.batch_size);
  const bool anchor_only = t.temporal_loss == "anchor";
  const Index num_out = s.net.params.at(head + "weight").dim(0);

  s.sgd_loop(frozen, iterations, t.head_rate(), [&] {
    const auto batch = sample_with_replacement(anchors, B, batch_rng);
    std::vector<SequenceSample> seqs;
    for (std::size_t a : batch) seqs.push_back(assemble_sequence(s.data, a, seq_rng, T));
    // Time-major frame list: row t*B + b is step t of sequence b.
    std::vector<std::size_t> frames;
    frames.reserve(T * B);
    for (std::size_t k = 0; k < T; ++k) {
      for (const auto& q : seqs) frames.push_back(q.frames[k]);
    }
    const Tensor feats = features(frames);
    std::vector<Tensor> steps;
    for (std::size_t k = 0; k < T; ++k) steps.push_back(slice(feats, 0, static_cast<Index>(k * B), static_cast<Index>(B)));
    const auto outs = run_stack(steps, lstm_layers(s.net.params, c, feats.dim(1), lstm_prefix));
    Tensor total;
    for (std::size_t k = anchor_only ? T - 1 : 0; k < T; ++k) {
      std::span<const std::size_t> step(frames.data() + k * B, B);
      const Tensor l = multilabel_loss(predict_probs(s.net.params, outs[k], head), s.data.labels(step));
      total = total.defined() ? add(total, l) : l;
    }
    if (!anchor_only) total = scale(total, 1.0 / static_cast<double>(T));
    return BatchLoss{total, static_cast<double>(B) * static_cast<double>(num_out)};
  });
}

void copy_matching(ParamSet& dst, const ParamSet& src, const std::vector<std::string>& skip_prefixes) {
  for (auto& [name, t] : dst) {
    bool skip = false;
    for (const auto& p : skip_prefixes) skip = skip || name.compare(0, p.size(), p) == 0;
    if (skip || !src.contains(name)) continue;
    const Tensor& from = src.at(name);
    if (from.shape() != t.shape()) {
      throw std::invalid_argument("init checkpoint parameter " + name + " has shape " + shape_string(from.shape()) +
                                  ", expected " + shape_string(t.shape()));
    }
    t.mutable_value() = from.value();
  }
}

void train_roi_lstm(Session& s, const std::vector<std::size_t>& pool, const std::vector<RegionWindows>& windows,
                    const std::set<std::string>& stage_frozen) {
  const TrainConfig& t = s.run.train;
  const std::vector<std::string> temporal{"lstm.", "lstm_head."};
  if (!t.init_checkpoint.empty()) {
    const Checkpoint init = load_checkpoint(t.init_checkpoint);
    copy_matching(s.net.params, init.params, temporal);
  } else {
    // Stage 1: the static ROI model, identical to a plain roi run with this seed.
    std::set<std::string> frozen = names_with_prefixes(s.net.params, temporal);
    frozen.insert(stage_frozen.begin(), stage_frozen.end());
    train_static(s, pool, windows, frozen);
  }
  const int iterations = t.temporal_iterations > 0 ? t.temporal_iterations : t.max_iterations;
  if (t.temporal_backbone == "joint") {
    std::set<std::string> frozen = stage_frozen;
    frozen.insert("head.weight");
    frozen.insert("head.bias");
    train_temporal_head(s, pool, frozen, iterations, "lstm.", "lstm_head.", [&](const std::vector<std::size_t>& f) {
      std::vector<RegionWindows> wins;
      for (std::size_t i : f) wins.push_back(windows[i]);
      return global_feature(s.net, image_batch(s.data, f, s.net.config), wins);
    });
  } else {
    std::vector<std::size_t> needed;
    // Every frame of every session that contributes an anchor.
    std::set<std::size_t> sessions;
    for (std::size_t f : pool) sessions.insert(s.data.frames[f].session_index);
    for (std::size_t si : sessions) {
      const auto& fr = s.data.sessions[si].frames;
      needed.insert(needed.end(), fr.begin(), fr.end());
    }
    const FeatureTable table = feature_table(s.net, s.data, needed, windows);
    train_temporal_head(s, pool, names_without_prefixes(s.net.params, temporal), iterations, "lstm.", "lstm_head.",
                        [&](const std::vector<std::size_t>& f) { return table.gather(f); });
  }
}

void train_transfer(Session& s, const std::vector<std::size_t>& pool, const std::set<std::string>& stage_frozen) {
  const TrainConfig& t = s.run.train;
  const Checkpoint src = load_checkpoint(t.init_checkpoint);
  const Network source = network_from_checkpoint(src);
  if (source.arch == Architecture::single_au || source.arch == Architecture::transfer) {
    throw std::invalid_argument("transfer source must be an fvgg, roi or roi_lstm checkpoint, got " +
                                to_string(source.arch));
  }
  s.source_arch = to_string(source.arch);
  Network net;
  net.arch = Architecture::transfer;
  net.config = source.config;
  net.config.aus = s.data.aus;
  net.config.lstm.depth = 1;
  net.config.lstm.sequence_len = s.run.model.lstm.sequence_len;
  net.rules = source.rules;
  for (const auto& [name, p] : source.params) {
    if (name.rfind("lstm", 0) == 0 || name.rfind("head.", 0) == 0) continue;
    net.params.add(name, p);
  }
  Initializer init(net.config, derive_seed(t.seed, 2));
  const Index G = net.config.global_feature_len;
  if (t.transfer_temporal) {
    add_lstm_params(net.params, net.config, G, init);
    add_linear_params(net.params, "transfer_head.", net.config.lstm.hidden_len, net.config.num_aus(), init);
  } else {
    add_linear_params(net.params, "transfer_head.", G, net.config.num_aus(), init);
  }
  s.net = std::move(net);
  (void)stage_frozen;

  const auto windows = dataset_windows(s.net, s.data);
  const std::vector<std::string> fresh{"lstm.", "transfer_head."};
  const auto frozen = names_without_prefixes(s.net.params, fresh);
  if (t.transfer_temporal) {
    std::set<std::size_t> sessions;
    for (std::size_t f : pool) sessions.insert(s.data.frames[f].session_index);
    std::vector<std::size_t> needed;
    for (std::size_t si : sessions) {
      const auto& fr = s.data.sessions[si].frames;
      needed.insert(needed.end(), fr.begin(), fr.end());
    }
    const FeatureTable table = feature_table(s.net, s.data, needed, windows);
    train_temporal_head(s, pool, frozen, t.max_iterations, "lstm.", "transfer_head.",
                        [&](const std::vector<std::size_t>& f) { return table.gather(f); });
    return;
  }
  const FeatureTable table = feature_table(s.net, s.data, pool, windows);
  std::mt19937_64 rng(derive_seed(t.seed, 10));
  const double entries = static_cast<double>(t.batch_size) * static_cast<double>(s.net.config.num_aus());
  s.sgd_loop(frozen, t.max_iterations, t.head_rate(), [&] {
    const auto idx = sample_with_replacement(pool, static_cast<std::size_t>(t.batch_size), rng);
    const Tensor probs = predict_probs(s.net.params, table.gather(idx), "transfer_head.");
    return BatchLoss{multilabel_loss(probs, s.data.labels(idx)), entries};
  });
}

Architecture architecture_for(TrainMode m) {
  switch (m) {
    case TrainMode::fvgg: return Architecture::fvgg;
    case TrainMode::roi: return Architecture::roi;
    case TrainMode::single_au: return Architecture::single_au;
    case TrainMode::transfer: return Architecture::transfer;
    default: return Architecture::roi_lstm;
  }
}

}  // namespace

TrainResult train_run(const RunConfig& config, const Dataset& data, const std::string& out_dir) {
  const auto started = Clock::now();
  RunConfig run = config;
  TrainConfig& t = run.train;
  t.validate();
  if (lstm_depth(t.mode) > 0) run.model.lstm.depth = lstm_depth(t.mode);
  run.model.mode = t.mode == TrainMode::single_au ? HeadMode::single_au : HeadMode::multi_label;
  if (t.mode != TrainMode::transfer) {
    if (run.model.aus != data.aus) {
      throw std::invalid_argument("model AU list does not match the dataset's AU list");
    }
    if (run.model.image.height != data.image.height || run.model.image.width != data.image.width) {
      throw std::invalid_argument("model image size " + std::to_string(run.model.image.height) + "x" +
                                  std::to_string(run.model.image.width) + " does not match the dataset's " +
                                  std::to_string(data.image.height) + "x" + std::to_string(data.image.width));
    }
  }
  const RuleTable rules = run.rules_path.empty() ? default_rule_table() : load_rule_table(run.rules_path);

  const auto pool = training_frames(data, t);
  if (pool.empty()) throw std::invalid_argument("no training frames under the configured fold");

  Session s(run, data, out_dir);
  if (!out_dir.empty()) {
    std::ofstream cfg(fs::path(out_dir) / "config.json");
    cfg << to_json(run).dump(2) << "\n";
  }

  if (t.mode == TrainMode::transfer) {
    train_transfer(s, pool, {});
  } else {
    s.net = make_network(run.model, architecture_for(t.mode), derive_seed(t.seed, 1), rules);
    const auto stage_frozen = freeze_prefix(s.net, t.freeze_stages);
    const auto windows = dataset_windows(s.net, data);
    switch (t.mode) {
      case TrainMode::fvgg:
      case TrainMode::roi: train_static(s, pool, windows, stage_frozen); break;
      case TrainMode::single_au: train_single_au(s, pool, windows, stage_frozen); break;
      default: train_roi_lstm(s, pool, windows, stage_frozen); break;
    }
  }

  TrainResult result;
  result.checkpoint = make_checkpoint(run, s.net, static_cast<std::uint64_t>(s.iteration), s.source_arch);
  result.log = std::move(s.log);
  if (!out_dir.empty()) {
    result.checkpoint_path = s.checkpoint_path();
    save_checkpoint(result.checkpoint_path, result.checkpoint);
    const double seconds = std::chrono::duration<double>(Clock::now() - started).count();
    std::ofstream timing(fs::path(out_dir) / "timing.txt");
    timing << "mode " << to_string(t.mode) << "\niterations " << s.iteration << "\nseconds " << seconds << "\n";
  }
  return result;
}

}  // namespace aunet
