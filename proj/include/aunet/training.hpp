#pragma once

#include "aunet/checkpoint.hpp"
#include "aunet/data.hpp"
#include "aunet/loss_metrics.hpp"
#include "aunet/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace aunet {

enum class TrainMode { fvgg, roi, single_au, roi_lstm1, roi_lstm2, roi_lstm3, transfer };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);
bool is_temporal(TrainMode m);
int lstm_depth(TrainMode m);  // 0 for static modes

struct TrainConfig {
  TrainMode mode = TrainMode::roi;
  double lr = 0.001;
  double momentum = 0.9;
  int batch_size = 8;
  int max_iterations = 500;
  int freeze_stages = 0;
  std::uint64_t seed = 1;
  int lr_patience = 200;             // window length of the stagnation test
  double lr_factor = 0.5;            // multiplier applied when stagnant
  double lr_min_improvement = 0.01;  // relative improvement below which the window is stagnant
  int folds = 3;
  int fold = 0;  // held-out fold; -1 trains on every subject
  std::uint64_t split_seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::string temporal_backbone = "frozen";    // frozen: LSTM over fixed CNN features; joint: end to end
  std::string temporal_loss = "per_timestep";  // per_timestep | anchor
  std::string init_checkpoint;                 // warm start (roi_lstm) or source model (transfer)
  bool transfer_temporal = false;              // transfer: one-layer LSTM + head instead of a linear head
  int temporal_iterations = 0;                 // 0: same as max_iterations
  std::string temporal_eval = "chunked";       // chunked | anchored
  double head_lr = 0;                          // lr for layers trained on top of a finished network; 0: lr

  double head_rate() const { return head_lr > 0 ? head_lr : lr; }
  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string rules_path;  // empty: built-in rule table
};

// Flat key/value JSON; unknown keys are rejected.
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path, RunConfig base = {});

// Momentum buffers for trainable parameters, zero-initialized.
struct VelocityState {
  std::map<std::string, Eigen::ArrayXd> buffers;
};

VelocityState make_velocity(const ParamSet& params, const std::set<std::string>& frozen);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// v <- momentum*v - lr*g; p <- p + v for every parameter that has a velocity
// buffer. Any non-finite gradient aborts the whole step before mutation.
void sgd_momentum_step(ParamSet& params, VelocityState& velocity, double lr, double momentum);

// Multiplies the learning rate by `factor` whenever the mean loss of a
// `window`-iteration block improves on the previous block by less than
// `min_improvement` (relative).
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, int window, double factor, double min_improvement);
  double lr() const { return lr_; }
  void observe(double loss);
  int decays() const { return decays_; }

 private:
  double lr_;
  int window_;
  double factor_;
  double min_improvement_;
  double sum_ = 0;
  int count_ = 0;
  double previous_ = 0;
  bool has_previous_ = false;
  int decays_ = 0;
};

struct SequenceSample {
  std::vector<std::size_t> frames;  // dataset frame indices, anchor last
  int subject = 0;
};

// 23 distinct priors drawn uniformly without replacement from the anchor's
// session, sorted ascending, anchor appended; short histories are padded by
// repeating the earliest frame at the front.
SequenceSample assemble_sequence(const Dataset& data, std::size_t anchor, std::mt19937_64& rng,
                                 std::size_t sequence_len = 24);
SequenceSample assemble_sequence(const Dataset& data, std::size_t anchor, std::uint64_t seed,
                                 std::size_t sequence_len = 24);

// Consecutive evaluation windows over a session. Each window lists
// `sequence_len` frames; `scored` marks the positions whose outputs count, so
// every frame of the session is scored exactly once.
struct EvalWindow {
  std::vector<std::size_t> frames;
  std::vector<bool> scored;
};
std::vector<EvalWindow> evaluation_windows(const Dataset& data, std::size_t session, std::size_t sequence_len);

// One window per frame, mirroring training sequences: the frame is the
// anchor and only its output is scored; priors are spread evenly over the
// earlier frames of the session (all of them, front-padded, when fewer than
// sequence_len - 1 exist).
std::vector<EvalWindow> anchored_windows(const Dataset& data, std::size_t session, std::size_t sequence_len);

struct LogEntry {
  int iteration = 0;
  double loss = 0;  // mean per-entry loss of the batch
  double lr = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogEntry> log;
  std::string checkpoint_path;  // empty when nothing was written
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Full training run. With a non-empty out_dir it writes checkpoint.bin,
// loss.log, config.json and timing.txt there. Divergence throws
// DivergenceError after saving the last good parameters.
TrainResult train_run(const RunConfig& config, const Dataset& data, const std::string& out_dir = "");

// Frames held out / used for training under the configured split.
std::vector<std::size_t> training_frames(const Dataset& data, const TrainConfig& t);
std::vector<std::size_t> heldout_frames(const Dataset& data, const TrainConfig& t);

// Rebuilds the network stored in a checkpoint.
Network network_from_checkpoint(const Checkpoint& ckpt);
RunConfig run_config_of(const Checkpoint& ckpt);

// Stacks frames into an N x C x H x W batch, normalized per the model config.
Tensor image_batch(const Dataset& data, std::span<const std::size_t> frames, const ModelConfig& c);

// Window sets of every dataset frame under the network's geometry.
std::vector<RegionWindows> dataset_windows(const Network& net, const Dataset& data);

// Gradient-free global features for a subset of frames.
struct FeatureTable {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows;
  std::vector<Index> row_of;  // dataset frame index -> row, -1 when absent

  // [frames.size(), G] constant tensor.
  Tensor gather(std::span<const std::size_t> frames) const;
};

FeatureTable feature_table(const Network& net, const Dataset& data, std::span<const std::size_t> frames,
                           std::span<const RegionWindows> windows, std::size_t batch = 64);

std::string format_log(const std::vector<LogEntry>& log);

}  // namespace aunet
