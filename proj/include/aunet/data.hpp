#pragma once

// Face-sequence datasets: the in-memory form used by training and evaluation,
// the deterministic synthetic generator, and the on-disk manifest format
// (manifest.json + per-session PGM frames and CSV landmark/label tables).

#include "aunet/loss_metrics.hpp"
#include "aunet/roi_geometry.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aunet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FrameRecord {
  int subject = 0;
  int session = 0;
  int frame = 0;                  // frame id, strictly increasing within a session
  std::size_t session_index = 0;  // index into Dataset::sessions
  std::size_t position = 0;       // position within the session
  Eigen::ArrayXd image;           // row-major grayscale in [0,1]
  LandmarkSet landmarks;
  std::vector<std::uint8_t> labels;
  std::vector<double> latent;  // synthetic frames only
};

struct SessionIndex {
  int subject = 0;
  int session = 0;
  std::vector<std::size_t> frames;  // indices into Dataset::frames in time order
};

struct Dataset {
  ImageSize image{40, 40};
  int schema_size = kDefaultSchemaSize;
  std::vector<int> aus = default_au_list();
  std::vector<FrameRecord> frames;
  std::vector<SessionIndex> sessions;

  std::vector<int> subject_ids() const;
  std::vector<std::size_t> frames_of_subjects(const std::vector<int>& subjects) const;
  LabelMatrix labels(std::span<const std::size_t> indices) const;
  // Rebuilds session/position indices from frame order; frames must be
  // grouped by (subject, session) with increasing frame ids.
  void reindex();
};

struct SynthConfig {
  int subjects = 6;
  int sessions = 2;
  int frames = 120;
  ImageSize image{40, 40};
  std::vector<int> aus = default_au_list();
  std::vector<double> prevalence{0.2, 0.15, 0.2, 0.45, 0.5, 0.5, 0.5, 0.45, 0.15, 0.3, 0.15, 0.1};
  double persistence = 0.95;      // AR(1) coefficient of the latent drivers
  double sharpness = 6.0;         // slope of the driver -> activation squashing
  double max_step = 0.19;         // per-frame bound on activation change
  double shared_weight = 0.85;    // weight of the shared driver for correlated AU pairs
  double amplitude = 0.45;        // pattern contrast at full activation
  double amplitude_floor = 0.8;   // per-frame contrast factor drawn from [floor, 1]
  double noise_sigma = 0.06;      // per-pixel Gaussian noise
  double head_motion = 1.5;       // bound on per-frame head translation (pixels)
  double occlusion_rate = 0.06;   // fraction of frames rendered without AU appearance; labels unchanged

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// Per-subject appearance drawn by the generator.
struct SubjectAppearance {
  LandmarkSet template_landmarks;  // neutral geometry in pixels
  double skin = 0.55;
};

struct SyntheticDataset {
  Dataset data;
  std::map<int, SubjectAppearance> appearance;
};

// AU pairs that share a latent driver.
const std::vector<std::pair<int, int>>& correlated_au_pairs();

// Canonical 68-point face in unit coordinates.
const LandmarkSet& unit_face_template();

// Neutral face (no AU patterns, no noise) for a landmark configuration.
Eigen::ArrayXd render_face(const LandmarkSet& landmarks, double skin, ImageSize image);

// Unit-contrast appearance pattern of one AU at its region centers.
Eigen::ArrayXd render_au_pattern(int au, const LandmarkSet& landmarks, ImageSize image,
                                 const RuleTable& rules = default_rule_table());

SyntheticDataset generate_synthetic(const SynthConfig& config, std::uint64_t seed);

struct ManifestSession {
  int id = 0;
  std::string path;  // relative to the root, e.g. "sub1/ses1"
  std::vector<int> frames;
  std::string landmarks = "landmarks.csv";
  std::string labels = "labels.csv";  // binary labels, or empty when intensities are used
  std::string intensities;            // 0-5 intensity codes
};

struct ManifestSubject {
  int id = 0;
  std::vector<ManifestSession> sessions;
};

struct DatasetManifest {
  std::string root;
  int schema_version = 1;
  std::vector<int> aus = default_au_list();
  int schema_size = kDefaultSchemaSize;
  ImageSize image{40, 40};
  int intensity_threshold = 2;
  std::vector<ManifestSubject> subjects;
};

// Writes `data` under out_dir and returns its manifest.
DatasetManifest write_dataset(const Dataset& data, const std::string& out_dir);

// Generates and writes; identical seeds give byte-identical trees.
DatasetManifest generate_dataset(const SynthConfig& config, std::uint64_t seed, const std::string& out_dir);

DatasetManifest read_manifest(const std::string& manifest_path);

// Loads a manifest (or a directory containing manifest.json).
Dataset load_dataset(const std::string& manifest_path);

// 8-bit binary PGM (P5).
void write_pgm(const std::string& path, const Eigen::ArrayXd& image, ImageSize size);
Eigen::ArrayXd read_pgm(const std::string& path, ImageSize expected);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

}  // namespace aunet
