#pragma once

// Static-image network: a convolutional backbone, twenty region-private ROI
// subnets over cropped feature-map windows, and the multi-label / single-AU
// heads. Parameters live in a name-ordered ParamSet so that iteration order,
// serialization, and optimizer updates are deterministic.

#include "aunet/lstm.hpp"
#include "aunet/roi_geometry.hpp"
#include "aunet/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace aunet {

struct StageSpec {
  Index channels = 8;
  Index kernel = 3;
  bool pool = true;  // 2x2 max pool after the conv + relu
};

enum class HeadMode { multi_label, single_au };

struct ModelConfig {
  ImageSize image{40, 40};
  Index in_channels = 1;
  std::vector<StageSpec> backbone{{8, 3, true}, {16, 3, true}, {16, 3, false}};
  Index roi_window = 3;
  Index upsample_factor = 2;
  int roi_convs = 2;
  Index roi_channels = 0;  // 0: same as the backbone output
  Index roi_feature_len = 16;
  Index global_feature_len = 128;
  std::vector<int> aus = default_au_list();
  HeadMode mode = HeadMode::multi_label;
  double init_std = 0.01;
  std::string init_scheme = "gaussian";  // "gaussian" (fixed std) or "he" (std = sqrt(2/fan_in))
  double relu_bias = 0.0;                // initial bias of layers followed by a relu
  double input_mean = 0.0;               // pixels enter the network as (x - input_mean) * input_scale
  double input_scale = 1.0;
  LstmStackConfig lstm;

  Index num_aus() const { return static_cast<Index>(aus.size()); }
  Index feature_channels() const { return backbone.empty() ? in_channels : backbone.back().channels; }
  Index roi_conv_channels() const { return roi_channels > 0 ? roi_channels : feature_channels(); }
  GridSize grid() const;
  void validate() const;
};

// Full-scale geometry: 224x224 input, 512x14x14 crop map, 2048 global feature.
ModelConfig full_scale_config();

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return tensors_.size(); }
  Index element_count() const;
  void zero_grad();

  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }
  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }

  // Tensors whose names start with `prefix`, with the prefix kept.
  ParamSet subset(const std::string& prefix) const;
  void merge(const ParamSet& other);

 private:
  Map tensors_;
};

// Which parts of the model a parameter set contains.
enum class Architecture { fvgg, roi, single_au, roi_lstm, transfer };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct Network {
  ModelConfig config;
  RuleTable rules = default_rule_table();
  Architecture arch = Architecture::roi;
  ParamSet params;
};

// Parameter initialization. Weights are zero-mean Gaussian, biases zero.
class Initializer {
 public:
  Initializer(const ModelConfig& config, std::uint64_t seed);
  Tensor weight(const Shape& shape, Index fan_in);
  Tensor bias(Index n) const { return Tensor::zeros({n}, true); }
  Tensor relu_bias(Index n) const { return Tensor::full({n}, config_.relu_bias, true); }
  std::mt19937_64& rng() { return rng_; }

 private:
  const ModelConfig& config_;
  std::mt19937_64 rng_;
};

void add_backbone_params(ParamSet& params, const ModelConfig& c, Initializer& init, const std::string& prefix = "");
void add_roi_params(ParamSet& params, const ModelConfig& c, Initializer& init, int region,
                    const std::string& prefix = "");
void add_linear_params(ParamSet& params, const std::string& name, Index in, Index out, Initializer& init,
                       bool feeds_relu = false);
void add_lstm_params(ParamSet& params, const ModelConfig& c, Index input_len, Initializer& init,
                     const std::string& prefix = "lstm.");

Network make_network(const ModelConfig& config, Architecture arch, std::uint64_t seed,
                     const RuleTable& rules = default_rule_table());

// [N, in_channels, H, W] -> [N, C, h, w]
Tensor backbone_forward(const ModelConfig& c, const ParamSet& params, const Tensor& images,
                        const std::string& prefix = "");

// Per-region features [N, D_roi] for the requested regions; other slots stay
// undefined. windows[n] holds the 20 grid windows of sample n.
std::vector<Tensor> roi_forward(const ModelConfig& c, const ParamSet& params, const Tensor& feature_map,
                                std::span<const RegionWindows> windows, std::span<const int> regions,
                                const std::string& prefix = "");
std::vector<Tensor> roi_forward(const ModelConfig& c, const ParamSet& params, const Tensor& feature_map,
                                std::span<const RegionWindows> windows, const std::string& prefix = "");

// Concatenation of all 20 region features followed by one fully connected layer.
Tensor concat_global_feature(const ModelConfig& c, const ParamSet& params, const std::vector<Tensor>& roi_features,
                             const std::string& prefix = "");

// Concatenation of the (one or two) region features linked to `au`.
Tensor pair_symmetric(const std::vector<Tensor>& roi_features, int au, const RuleTable& rules);

// Per-AU sigmoid of a linear unit: [N, F] -> [N, outputs].
Tensor predict_probs(const ParamSet& params, const Tensor& feature, const std::string& head = "head.");

// Global-pool baseline feature: mean over the grid, then one fully connected layer.
Tensor fvgg_feature(const ModelConfig& c, const ParamSet& params, const Tensor& feature_map);

// Frame-level global feature [N, G] of an fvgg/roi network (or the ROI part of a temporal one).
Tensor global_feature(const Network& net, const Tensor& images, std::span<const RegionWindows> windows);

// Static per-frame AU probabilities [N, num_aus] for fvgg, roi and single_au networks.
Tensor static_probs(const Network& net, const Tensor& images, std::span<const RegionWindows> windows);

// Window set for a frame under this configuration.
RegionWindows frame_windows(const ModelConfig& c, const RuleTable& rules, const LandmarkSet& landmarks);

// Names of parameters belonging to the first k backbone stages are returned
// as frozen; k must not exceed the backbone depth.
std::set<std::string> freeze_prefix(const Network& net, int k_stages);

// LSTM layers stored under `prefix` ("lstm.layer{l}.W{f,i,c,o}" / "b{f,i,c,o}").
std::vector<LstmLayerParams> lstm_layers(const ParamSet& params, const ModelConfig& c, Index input_len,
                                         const std::string& prefix = "lstm.");

// Global features without gradients, in input order.
Tensor extract_features(const Network& net, const Tensor& images, std::span<const RegionWindows> windows);

}  // namespace aunet
