#include "aunet/model.hpp"

#include "aunet/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace aunet {

GridSize ModelConfig::grid() const {
  Index h = image.height, w = image.width;
  for (const auto& s : backbone) {
    if (s.pool) {
      h /= 2;
      w /= 2;
    }
  }
  return {h, w};
}

void ModelConfig::validate() const {
  if (image.height < 1 || image.width < 1) throw std::invalid_argument("model: image size must be positive");
  if (in_channels < 1) throw std::invalid_argument("model: in_channels must be positive");
  if (!std::isfinite(input_mean) || !std::isfinite(input_scale) || input_scale <= 0) {
    throw std::invalid_argument("model: input_scale must be positive and finite");
  }
  for (const auto& s : backbone) {
    if (s.channels < 1 || s.kernel < 1 || s.kernel % 2 == 0) {
      throw std::invalid_argument("model: backbone stages need positive channels and an odd kernel");
    }
  }
  const GridSize g = grid();
  if (g.height < roi_window || g.width < roi_window) {
    throw std::invalid_argument("model: backbone grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                " is smaller than the ROI window " + std::to_string(roi_window));
  }
  if (roi_window < 1 || upsample_factor < 1 || roi_convs < 0 || roi_feature_len < 1) {
    throw std::invalid_argument("model: invalid ROI subnet settings");
  }
  if (global_feature_len < 1) throw std::invalid_argument("model: global_feature_len must be positive");
  if (aus.empty()) throw std::invalid_argument("model: at least one AU required");
  if (!(init_std > 0)) throw std::invalid_argument("model: init_std must be positive");
  if (init_scheme != "gaussian" && init_scheme != "he") {
    throw std::invalid_argument("model: init_scheme must be 'gaussian' or 'he'");
  }
  lstm.validate();
}

ModelConfig full_scale_config() {
  ModelConfig c;
  c.image = {224, 224};
  c.in_channels = 3;
  // Stand-in for the VGG prefix up to its 12th conv: 224 -> 14 after four pools.
  c.backbone = {{64, 3, true}, {128, 3, true}, {256, 3, true}, {512, 3, true}, {512, 3, false}};
  c.roi_feature_len = 102;
  c.global_feature_len = 2048;
  c.lstm.hidden_len = 512;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.backbone) stages.push_back({{"channels", s.channels}, {"kernel", s.kernel}, {"pool", s.pool}});
  return {{"image_size", {c.image.height, c.image.width}},
          {"in_channels", c.in_channels},
          {"backbone", stages},
          {"roi_window", c.roi_window},
          {"upsample_factor", c.upsample_factor},
          {"roi_convs", c.roi_convs},
          {"roi_channels", c.roi_channels},
          {"roi_feature_len", c.roi_feature_len},
          {"global_feature_len", c.global_feature_len},
          {"aus", c.aus},
          {"head_mode", c.mode == HeadMode::multi_label ? "multi_label" : "single_au"},
          {"init_std", c.init_std},
          {"init_scheme", c.init_scheme},
          {"relu_bias", c.relu_bias},
          {"input_mean", c.input_mean},
          {"input_scale", c.input_scale},
          {"lstm_depth", c.lstm.depth},
          {"lstm_hidden", c.lstm.hidden_len},
          {"sequence_len", c.lstm.sequence_len},
          {"forget_bias", c.lstm.forget_bias}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("image_size")) c.image = {j.at("image_size").at(0).get<Index>(), j.at("image_size").at(1).get<Index>()};
  if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<Index>();
  if (j.contains("backbone")) {
    c.backbone.clear();
    for (const auto& s : j.at("backbone")) {
      c.backbone.push_back({s.at("channels").get<Index>(), s.value("kernel", Index{3}), s.value("pool", true)});
    }
  }
  c.roi_window = j.value("roi_window", c.roi_window);
  c.upsample_factor = j.value("upsample_factor", c.upsample_factor);
  c.roi_convs = j.value("roi_convs", c.roi_convs);
  c.roi_channels = j.value("roi_channels", c.roi_channels);
  c.roi_feature_len = j.value("roi_feature_len", c.roi_feature_len);
  c.global_feature_len = j.value("global_feature_len", c.global_feature_len);
  if (j.contains("aus")) c.aus = j.at("aus").get<std::vector<int>>();
  if (j.contains("head_mode")) {
    const auto m = j.at("head_mode").get<std::string>();
    if (m == "multi_label") c.mode = HeadMode::multi_label;
    else if (m == "single_au") c.mode = HeadMode::single_au;
    else throw std::invalid_argument("unknown head_mode '" + m + "'");
  }
  c.init_std = j.value("init_std", c.init_std);
  c.init_scheme = j.value("init_scheme", c.init_scheme);
  c.relu_bias = j.value("relu_bias", c.relu_bias);
  c.input_mean = j.value("input_mean", c.input_mean);
  c.input_scale = j.value("input_scale", c.input_scale);
  c.lstm.depth = j.value("lstm_depth", c.lstm.depth);
  c.lstm.hidden_len = j.value("lstm_hidden", c.lstm.hidden_len);
  c.lstm.sequence_len = j.value("sequence_len", c.lstm.sequence_len);
  c.lstm.forget_bias = j.value("forget_bias", c.lstm.forget_bias);
  return c;
}

// ---------------------------------------------------------------------------

void ParamSet::add(const std::string& name, Tensor t) {
  if (!tensors_.emplace(name, std::move(t)).second) throw std::invalid_argument("duplicate parameter " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

Index ParamSet::element_count() const {
  Index n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

ParamSet ParamSet::subset(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, t] : tensors_)
    if (name.rfind(prefix, 0) == 0) out.add(name, t);
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& [name, t] : other) add(name, t);
}

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::fvgg: return "fvgg";
    case Architecture::roi: return "roi";
    case Architecture::single_au: return "single_au";
    case Architecture::roi_lstm: return "roi_lstm";
    case Architecture::transfer: return "transfer";
  }
  return "?";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "fvgg") return Architecture::fvgg;
  if (s == "roi") return Architecture::roi;
  if (s == "single_au") return Architecture::single_au;
  if (s == "roi_lstm") return Architecture::roi_lstm;
  if (s == "transfer") return Architecture::transfer;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

// ---------------------------------------------------------------------------

Initializer::Initializer(const ModelConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {}

Tensor Initializer::weight(const Shape& shape, Index fan_in) {
  const double std = config_.init_scheme == "he" ? std::sqrt(2.0 / static_cast<double>(fan_in)) : config_.init_std;
  std::normal_distribution<double> normal(0.0, std);
  Tensor::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = normal(rng_);
  return Tensor(shape, std::move(a), true);
}

namespace {

std::string stage_name(const std::string& prefix, std::size_t i) {
  return prefix + "backbone.stage" + std::to_string(i + 1) + ".";
}

std::string roi_name(const std::string& prefix, int region) { return prefix + "roi" + std::to_string(region + 1) + "."; }

}  // namespace

void add_backbone_params(ParamSet& params, const ModelConfig& c, Initializer& init, const std::string& prefix) {
  Index in = c.in_channels;
  for (std::size_t i = 0; i < c.backbone.size(); ++i) {
    const auto& s = c.backbone[i];
    params.add(stage_name(prefix, i) + "weight", init.weight({s.channels, in, s.kernel, s.kernel}, in * s.kernel * s.kernel));
    params.add(stage_name(prefix, i) + "bias", init.relu_bias(s.channels));
    in = s.channels;
  }
}

void add_linear_params(ParamSet& params, const std::string& name, Index in, Index out, Initializer& init,
                       bool feeds_relu) {
  params.add(name + "weight", init.weight({out, in}, in));
  params.add(name + "bias", feeds_relu ? init.relu_bias(out) : init.bias(out));
}

void add_roi_params(ParamSet& params, const ModelConfig& c, Initializer& init, int region, const std::string& prefix) {
  const std::string base = roi_name(prefix, region);
  Index in = c.feature_channels();
  const Index ch = c.roi_conv_channels();
  for (int j = 0; j < c.roi_convs; ++j) {
    params.add(base + "conv" + std::to_string(j + 1) + ".weight", init.weight({ch, in, 3, 3}, in * 9));
    params.add(base + "conv" + std::to_string(j + 1) + ".bias", init.relu_bias(ch));
    in = ch;
  }
  const Index side = c.roi_window * c.upsample_factor;
  add_linear_params(params, base + "fc.", in * side * side, c.roi_feature_len, init, true);
}

void add_lstm_params(ParamSet& params, const ModelConfig& c, Index input_len, Initializer& init,
                     const std::string& prefix) {
  const Index h = c.lstm.hidden_len;
  Index in = input_len;
  for (int l = 0; l < c.lstm.depth; ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    for (const char* gate : {"f", "i", "c", "o"}) {
      params.add(base + "W" + gate, init.weight({h, h + in}, h + in));
      params.add(base + "b" + gate, std::string(gate) == "f" ? Tensor::full({h}, c.lstm.forget_bias, true) : init.bias(h));
    }
    in = h;
  }
}

Network make_network(const ModelConfig& config, Architecture arch, std::uint64_t seed, const RuleTable& rules) {
  config.validate();
  // Only single-AU detectors need every AU linked to a region.
  rules.validate(arch == Architecture::single_au ? config.aus : std::vector<int>{});
  Network net{config, rules, arch, {}};
  Initializer init(net.config, seed);
  const ModelConfig& c = net.config;
  switch (arch) {
    case Architecture::fvgg:
      add_backbone_params(net.params, c, init);
      add_linear_params(net.params, "fvgg.fc.", c.feature_channels(), c.global_feature_len, init, true);
      add_linear_params(net.params, "head.", c.global_feature_len, c.num_aus(), init);
      break;
    case Architecture::roi:
    case Architecture::roi_lstm:
      add_backbone_params(net.params, c, init);
      for (int k = 0; k < kNumRegions; ++k) add_roi_params(net.params, c, init, k);
      add_linear_params(net.params, "global.", kNumRegions * c.roi_feature_len, c.global_feature_len, init, true);
      add_linear_params(net.params, "head.", c.global_feature_len, c.num_aus(), init);
      if (arch == Architecture::roi_lstm) {
        add_lstm_params(net.params, c, c.global_feature_len, init);
        add_linear_params(net.params, "lstm_head.", c.lstm.hidden_len, c.num_aus(), init);
      }
      break;
    case Architecture::single_au:
      for (int au : c.aus) {
        const std::string p = "au" + std::to_string(au) + ".";
        add_backbone_params(net.params, c, init, p);
        const auto regions = rules.regions_for_au(au);
        for (int k : regions) add_roi_params(net.params, c, init, k, p);
        add_linear_params(net.params, p + "head.", static_cast<Index>(regions.size()) * c.roi_feature_len, 1, init);
      }
      break;
    case Architecture::transfer:
      throw std::invalid_argument("transfer networks are built from a trained source checkpoint");
  }
  return net;
}

// ---------------------------------------------------------------------------

Tensor backbone_forward(const ModelConfig& c, const ParamSet& params, const Tensor& images, const std::string& prefix) {
  if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image.height ||
      images.dim(3) != c.image.width) {
    throw ShapeError("backbone: images " + shape_string(images.shape()) + " do not match configured [N," +
                     std::to_string(c.in_channels) + "," + std::to_string(c.image.height) + "," +
                     std::to_string(c.image.width) + "]");
  }
  Tensor x = images;
  for (std::size_t i = 0; i < c.backbone.size(); ++i) {
    const auto& s = c.backbone[i];
    const std::string base = stage_name(prefix, i);
    x = relu(add_channel_bias(conv2d(x, params.at(base + "weight"), 1, s.kernel / 2), params.at(base + "bias")));
    if (s.pool) x = max_pool2d(x, 2, 2);
  }
  return x;
}

std::vector<Tensor> roi_forward(const ModelConfig& c, const ParamSet& params, const Tensor& feature_map,
                                std::span<const RegionWindows> windows, std::span<const int> regions,
                                const std::string& prefix) {
  if (feature_map.rank() != 4) throw ShapeError("roi_forward: feature map must be [N,C,h,w]");
  if (static_cast<Index>(windows.size()) != feature_map.dim(0)) {
    throw ShapeError("roi_forward: need one window set per sample");
  }
  std::vector<Tensor> features(kNumRegions);
  std::vector<std::pair<Index, Index>> origins(windows.size());
  for (int k : regions) {
    if (k < 0 || k >= kNumRegions) throw std::out_of_range("roi_forward: region index out of range");
    for (std::size_t n = 0; n < windows.size(); ++n) {
      const auto& w = windows[n][static_cast<std::size_t>(k)];
      if (w.rows() != c.roi_window || w.cols() != c.roi_window) {
        throw ShapeError("roi_forward: window size does not match the configured ROI window");
      }
      origins[n] = {w.row_begin, w.col_begin};
    }
    const std::string base = roi_name(prefix, k);
    Tensor x = gather_windows(feature_map, std::span<const std::pair<Index, Index>>(origins), c.roi_window, c.roi_window);
    x = upsample_nearest(x, c.upsample_factor);
    for (int j = 0; j < c.roi_convs; ++j) {
      const std::string conv = base + "conv" + std::to_string(j + 1) + ".";
      x = relu(add_channel_bias(conv2d(x, params.at(conv + "weight"), 1, 1), params.at(conv + "bias")));
    }
    x = reshape(x, {x.dim(0), x.size() / x.dim(0)});
    features[static_cast<std::size_t>(k)] = relu(linear(x, params.at(base + "fc.weight"), params.at(base + "fc.bias")));
  }
  return features;
}

std::vector<Tensor> roi_forward(const ModelConfig& c, const ParamSet& params, const Tensor& feature_map,
                                std::span<const RegionWindows> windows, const std::string& prefix) {
  std::vector<int> all(kNumRegions);
  for (int k = 0; k < kNumRegions; ++k) all[static_cast<std::size_t>(k)] = k;
  return roi_forward(c, params, feature_map, windows, all, prefix);
}

Tensor concat_global_feature(const ModelConfig& c, const ParamSet& params, const std::vector<Tensor>& roi_features,
                             const std::string& prefix) {
  if (roi_features.size() != static_cast<std::size_t>(kNumRegions)) {
    throw ShapeError("concat_global_feature: expected 20 region features, got " + std::to_string(roi_features.size()));
  }
  for (const auto& f : roi_features) {
    if (!f.defined() || f.rank() != 2 || f.dim(1) != c.roi_feature_len || f.dim(0) != roi_features[0].dim(0)) {
      throw ShapeError("concat_global_feature: region features must all be [N," + std::to_string(c.roi_feature_len) +
                       "]");
    }
  }
  const Tensor joined = concat(roi_features, 1);
  return relu(linear(joined, params.at(prefix + "global.weight"), params.at(prefix + "global.bias")));
}

Tensor pair_symmetric(const std::vector<Tensor>& roi_features, int au, const RuleTable& rules) {
  const auto regions = rules.regions_for_au(au);
  if (regions.empty()) throw std::invalid_argument("pair_symmetric: AU" + std::to_string(au) + " has no linked region");
  if (regions.size() > 2) {
    throw std::invalid_argument("pair_symmetric: AU" + std::to_string(au) + " links more than two regions");
  }
  std::vector<Tensor> parts;
  for (int k : regions) {
    const auto& f = roi_features.at(static_cast<std::size_t>(k));
    if (!f.defined()) throw std::invalid_argument("pair_symmetric: region " + std::to_string(k + 1) + " not computed");
    parts.push_back(f);
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 1);
}

Tensor predict_probs(const ParamSet& params, const Tensor& feature, const std::string& head) {
  return sigmoid(linear(feature, params.at(head + "weight"), params.at(head + "bias")));
}

Tensor fvgg_feature(const ModelConfig&, const ParamSet& params, const Tensor& feature_map) {
  return relu(linear(spatial_mean(feature_map), params.at("fvgg.fc.weight"), params.at("fvgg.fc.bias")));
}

Tensor global_feature(const Network& net, const Tensor& images, std::span<const RegionWindows> windows) {
  const Tensor fmap = backbone_forward(net.config, net.params, images);
  switch (net.arch) {
    case Architecture::fvgg: return fvgg_feature(net.config, net.params, fmap);
    case Architecture::roi:
    case Architecture::roi_lstm:
    case Architecture::transfer:
      if (net.params.contains("fvgg.fc.weight")) return fvgg_feature(net.config, net.params, fmap);
      return concat_global_feature(net.config, net.params, roi_forward(net.config, net.params, fmap, windows));
    case Architecture::single_au: break;
  }
  throw std::invalid_argument("global features are not defined for single-AU detectors");
}

Tensor static_probs(const Network& net, const Tensor& images, std::span<const RegionWindows> windows) {
  if (net.arch == Architecture::single_au) {
    std::vector<Tensor> columns;
    for (int au : net.config.aus) {
      const std::string p = "au" + std::to_string(au) + ".";
      const Tensor fmap = backbone_forward(net.config, net.params, images, p);
      const auto regions = net.rules.regions_for_au(au);
      const auto feats = roi_forward(net.config, net.params, fmap, windows, regions, p);
      columns.push_back(predict_probs(net.params, pair_symmetric(feats, au, net.rules), p + "head."));
    }
    return concat(columns, 1);
  }
  return predict_probs(net.params, global_feature(net, images, windows));
}

RegionWindows frame_windows(const ModelConfig& c, const RuleTable& rules, const LandmarkSet& landmarks) {
  return region_windows(landmarks, rules, c.image, c.grid(), c.roi_window);
}

std::set<std::string> freeze_prefix(const Network& net, int k_stages) {
  const int depth = static_cast<int>(net.config.backbone.size());
  if (k_stages < 0 || k_stages > depth) {
    throw std::invalid_argument("freeze_prefix: k=" + std::to_string(k_stages) + " outside 0.." + std::to_string(depth));
  }
  std::set<std::string> frozen;
  for (const auto& [name, _] : net.params) {
    for (int i = 0; i < k_stages; ++i) {
      const std::string stage = "backbone.stage" + std::to_string(i + 1) + ".";
      const auto pos = name.find(stage);
      if (pos == 0 || (pos != std::string::npos && name.compare(0, 2, "au") == 0)) frozen.insert(name);
    }
  }
  return frozen;
}

std::vector<LstmLayerParams> lstm_layers(const ParamSet& params, const ModelConfig& c, Index input_len,
                                         const std::string& prefix) {
  std::vector<LstmLayerParams> layers;
  Index in = input_len;
  for (int l = 0; l < c.lstm.depth; ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    LstmLayerParams p;
    p.input_len = in;
    p.hidden_len = c.lstm.hidden_len;
    p.Wf = params.at(base + "Wf");
    p.bf = params.at(base + "bf");
    p.Wi = params.at(base + "Wi");
    p.bi = params.at(base + "bi");
    p.Wc = params.at(base + "Wc");
    p.bc = params.at(base + "bc");
    p.Wo = params.at(base + "Wo");
    p.bo = params.at(base + "bo");
    p.validate();
    layers.push_back(std::move(p));
    in = c.lstm.hidden_len;
  }
  return layers;
}

Tensor extract_features(const Network& net, const Tensor& images, std::span<const RegionWindows> windows) {
  NoGradGuard guard;
  return global_feature(net, images, windows);
}

}  // namespace aunet
