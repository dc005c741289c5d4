#include "aunet/gradcheck_suite.hpp"

#include "aunet/loss_metrics.hpp"
#include "aunet/lstm.hpp"
#include "aunet/ops.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace aunet {

namespace {

using Rng = std::mt19937_64;

// Values bounded away from zero so relu kinks stay out of reach of eps.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, std::move(a), true);
}

Tensor uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor::Array a(shape_size(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = u(rng);
  return Tensor(shape, std::move(a), grad);
}

// Distinct, well separated values so the pooled maximum never switches.
Tensor distinct(const Shape& shape, Rng& rng) {
  const Index n = shape_size(shape);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  Tensor::Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = 0.05 * static_cast<double>(order[static_cast<std::size_t>(i)]) - 1.0;
  return Tensor(shape, std::move(a), true);
}

// Checks sum(f(inputs) * w) for fixed random weights w, so every output
// coordinate carries a distinct upstream gradient.
GradCheckCase check(const std::string& name, std::vector<Tensor> inputs,
                    const std::function<Tensor(const std::vector<Tensor>&)>& f, Rng& rng, double eps) {
  const Tensor probe = [&] {
    NoGradGuard guard;
    return f(inputs);
  }();
  const Tensor weights = uniform(probe.shape(), rng, -1.0, 1.0, false);
  auto closure = [&] { return sum(mul(f(inputs), weights)); };
  return {name, grad_check<double>(closure, std::span<Tensor>(inputs), eps)};
}

}  // namespace

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.image = {12, 12};
  c.backbone = {{2, 3, true}};
  c.roi_window = 3;
  c.upsample_factor = 2;
  c.roi_convs = 1;
  c.roi_channels = 1;
  c.roi_feature_len = 1;
  c.global_feature_len = 4;
  c.aus = {1, 2, 4};
  c.init_scheme = "he";
  c.lstm.depth = 2;
  c.lstm.hidden_len = 3;
  c.lstm.sequence_len = 3;
  return c;
}

std::vector<GradCheckCase> run_op_gradchecks(std::uint64_t seed, double eps) {
  Rng rng(seed);
  std::vector<GradCheckCase> out;
  using V = std::vector<Tensor>;

  out.push_back(check("add", {uniform({3, 4}, rng), uniform({3, 4}, rng)},
                      [](const V& x) { return add(x[0], x[1]); }, rng, eps));
  out.push_back(check("sub", {uniform({3, 4}, rng), uniform({3, 4}, rng)},
                      [](const V& x) { return sub(x[0], x[1]); }, rng, eps));
  out.push_back(check("mul", {uniform({3, 4}, rng), uniform({3, 4}, rng)},
                      [](const V& x) { return mul(x[0], x[1]); }, rng, eps));
  out.push_back(check("scale", {uniform({5}, rng)}, [](const V& x) { return scale(x[0], -1.7); }, rng, eps));
  out.push_back(check("relu", {away_from_zero({4, 5}, rng)}, [](const V& x) { return relu(x[0]); }, rng, eps));
  out.push_back(check("sigmoid", {uniform({4, 5}, rng, -3, 3)}, [](const V& x) { return sigmoid(x[0]); }, rng, eps));
  out.push_back(check("tanh", {uniform({4, 5}, rng, -2, 2)}, [](const V& x) { return tanh(x[0]); }, rng, eps));
  out.push_back(check("sum", {uniform({2, 3}, rng)}, [](const V& x) { return sum(x[0]); }, rng, eps));
  out.push_back(check("mean", {uniform({2, 3}, rng)}, [](const V& x) { return mean(x[0]); }, rng, eps));
  out.push_back(check("spatial_mean", {uniform({2, 3, 4, 4}, rng)}, [](const V& x) { return spatial_mean(x[0]); },
                      rng, eps));
  out.push_back(check("matmul", {uniform({3, 4}, rng), uniform({4, 2}, rng)},
                      [](const V& x) { return matmul(x[0], x[1]); }, rng, eps));
  out.push_back(check("linear", {uniform({3, 5}, rng), uniform({4, 5}, rng), uniform({4}, rng)},
                      [](const V& x) { return linear(x[0], x[1], x[2]); }, rng, eps));
  out.push_back(check("add_channel_bias", {uniform({2, 3, 4, 4}, rng), uniform({3}, rng)},
                      [](const V& x) { return add_channel_bias(x[0], x[1]); }, rng, eps));
  out.push_back(check("reshape", {uniform({2, 3, 2}, rng)}, [](const V& x) { return reshape(x[0], {3, 4}); }, rng,
                      eps));
  out.push_back(check("concat", {uniform({2, 3}, rng), uniform({2, 2}, rng)},
                      [](const V& x) { return concat(x, 1); }, rng, eps));
  out.push_back(check("slice", {uniform({5, 3}, rng)}, [](const V& x) { return slice(x[0], 0, 1, 3); }, rng, eps));
  out.push_back(check("crop2d", {uniform({2, 6, 6}, rng)}, [](const V& x) { return crop2d(x[0], 1, 2, 3, 3); }, rng,
                      eps));
  out.push_back(check("gather_windows", {uniform({2, 2, 6, 6}, rng)},
                      [](const V& x) {
                        const std::vector<std::pair<Index, Index>> origins{{0, 3}, {2, 1}};
                        return gather_windows(x[0], std::span<const std::pair<Index, Index>>(origins), 3, 3);
                      },
                      rng, eps));
  out.push_back(check("upsample_nearest", {uniform({2, 2, 3, 3}, rng)},
                      [](const V& x) { return upsample_nearest(x[0], 2); }, rng, eps));
  out.push_back(check("max_pool2d", {distinct({2, 2, 6, 6}, rng)}, [](const V& x) { return max_pool2d(x[0], 2, 2); },
                      rng, eps));
  out.push_back(check("conv2d", {uniform({2, 2, 5, 5}, rng), uniform({3, 2, 3, 3}, rng)},
                      [](const V& x) { return conv2d(x[0], x[1], 1, 1); }, rng, eps));
  out.push_back(check("conv2d_stride2", {uniform({1, 2, 7, 7}, rng), uniform({2, 2, 3, 3}, rng)},
                      [](const V& x) { return conv2d(x[0], x[1], 2, 0); }, rng, eps));

  {
    LabelMatrix labels(3, 4);
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < labels.size(); ++i) labels.data()[i] = coin(rng) ? 1 : 0;
    // Probabilities stay inside [0,1] under the eps perturbation.
    std::vector<Tensor> p{uniform({3, 4}, rng, 0.05, 0.95)};
    auto closure = [&] { return multilabel_loss(p[0], labels); };
    out.push_back({"multilabel_loss", grad_check<double>(closure, std::span<Tensor>(p), eps)});
  }
  {
    const Index I = 3, H = 4, B = 2;
    LstmLayerParams layer = make_lstm_layer(I, H, 0.5, 1.0, rng);
    std::vector<Tensor> inputs{uniform({B, I}, rng), uniform({B, H}, rng), uniform({B, H}, rng),
                               layer.Wf, layer.bf, layer.Wi, layer.bi, layer.Wc, layer.bc, layer.Wo, layer.bo};
    out.push_back(check("lstm_cell",
                        inputs,
                        [I, H](const V& x) {
                          LstmLayerParams p;
                          p.input_len = I;
                          p.hidden_len = H;
                          p.Wf = x[3]; p.bf = x[4]; p.Wi = x[5]; p.bi = x[6];
                          p.Wc = x[7]; p.bc = x[8]; p.Wo = x[9]; p.bo = x[10];
                          const LstmState s = cell_step(x[0], {x[1], x[2]}, p);
                          return concat(std::vector<Tensor>{s.h, s.c}, 1);
                        },
                        rng, eps));
  }
  return out;
}

namespace {

GradCheckResult<double> model_gradcheck_at(std::uint64_t point_seed, double eps) {
  Rng rng(point_seed);
  const ModelConfig c = gradcheck_model_config();
  Network net = make_network(c, Architecture::roi_lstm, point_seed);
  // Keep every relu input well away from zero: small weights and a per-unit
  // bias of +-1 (mostly +) for the relu layers, so an eps step never flips a
  // branch. LSTM and head biases only get a generic random offset.
  std::uniform_real_distribution<double> offset(-0.5, 0.5);
  std::bernoulli_distribution active(0.75);
  for (auto& [name, t] : net.params) {
    const bool relu_layer = name.rfind("lstm", 0) != 0 && name.rfind("head.", 0) != 0 && name.rfind("lstm_head.", 0) != 0;
    if (t.rank() == 1) {
      for (Index i = 0; i < t.size(); ++i) t.mutable_value()[i] = relu_layer ? (active(rng) ? 1.0 : -1.0) : offset(rng);
    } else if (relu_layer) {
      t.mutable_value() *= 0.1;
    }
  }
  const Index B = 2;
  const auto T = static_cast<std::size_t>(c.lstm.sequence_len);

  // Random faces: landmarks anywhere in the image give valid windows.
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(c.image.width - 1));
  std::vector<RegionWindows> windows;
  for (std::size_t i = 0; i < T * static_cast<std::size_t>(B); ++i) {
    LandmarkSet lm;
    for (int k = 0; k < kDefaultSchemaSize; ++k) lm.points.push_back({pos(rng), pos(rng)});
    windows.push_back(frame_windows(c, net.rules, lm));
  }
  const Tensor images = uniform({static_cast<Index>(T) * B, 1, c.image.height, c.image.width}, rng, 0.0, 1.0, false);
  std::bernoulli_distribution coin(0.5);

  std::vector<Tensor> params;
  for (auto& [name, t] : net.params) params.push_back(t);
  std::vector<LabelMatrix> step_labels(T, LabelMatrix(B, c.num_aus()));
  for (auto& l : step_labels) {
    for (Index i = 0; i < l.size(); ++i) l.data()[i] = coin(rng) ? 1 : 0;
  }

  auto closure = [&] {
    const Tensor feats = global_feature(net, images, windows);
    std::vector<Tensor> steps;
    for (std::size_t k = 0; k < T; ++k) steps.push_back(slice(feats, 0, static_cast<Index>(k) * B, B));
    const auto outs = run_stack(steps, lstm_layers(net.params, c, c.global_feature_len));
    Tensor total;
    for (std::size_t k = 0; k < T; ++k) {
      const Tensor l = multilabel_loss(predict_probs(net.params, outs[k], "lstm_head."), step_labels[k]);
      total = total.defined() ? add(total, l) : l;
    }
    return total;
  };
  return grad_check<double>(closure, std::span<Tensor>(params), eps);
}

}  // namespace

GradCheckCase run_model_gradcheck(std::uint64_t seed, double eps) {
  return {"roi_lstm_model", model_gradcheck_at(seed, eps)};
}

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, double eps) {
  auto cases = run_op_gradchecks(seed, eps);
  cases.push_back(run_model_gradcheck(seed, eps));
  return cases;
}

}  // namespace aunet
