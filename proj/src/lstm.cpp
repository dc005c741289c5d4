#include "aunet/lstm.hpp"

#include "aunet/ops.hpp"

#include <stdexcept>
#include <string>

namespace aunet {

std::vector<Tensor*> LstmLayerParams::tensors() { return {&Wf, &bf, &Wi, &bi, &Wc, &bc, &Wo, &bo}; }

void LstmLayerParams::validate() const {
  const Shape w{hidden_len, hidden_len + input_len};
  const Shape b{hidden_len};
  for (const Tensor* t : {&Wf, &Wi, &Wc, &Wo}) {
    if (!t->defined() || t->shape() != w) throw ShapeError("lstm: gate weight must be " + shape_string(w));
  }
  for (const Tensor* t : {&bf, &bi, &bc, &bo}) {
    if (!t->defined() || t->shape() != b) throw ShapeError("lstm: gate bias must be " + shape_string(b));
  }
}

void LstmStackConfig::validate() const {
  if (depth < 1 || depth > 3) throw std::invalid_argument("lstm depth must be 1, 2 or 3, got " + std::to_string(depth));
  if (hidden_len < 1) throw std::invalid_argument("lstm hidden length must be positive");
  if (sequence_len < 1) throw std::invalid_argument("lstm sequence length must be positive");
}

LstmLayerParams make_lstm_layer(Index input_len, Index hidden_len, double init_std, double forget_bias,
                                std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, init_std);
  auto weight = [&] {
    Tensor::Array a(hidden_len * (hidden_len + input_len));
    for (Index i = 0; i < a.size(); ++i) a[i] = normal(rng);
    return Tensor({hidden_len, hidden_len + input_len}, std::move(a), true);
  };
  LstmLayerParams p;
  p.input_len = input_len;
  p.hidden_len = hidden_len;
  p.Wf = weight();
  p.bf = Tensor::full({hidden_len}, forget_bias, true);
  p.Wi = weight();
  p.bi = Tensor::zeros({hidden_len}, true);
  p.Wc = weight();
  p.bc = Tensor::zeros({hidden_len}, true);
  p.Wo = weight();
  p.bo = Tensor::zeros({hidden_len}, true);
  return p;
}

LstmState zero_state(Index batch, Index hidden_len) {
  return {Tensor::zeros({batch, hidden_len}), Tensor::zeros({batch, hidden_len})};
}

LstmState cell_step(const Tensor& x_t, const LstmState& state, const LstmLayerParams& params, LstmGates* gates) {
  params.validate();
  if (x_t.rank() != 2 || x_t.dim(1) != params.input_len) {
    throw ShapeError("lstm: input " + shape_string(x_t.shape()) + " does not match input length " +
                     std::to_string(params.input_len));
  }
  const Shape hs{x_t.dim(0), params.hidden_len};
  if (state.h.shape() != hs || state.c.shape() != hs) {
    throw ShapeError("lstm: state must be " + shape_string(hs));
  }
  const Tensor hx = concat(std::vector<Tensor>{state.h, x_t}, 1);
  const Tensor f = sigmoid(linear(hx, params.Wf, params.bf));
  const Tensor i = sigmoid(linear(hx, params.Wi, params.bi));
  const Tensor cand = tanh(linear(hx, params.Wc, params.bc));
  const Tensor c = add(mul(f, state.c), mul(i, cand));
  const Tensor o = sigmoid(linear(hx, params.Wo, params.bo));
  const Tensor h = mul(o, tanh(c));
  if (gates) *gates = {f, i, cand, o};
  return {h, c};
}

std::vector<Tensor> run_stack(const std::vector<Tensor>& sequence, const std::vector<LstmLayerParams>& layers) {
  if (sequence.empty()) throw std::invalid_argument("lstm: empty sequence");
  if (layers.empty() || layers.size() > 3) throw std::invalid_argument("lstm: stack depth must be 1..3");
  std::vector<Tensor> current = sequence;
  for (const auto& layer : layers) {
    LstmState state = zero_state(current.front().dim(0), layer.hidden_len);
    std::vector<Tensor> outputs;
    outputs.reserve(current.size());
    for (const auto& x : current) {
      state = cell_step(x, state, layer);
      outputs.push_back(state.h);
    }
    current = std::move(outputs);
  }
  return current;
}

}  // namespace aunet
