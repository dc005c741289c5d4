#pragma once

// LSTM cell and stacked runner. Inputs and states are batched row vectors:
// x_t is [B, input_len], h and C are [B, hidden_len].

#include "aunet/tensor.hpp"

#include <random>
#include <vector>

namespace aunet {

struct LstmLayerParams {
  // Each W is [hidden, hidden + input] acting on [h_{t-1}, x_t]; each b is [hidden].
  Tensor Wf, bf;  // forget gate
  Tensor Wi, bi;  // input gate
  Tensor Wc, bc;  // candidate cell state
  Tensor Wo, bo;  // output gate
  Index input_len = 0;
  Index hidden_len = 0;

  std::vector<Tensor*> tensors();
  void validate() const;
};

struct LstmState {
  Tensor h;
  Tensor c;
};

struct LstmGates {
  Tensor f, i, candidate, o;
};

struct LstmStackConfig {
  int depth = 1;  // 1..3
  Index hidden_len = 32;
  Index sequence_len = 24;
  double forget_bias = 1.0;

  void validate() const;
};

LstmLayerParams make_lstm_layer(Index input_len, Index hidden_len, double init_std, double forget_bias,
                                std::mt19937_64& rng);

LstmState zero_state(Index batch, Index hidden_len);

// One step, in gate order f, i, C~, C, o, h:
//   f = σ(Wf·[h,x]+bf), i = σ(Wi·[h,x]+bi), C~ = tanh(Wc·[h,x]+bc),
//   C = f*C_prev + i*C~, o = σ(Wo·[h,x]+bo), h = o*tanh(C)
LstmState cell_step(const Tensor& x_t, const LstmState& state, const LstmLayerParams& params,
                    LstmGates* gates = nullptr);

// Runs every layer over the full sequence from zero states and returns the
// top layer's output at every timestep.
std::vector<Tensor> run_stack(const std::vector<Tensor>& sequence, const std::vector<LstmLayerParams>& layers);

}  // namespace aunet
