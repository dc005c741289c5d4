#pragma once

// Finite-difference checks over every differentiable op and a small
// ROI + LSTM model.

#include "aunet/grad_check.hpp"
#include "aunet/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace aunet {

struct GradCheckCase {
  std::string name;
  GradCheckResult<double> result;
};

// Tiny geometry used for the whole-model check.
ModelConfig gradcheck_model_config();

std::vector<GradCheckCase> run_op_gradchecks(std::uint64_t seed, double eps = 1e-3);

// ROI features -> global feature -> LSTM stack -> per-step sigmoid head ->
// multi-label loss, checked against every parameter at a point where relu
// inputs sit well away from zero.
GradCheckCase run_model_gradcheck(std::uint64_t seed, double eps = 1e-3);

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, double eps = 1e-3);

}  // namespace aunet
