#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsroute/tape.hpp"

namespace capsroute {

/// One gradient-check scenario: inputs plus a builder producing a scalar
/// function of them on a tape. The checker compares the tape's backward pass
/// against central finite differences computed purely from forward
/// evaluations.
struct GradScenario {
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

struct GradCheckOutcome {
  double max_rel_err = 0.0;
  bool pass = true;
};

/// Relative error uses |a - n| / max(|a|, |n|, 1e-3), which keeps near-zero
/// gradients from blowing up the ratio while still catching sign and scale
/// bugs.
GradCheckOutcome check_gradients(const GradScenario& scenario, double h = 1e-4,
                                 double tol = 1e-4);

struct PrimitiveCheckResult {
  std::string name;
  int cases = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

/// Finite-difference checks for every differentiable primitive and each
/// activation function, `cases` random instances per primitive. Inputs are
/// sampled away from the documented kink points (relu at 0, norms at 0,
/// ci-squash at the bar, margin-loss hinge corners).
std::vector<PrimitiveCheckResult> run_gradient_suite(std::uint64_t seed,
                                                     int cases = 100,
                                                     double tol = 1e-4);

}  // namespace capsroute
