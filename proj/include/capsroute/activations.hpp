#pragma once

#include <stdexcept>
#include <string>

#include "capsroute/tape.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// Primary-capsule activation choice.
struct ActivationFn {
  enum class Kind { OriginalSquash, CISquash, PoweredActivation };

  Kind kind = Kind::OriginalSquash;
  double ci_bar = 6.5;   // saturation threshold of CI-squash
  int ci_exponent = 3;   // growth exponent; 3 is the cubic-increasing form
  int pa_n = 6;          // power applied after squash

  static ActivationFn original_squash() { return {}; }
  static ActivationFn ci_squash(double bar, int exponent = 3) {
    ActivationFn f;
    f.kind = Kind::CISquash;
    f.ci_bar = bar;
    f.ci_exponent = exponent;
    f.validate();
    return f;
  }
  static ActivationFn powered(int n) {
    ActivationFn f;
    f.kind = Kind::PoweredActivation;
    f.pa_n = n;
    f.validate();
    return f;
  }

  void validate() const {
    if (kind == Kind::CISquash && ci_bar <= 0.0) {
      throw std::invalid_argument("activation: ci_bar must be positive");
    }
    if (kind == Kind::CISquash && ci_exponent < 1) {
      throw std::invalid_argument("activation: ci_exponent must be >= 1");
    }
    if (kind == Kind::PoweredActivation && pa_n < 1) {
      throw std::invalid_argument("activation: pa_n must be >= 1");
    }
  }

  std::string name() const;

  /// Applies the activation to pre-activation capsule vectors on a tape.
  /// PoweredActivation composes the power step after the original squash.
  Var apply(Tape& tape, Var pre_activation) const;
};

// Value-level forms of the three activations, applied along the last axis.
// These mirror the tape operations exactly and are handy for analysis and
// direct evaluation.

/// squash(s) = (||s||^2 / (1 + ||s||^2)) * s/||s||; squash(0) = 0.
Tensor squash(const Tensor& s);

/// ci_squash(s) = (min(||s||, bar)/bar)^exponent * s/||s||; exactly 1 at and
/// above the bar; ci_squash(0) = 0.
Tensor ci_squash(const Tensor& s, double bar, int exponent = 3);

/// Power_n(u) = ||u||^n * u/||u||; Power_n(0) = 0.
Tensor powered_activation(const Tensor& u, int n);

/// Applies the configured activation to pre-activation capsule vectors.
Tensor apply_activation(const ActivationFn& fn, const Tensor& pre_activation);

}  // namespace capsroute
