#include "capsroute/activations.hpp"

namespace capsroute {

std::string ActivationFn::name() const {
  switch (kind) {
    case Kind::OriginalSquash:
      return "squash";
    case Kind::CISquash:
      return "ci-squash(bar=" + std::to_string(ci_bar) + ")";
    case Kind::PoweredActivation:
      return "pa(n=" + std::to_string(pa_n) + ")";
  }
  return "?";
}

Var ActivationFn::apply(Tape& tape, Var pre_activation) const {
  validate();
  switch (kind) {
    case Kind::OriginalSquash:
      return tape.squash(pre_activation);
    case Kind::CISquash:
      return tape.ci_squash(pre_activation, ci_bar, ci_exponent);
    case Kind::PoweredActivation:
      return tape.power_activation(tape.squash(pre_activation), pa_n);
  }
  throw std::logic_error("activation: unknown kind");
}

namespace {

// Runs a single value-level op through a throwaway tape so the value and
// tape paths cannot drift apart.
template <typename Fn>
Tensor via_tape(const Tensor& in, Fn&& fn) {
  Tape tape;
  Var v = tape.constant(in);
  return tape.value(fn(tape, v));
}

}  // namespace

Tensor squash(const Tensor& s) {
  return via_tape(s, [](Tape& t, Var v) { return t.squash(v); });
}

Tensor ci_squash(const Tensor& s, double bar, int exponent) {
  return via_tape(s, [&](Tape& t, Var v) { return t.ci_squash(v, bar, exponent); });
}

Tensor powered_activation(const Tensor& u, int n) {
  return via_tape(u, [&](Tape& t, Var v) { return t.power_activation(v, n); });
}

Tensor apply_activation(const ActivationFn& fn, const Tensor& pre_activation) {
  Tape tape;
  Var v = tape.constant(pre_activation);
  return tape.value(fn.apply(tape, v));
}

}  // namespace capsroute
