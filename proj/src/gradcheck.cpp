#include "capsroute/gradcheck.hpp"

#include <cmath>

#include "capsroute/rng.hpp"

namespace capsroute {

namespace {

double rel_err(double a, double n) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-3});
}

double eval_scalar(const GradScenario& scenario, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.input(t, false));
  return tape.value(scenario.build(tape, vars))[0];
}

}  // namespace

GradCheckOutcome check_gradients(const GradScenario& scenario, double h,
                                 double tol) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(scenario.inputs.size());
  for (const Tensor& t : scenario.inputs) vars.push_back(tape.input(t, true));
  Var out = scenario.build(tape, vars);
  tape.backward(out);

  GradCheckOutcome outcome;
  std::vector<Tensor> probe = scenario.inputs;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    const Tensor& analytic = tape.grad(vars[t]);
    for (std::size_t e = 0; e < probe[t].size(); ++e) {
      const double orig = probe[t][e];
      probe[t][e] = orig + h;
      const double fp = eval_scalar(scenario, probe);
      probe[t][e] = orig - h;
      const double fm = eval_scalar(scenario, probe);
      probe[t][e] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      outcome.max_rel_err = std::max(outcome.max_rel_err, rel_err(analytic[e], numeric));
    }
  }
  outcome.pass = outcome.max_rel_err <= tol;
  return outcome;
}

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, for kinked pointwise ops.
Tensor random_nonzero(Rng& rng, std::vector<std::size_t> shape, double margin) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) {
    double x;
    do {
      x = rng.uniform(-1.0, 1.0);
    } while (std::fabs(x) < margin);
    v = x;
  }
  return t;
}

// Rescales each trailing-axis vector to a norm drawn from [lo, hi].
void set_row_norms(Rng& rng, Tensor& t, double lo, double hi) {
  const std::size_t d = t.dim(t.rank() - 1);
  const std::size_t rows = t.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += t[r * d + c] * t[r * d + c];
    s = std::sqrt(s);
    if (s < 1e-9) {
      t[r * d] = 1.0;
      s = 1.0;
    }
    const double target = rng.uniform(lo, hi);
    for (std::size_t c = 0; c < d; ++c) t[r * d + c] *= target / s;
  }
}

// Weights the (generally non-scalar) op output by a fixed random functional
// so cancellation cannot mask a wrong adjoint, then reduces to a scalar.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Builder weighted(Rng& rng, std::vector<std::size_t> out_shape,
                 std::function<Var(Tape&, const std::vector<Var>&)> op) {
  Tensor w = random_tensor(rng, std::move(out_shape), 0.2, 1.0);
  return [op = std::move(op), w = std::move(w)](Tape& t, const std::vector<Var>& in) {
    return t.sum(t.elem_scale(op(t, in), w));
  };
}

struct SuiteBuilder {
  Rng rng;
  int cases;
  double tol;
  std::vector<PrimitiveCheckResult> results;

  void run(const std::string& name,
           const std::function<GradScenario(Rng&)>& make_case) {
    PrimitiveCheckResult r;
    r.name = name;
    r.cases = cases;
    for (int c = 0; c < cases; ++c) {
      GradScenario s = make_case(rng);
      const GradCheckOutcome o = check_gradients(s, 1e-4, tol);
      r.max_rel_err = std::max(r.max_rel_err, o.max_rel_err);
      if (!o.pass) r.pass = false;
    }
    results.push_back(std::move(r));
  }
};

}  // namespace

std::vector<PrimitiveCheckResult> run_gradient_suite(std::uint64_t seed, int cases,
                                                     double tol) {
  SuiteBuilder suite{Rng(seed), cases, tol, {}};

  suite.run("add", [](Rng& rng) {
    std::vector<std::size_t> shape{2 + rng.below(3), 2 + rng.below(3)};
    GradScenario s;
    s.inputs = {random_tensor(rng, shape), random_tensor(rng, shape)};
    s.build = weighted(rng, shape, [](Tape& t, const std::vector<Var>& in) {
      return t.add(in[0], in[1]);
    });
    return s;
  });

  suite.run("sub", [](Rng& rng) {
    std::vector<std::size_t> shape{2 + rng.below(3), 2 + rng.below(3)};
    GradScenario s;
    s.inputs = {random_tensor(rng, shape), random_tensor(rng, shape)};
    s.build = weighted(rng, shape, [](Tape& t, const std::vector<Var>& in) {
      return t.sub(in[0], in[1]);
    });
    return s;
  });

  suite.run("mul", [](Rng& rng) {
    std::vector<std::size_t> shape{2 + rng.below(3), 2 + rng.below(3)};
    GradScenario s;
    s.inputs = {random_tensor(rng, shape), random_tensor(rng, shape)};
    s.build = weighted(rng, shape, [](Tape& t, const std::vector<Var>& in) {
      return t.mul(in[0], in[1]);
    });
    return s;
  });

  suite.run("scale", [](Rng& rng) {
    std::vector<std::size_t> shape{3, 2};
    const double k = rng.uniform(-2.0, 2.0);
    GradScenario s;
    s.inputs = {random_tensor(rng, shape)};
    s.build = weighted(rng, shape, [k](Tape& t, const std::vector<Var>& in) {
      return t.scale(in[0], k);
    });
    return s;
  });

  suite.run("matmul", [](Rng& rng) {
    const std::size_t m = 2 + rng.below(3), k = 2 + rng.below(3),
                      n = 2 + rng.below(3);
    GradScenario s;
    s.inputs = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
    s.build = weighted(rng, {m, n}, [](Tape& t, const std::vector<Var>& in) {
      return t.matmul(in[0], in[1]);
    });
    return s;
  });

  suite.run("relu", [](Rng& rng) {
    std::vector<std::size_t> shape{3, 4};
    GradScenario s;
    s.inputs = {random_nonzero(rng, shape, 0.05)};
    s.build = weighted(rng, shape, [](Tape& t, const std::vector<Var>& in) {
      return t.relu(in[0]);
    });
    return s;
  });

  suite.run("reshape", [](Rng& rng) {
    GradScenario s;
    s.inputs = {random_tensor(rng, {2, 6})};
    s.build = weighted(rng, {3, 4}, [](Tape& t, const std::vector<Var>& in) {
      return t.reshape(in[0], {3, 4});
    });
    return s;
  });

  suite.run("vector_norm", [](Rng& rng) {
    Tensor x = random_tensor(rng, {4, 3});
    set_row_norms(rng, x, 0.2, 2.0);
    GradScenario s;
    s.inputs = {x};
    s.build = weighted(rng, {4}, [](Tape& t, const std::vector<Var>& in) {
      return t.vector_norm(in[0]);
    });
    return s;
  });

  suite.run("softmax", [](Rng& rng) {
    const std::size_t axis = rng.below(2);
    std::vector<std::size_t> shape{3, 4};
    GradScenario s;
    s.inputs = {random_tensor(rng, shape, -2.0, 2.0)};
    s.build = weighted(rng, shape, [axis](Tape& t, const std::vector<Var>& in) {
      return t.softmax(in[0], axis);
    });
    return s;
  });

  suite.run("pad2d", [](Rng& rng) {
    GradScenario s;
    s.inputs = {random_tensor(rng, {2, 3, 4})};
    s.build = weighted(rng, {2, 7, 8}, [](Tape& t, const std::vector<Var>& in) {
      return t.pad2d(in[0], 2);
    });
    return s;
  });

  suite.run("conv2d", [](Rng& rng) {
    const std::size_t stride = 1 + rng.below(2);
    const std::size_t H = 9 + rng.below(4), W = 9 + rng.below(4);
    const std::size_t oh = (H - 9) / stride + 1, ow = (W - 9) / stride + 1;
    GradScenario s;
    s.inputs = {random_tensor(rng, {1, H, W}), random_tensor(rng, {2, 1, 9, 9})};
    s.build = weighted(rng, {2, oh, ow},
                       [stride](Tape& t, const std::vector<Var>& in) {
                         return t.conv2d(in[0], in[1], stride);
                       });
    return s;
  });

  suite.run("channel_bias", [](Rng& rng) {
    GradScenario s;
    s.inputs = {random_tensor(rng, {3, 2, 4}), random_tensor(rng, {3})};
    s.build = weighted(rng, {3, 2, 4}, [](Tape& t, const std::vector<Var>& in) {
      return t.channel_bias(in[0], in[1]);
    });
    return s;
  });

  suite.run("capsules_from_featuremap", [](Rng& rng) {
    GradScenario s;
    s.inputs = {random_tensor(rng, {6, 2, 3})};
    s.build = weighted(rng, {12, 3}, [](Tape& t, const std::vector<Var>& in) {
      return t.capsules_from_featuremap(in[0], 2, 3);
    });
    return s;
  });

  suite.run("squash", [](Rng& rng) {
    Tensor x = random_tensor(rng, {4, 5});
    set_row_norms(rng, x, 0.2, 3.0);
    GradScenario s;
    s.inputs = {x};
    s.build = weighted(rng, {4, 5}, [](Tape& t, const std::vector<Var>& in) {
      return t.squash(in[0]);
    });
    return s;
  });

  suite.run("ci_squash", [](Rng& rng) {
    const double bar = 6.5;
    Tensor x = random_tensor(rng, {4, 5});
    // Half the rows below the bar, half above, none within 0.1 of it.
    const std::size_t d = 5;
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += x[r * d + c] * x[r * d + c];
      s = std::sqrt(std::max(s, 1e-9));
      const double target = r % 2 == 0 ? rng.uniform(0.3, bar - 0.1)
                                       : rng.uniform(bar + 0.1, 2.0 * bar);
      for (std::size_t c = 0; c < d; ++c) x[r * d + c] *= target / s;
    }
    GradScenario s;
    s.inputs = {x};
    s.build = weighted(rng, {4, 5}, [bar](Tape& t, const std::vector<Var>& in) {
      return t.ci_squash(in[0], bar);
    });
    return s;
  });

  suite.run("power_activation", [](Rng& rng) {
    const int n = 2 + static_cast<int>(rng.below(8));
    Tensor x = random_tensor(rng, {4, 5});
    set_row_norms(rng, x, 0.15, 0.95);
    GradScenario s;
    s.inputs = {x};
    s.build = weighted(rng, {4, 5}, [n](Tape& t, const std::vector<Var>& in) {
      return t.power_activation(in[0], n);
    });
    return s;
  });

  suite.run("capsule_votes", [](Rng& rng) {
    const std::size_t n_in = 3, n_out = 2, d_in = 3, d_out = 4;
    GradScenario s;
    s.inputs = {random_tensor(rng, {n_in, d_in}),
                random_tensor(rng, {n_in, n_out, d_out, d_in})};
    s.build = weighted(rng, {n_in, n_out, d_out},
                       [](Tape& t, const std::vector<Var>& in) {
                         return t.capsule_votes(in[0], in[1]);
                       });
    return s;
  });

  suite.run("coeff_vote_sum", [](Rng& rng) {
    const std::size_t n_in = 4, n_out = 3, d = 3;
    GradScenario s;
    s.inputs = {random_tensor(rng, {n_in, n_out}, 0.0, 1.0),
                random_tensor(rng, {n_in, n_out, d})};
    s.build = weighted(rng, {n_out, d}, [](Tape& t, const std::vector<Var>& in) {
      return t.coeff_vote_sum(in[0], in[1]);
    });
    return s;
  });

  suite.run("vote_agreement", [](Rng& rng) {
    const std::size_t n_in = 4, n_out = 3, d = 3;
    GradScenario s;
    s.inputs = {random_tensor(rng, {n_in, n_out, d}), random_tensor(rng, {n_out, d})};
    s.build = weighted(rng, {n_in, n_out}, [](Tape& t, const std::vector<Var>& in) {
      return t.vote_agreement(in[0], in[1]);
    });
    return s;
  });

  suite.run("margin_loss", [](Rng& rng) {
    const std::size_t k = 10;
    Tensor acts({k});
    // Keep activations away from the hinge corners at m_minus and m_plus.
    for (double& v : acts.storage()) {
      do {
        v = rng.uniform(0.0, 1.0);
      } while (std::fabs(v - 0.9) < 0.02 || std::fabs(v - 0.1) < 0.02);
    }
    std::vector<int> labels{static_cast<int>(rng.below(k))};
    if (rng.bernoulli(0.5)) {
      int second;
      do {
        second = static_cast<int>(rng.below(k));
      } while (second == labels[0]);
      labels.push_back(second);
    }
    GradScenario s;
    s.inputs = {acts};
    s.build = [labels](Tape& t, const std::vector<Var>& in) {
      return t.margin_loss(in[0], labels, 0.9, 0.1, 0.5);
    };
    return s;
  });

  suite.run("row_scale", [](Rng& rng) {
    Tensor scales = random_tensor(rng, {4}, 0.0, 2.0);
    GradScenario s;
    s.inputs = {random_tensor(rng, {4, 3})};
    s.build = weighted(rng, {4, 3},
                       [scales](Tape& t, const std::vector<Var>& in) {
                         return t.row_scale(in[0], scales);
                       });
    return s;
  });

  return suite.results;
}

}  // namespace capsroute
