#include "capsroute/network.hpp"

#include <cmath>
#include <stdexcept>

namespace capsroute {

void NetworkConfig::validate() const {
  activation.validate();
  if (routing_iters < 1) {
    throw std::invalid_argument("network: routing_iters must be >= 1");
  }
  if (in_h + 2 * conv1_pad < kernel || in_w + 2 * conv1_pad < kernel) {
    throw std::invalid_argument("network: padded input smaller than conv1 kernel");
  }
  if (conv1_out_h() < kernel || conv1_out_w() < kernel) {
    throw std::invalid_argument("network: conv1 output smaller than conv2 kernel");
  }
  if (prim_channels == 0 || prim_dim == 0 || digit_dim == 0 || num_classes == 0) {
    throw std::invalid_argument("network: zero-sized layer");
  }
}

NetworkParams NetworkParams::init(const NetworkConfig& cfg, Rng& rng,
                                  double routing_w_stddev) {
  cfg.validate();
  NetworkParams p;
  p.conv1_w = Tensor({cfg.conv1_channels, cfg.in_channels, cfg.kernel, cfg.kernel});
  p.conv1_b = Tensor({cfg.conv1_channels});
  const std::size_t conv2_out = cfg.prim_channels * cfg.prim_dim;
  p.conv2_w = Tensor({conv2_out, cfg.conv1_channels, cfg.kernel, cfg.kernel});
  p.conv2_b = Tensor({conv2_out});
  p.routing_w =
      Tensor({cfg.num_primary(), cfg.num_classes, cfg.digit_dim, cfg.prim_dim});

  const double s1 = std::sqrt(2.0 / (cfg.in_channels * cfg.kernel * cfg.kernel));
  for (double& v : p.conv1_w.storage()) v = rng.normal(0.0, s1);
  const double s2 = std::sqrt(2.0 / (cfg.conv1_channels * cfg.kernel * cfg.kernel));
  for (double& v : p.conv2_w.storage()) v = rng.normal(0.0, s2);
  for (double& v : p.routing_w.storage()) v = rng.normal(0.0, routing_w_stddev);
  return p;
}

std::array<std::pair<const char*, Tensor*>, 5> NetworkParams::entries() {
  return {{{"conv1_w", &conv1_w},
           {"conv1_b", &conv1_b},
           {"conv2_w", &conv2_w},
           {"conv2_b", &conv2_b},
           {"routing_w", &routing_w}}};
}

std::array<std::pair<const char*, const Tensor*>, 5> NetworkParams::entries() const {
  return {{{"conv1_w", &conv1_w},
           {"conv1_b", &conv1_b},
           {"conv2_w", &conv2_w},
           {"conv2_b", &conv2_b},
           {"routing_w", &routing_w}}};
}

std::size_t NetworkParams::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries()) n += t->size();
  return n;
}

RoutingVars dynamic_routing(Tape& tape, Var capsules_in, Var w, int iterations) {
  if (iterations < 1) {
    throw std::invalid_argument("dynamic_routing: iterations must be >= 1");
  }
  RoutingVars out;
  out.votes = tape.capsule_votes(capsules_in, w);
  const std::size_t n_in = tape.value(out.votes).dim(0);
  const std::size_t n_out = tape.value(out.votes).dim(1);

  Var b = tape.constant(Tensor::zeros({n_in, n_out}));
  for (int it = 0; it < iterations; ++it) {
    Var c = tape.softmax(b, 1);
    out.coefficients_per_iteration.push_back(c);
    Var s = tape.coeff_vote_sum(c, out.votes);
    if (!tape.value(s).all_finite()) {
      throw std::runtime_error("dynamic_routing: non-finite capsule sum at iteration " +
                               std::to_string(it + 1));
    }
    Var u = tape.squash(s);
    out.coefficients = c;
    out.sums = s;
    out.outputs = u;
    if (it + 1 < iterations) {
      b = tape.add(b, tape.vote_agreement(out.votes, u));
    }
  }
  out.logits = b;
  return out;
}

CapsuleLayerState extract_state(const Tape& tape, const RoutingVars& vars) {
  CapsuleLayerState st;
  st.votes = tape.value(vars.votes);
  st.logits = tape.value(vars.logits);
  st.coefficients = tape.value(vars.coefficients);
  for (Var c : vars.coefficients_per_iteration) {
    st.coefficients_per_iteration.push_back(tape.value(c));
  }
  st.sums = tape.value(vars.sums);
  st.outputs = tape.value(vars.outputs);
  return st;
}

BoundParams bind_params(Tape& tape, const NetworkParams& params, bool requires_grad) {
  BoundParams b;
  b.conv1_w = tape.input(params.conv1_w, requires_grad);
  b.conv1_b = tape.input(params.conv1_b, requires_grad);
  b.conv2_w = tape.input(params.conv2_w, requires_grad);
  b.conv2_b = tape.input(params.conv2_b, requires_grad);
  b.routing_w = tape.input(params.routing_w, requires_grad);
  return b;
}

ForwardVars network_forward(Tape& tape, const NetworkConfig& cfg,
                            const BoundParams& params, Var image,
                            const Tensor* capsule_dropout_scale,
                            const Tensor* element_dropout_mask) {
  const Tensor& img = tape.value(image);
  if (img.rank() != 3 || img.dim(0) != cfg.in_channels || img.dim(1) != cfg.in_h ||
      img.dim(2) != cfg.in_w) {
    throw std::invalid_argument("network_forward: image " + shape_string(img.shape()) +
                                " does not match configured input [" +
                                std::to_string(cfg.in_channels) + "x" +
                                std::to_string(cfg.in_h) + "x" +
                                std::to_string(cfg.in_w) + "]");
  }
  ForwardVars fv;
  fv.image = image;
  Var x = image;
  if (cfg.conv1_pad > 0) x = tape.pad2d(x, cfg.conv1_pad);
  x = tape.conv2d(x, params.conv1_w, 1);
  x = tape.channel_bias(x, params.conv1_b);
  fv.conv1 = tape.relu(x);
  Var c2 = tape.conv2d(fv.conv1, params.conv2_w, 2);
  c2 = tape.channel_bias(c2, params.conv2_b);
  fv.primary_pre = tape.capsules_from_featuremap(c2, cfg.prim_channels, cfg.prim_dim);
  fv.primary = cfg.activation.apply(tape, fv.primary_pre);
  Var routed_input = fv.primary;
  if (capsule_dropout_scale != nullptr) {
    routed_input = tape.row_scale(routed_input, *capsule_dropout_scale);
  }
  if (element_dropout_mask != nullptr) {
    routed_input = tape.elem_scale(routed_input, *element_dropout_mask);
  }
  fv.routing = dynamic_routing(tape, routed_input, params.routing_w, cfg.routing_iters);
  fv.class_activations = tape.vector_norm(fv.routing.outputs);
  return fv;
}

CapsuleNetwork::CapsuleNetwork(NetworkConfig cfg, NetworkParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

CapsuleNetwork CapsuleNetwork::random_init(NetworkConfig cfg, std::uint64_t seed) {
  Rng rng(seed);
  NetworkParams params = NetworkParams::init(cfg, rng);
  return CapsuleNetwork(std::move(cfg), std::move(params));
}

CapsuleNetwork::Evaluation CapsuleNetwork::evaluate(const Tensor& image) const {
  Tape tape;
  BoundParams bound = bind_params(tape, params_, false);
  Var img = tape.constant(image);
  ForwardVars fv = network_forward(tape, cfg_, bound, img);
  Evaluation ev;
  ev.class_activations = tape.value(fv.class_activations);
  ev.primary = tape.value(fv.primary);
  ev.routing = extract_state(tape, fv.routing);
  return ev;
}

int CapsuleNetwork::predict(const Tensor& image) const {
  const Tensor acts = evaluate(image).class_activations;
  std::size_t best = 0;
  for (std::size_t k = 1; k < acts.size(); ++k) {
    if (acts[k] > acts[best]) best = k;
  }
  return static_cast<int>(best);
}

}  // namespace capsroute
