#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "capsroute/activations.hpp"
#include "capsroute/rng.hpp"
#include "capsroute/tape.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// Architecture description. Defaults follow the reference capsule network:
/// two 9x9 convolutions (stride 1 then 2), 8-dimensional primary capsules,
/// 16-dimensional class capsules, three routing iterations.
struct NetworkConfig {
  std::size_t in_channels = 1;
  std::size_t in_h = 28;
  std::size_t in_w = 28;
  std::size_t conv1_channels = 256;
  std::size_t conv1_pad = 0;  // zero padding before conv1 (4 keeps 32x32 CIFAR maps at 32x32)
  std::size_t kernel = 9;
  std::size_t prim_channels = 32;  // capsule channels sliced from conv2
  std::size_t prim_dim = 8;
  std::size_t digit_dim = 16;
  std::size_t num_classes = 10;
  int routing_iters = 3;
  ActivationFn activation{};

  std::size_t conv1_out_h() const { return in_h + 2 * conv1_pad - kernel + 1; }
  std::size_t conv1_out_w() const { return in_w + 2 * conv1_pad - kernel + 1; }
  std::size_t prim_grid_h() const { return (conv1_out_h() - kernel) / 2 + 1; }
  std::size_t prim_grid_w() const { return (conv1_out_w() - kernel) / 2 + 1; }
  std::size_t num_primary() const {
    return prim_channels * prim_grid_h() * prim_grid_w();
  }

  void validate() const;
};

/// Trainable weights.
struct NetworkParams {
  Tensor conv1_w;   // [conv1_channels x in_channels x 9 x 9]
  Tensor conv1_b;   // [conv1_channels]
  Tensor conv2_w;   // [prim_channels*prim_dim x conv1_channels x 9 x 9]
  Tensor conv2_b;   // [prim_channels*prim_dim]
  Tensor routing_w; // [N_primary x num_classes x digit_dim x prim_dim]

  static NetworkParams init(const NetworkConfig& cfg, Rng& rng,
                            double routing_w_stddev = 0.1);

  std::array<std::pair<const char*, Tensor*>, 5> entries();
  std::array<std::pair<const char*, const Tensor*>, 5> entries() const;
  std::size_t total_size() const;
};

/// Per-forward-pass routing artifacts, kept for analysis.
struct CapsuleLayerState {
  Tensor votes;         // [N_in x N_out x d_out]
  Tensor logits;        // final b
  Tensor coefficients;  // final-iteration c
  std::vector<Tensor> coefficients_per_iteration;
  Tensor sums;          // s_j
  Tensor outputs;       // u_j
};

/// Tape handles produced by dynamic_routing.
struct RoutingVars {
  Var votes;
  Var logits;
  Var coefficients;
  std::vector<Var> coefficients_per_iteration;
  Var sums;
  Var outputs;
};

/// Routing-by-agreement between two capsule layers. Votes are computed once;
/// each iteration softmax-normalizes the logits over the output axis, forms
/// the coefficient-weighted vote sum, squashes it, and (except after the last
/// iteration) adds the vote/output agreement back into the logits. The whole
/// loop is unrolled on the tape, so gradients flow through every iteration.
RoutingVars dynamic_routing(Tape& tape, Var capsules_in, Var w, int iterations);

CapsuleLayerState extract_state(const Tape& tape, const RoutingVars& vars);

/// Tape handles for every stage of the network forward pass.
struct ForwardVars {
  Var image;
  Var conv1;        // post-ReLU
  Var primary_pre;  // capsule vectors before activation [N x prim_dim]
  Var primary;      // after the configured activation (what routing consumes)
  RoutingVars routing;
  Var class_activations;  // [num_classes], norms of the class capsules
};

struct BoundParams {
  Var conv1_w, conv1_b, conv2_w, conv2_b, routing_w;
};

BoundParams bind_params(Tape& tape, const NetworkParams& params, bool requires_grad);

/// Builds the full forward graph for one image. An optional per-capsule
/// dropout scale (length N_primary) multiplies the primary capsules; an
/// optional elementwise mask does the same per component.
ForwardVars network_forward(Tape& tape, const NetworkConfig& cfg,
                            const BoundParams& params, Var image,
                            const Tensor* capsule_dropout_scale = nullptr,
                            const Tensor* element_dropout_mask = nullptr);

/// Value-level network: owns config plus parameters and runs inference.
class CapsuleNetwork {
 public:
  CapsuleNetwork(NetworkConfig cfg, NetworkParams params);
  static CapsuleNetwork random_init(NetworkConfig cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  NetworkParams& params() { return params_; }
  const NetworkParams& params() const { return params_; }

  struct Evaluation {
    Tensor class_activations;  // [num_classes]
    Tensor primary;            // [N_primary x prim_dim]
    CapsuleLayerState routing;
  };

  Evaluation evaluate(const Tensor& image) const;
  int predict(const Tensor& image) const;

 private:
  NetworkConfig cfg_;
  NetworkParams params_;
};

}  // namespace capsroute
