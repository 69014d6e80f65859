#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

class Tape;

/// Handle to a tensor recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

/// Reverse-mode differentiation tape. Operations append a node holding the
/// forward value plus a backward closure; backward() replays the closures in
/// exact reverse insertion order, which is reverse topological order by
/// construction. One tape records one forward pass.
class Tape {
 public:
  Var input(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return input(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root with respect to v.
  const Tensor& grad(Var v) const;

  /// Reverse pass from a scalar root. Seeds d(root)/d(root) = 1 and
  /// accumulates adjoints into every gradient-requiring node.
  void backward(Var root);

  std::size_t node_count() const { return nodes_.size(); }

  // Elementwise arithmetic. Shapes must match exactly; there is no
  // broadcasting beyond the scalar forms below.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double k);
  Var add_scalar(Var a, double k);
  /// Elementwise product with a constant tensor (no gradient into the mask).
  Var elem_scale(Var a, Tensor mask);
  /// Scales row r of a [N x d] tensor by scales[r]; used for capsule-wise
  /// dropout. No gradient into the scales.
  Var row_scale(Var a, Tensor scales);

  Var matmul(Var a, Var b);
  Var relu(Var a);
  Var reshape(Var a, std::vector<std::size_t> new_shape);
  Var sum(Var a);                       // total -> rank-0 scalar
  Var vector_norm(Var a);               // Euclidean norm along the last axis
  Var softmax(Var a, std::size_t axis); // stabilized by max subtraction

  /// Zero padding of a [C x H x W] tensor on both spatial borders.
  Var pad2d(Var a, std::size_t pad);
  /// Valid (no padding) cross-correlation of [C_in x H x W] with
  /// [C_out x C_in x KH x KW] kernels. Stride 1 or 2.
  Var conv2d(Var input, Var kernels, std::size_t stride);
  /// Adds b[c] to every spatial position of channel c.
  Var channel_bias(Var x, Var b);

  /// Rearranges a [channels*dim x H x W] feature map into
  /// [channels*H*W x dim] capsule vectors. Capsule (ch, y, x) gets index
  /// ch*H*W + y*W + x; component d comes from feature channel ch*dim + d.
  Var capsules_from_featuremap(Var x, std::size_t channels, std::size_t dim);

  // Vector activations applied independently along the last axis.
  Var squash(Var s);
  Var ci_squash(Var s, double bar, int exponent = 3);
  Var power_activation(Var u, int n);

  // Routing primitives.
  /// votes[i,j,:] = w[i,j] * u[i] for u [N_in x d_in], w [N_in x N_out x d_out x d_in].
  Var capsule_votes(Var u, Var w);
  /// s[j,:] = sum_i c[i,j] * v[i,j,:] for c [N_in x N_out], v [N_in x N_out x d].
  Var coeff_vote_sum(Var c, Var v);
  /// a[i,j] = dot(v[i,j,:], u[j,:]).
  Var vote_agreement(Var v, Var u);

  /// Multi-label margin loss over class activations a[k]:
  ///   sum_k T_k*max(0, m_plus - a_k)^2 + lambda_down*(1-T_k)*max(0, a_k - m_minus)^2
  Var margin_loss(Var activations, const std::vector<int>& labels,
                  double m_plus, double m_minus, double lambda_down);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad);
  void record(std::function<void(Tape&)> step) {
    backward_steps_.push_back(std::move(step));
  }
  Tensor& grad_buf(Var v) { return nodes_[v.id].grad; }

  std::vector<Node> nodes_;
  std::vector<std::function<void(Tape&)>> backward_steps_;
};

}  // namespace capsroute
