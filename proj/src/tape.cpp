#include "capsroute/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace capsroute {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad);
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.requires_grad) {
    throw std::logic_error("grad: node does not require gradients");
  }
  return n.grad;
}

void Tape::backward(Var root) {
  Node& r = nodes_[root.id];
  if (r.value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_string(r.value.shape()));
  }
  if (!r.requires_grad) {
    throw std::logic_error("backward: root does not require gradients");
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor::zeros(n.value.shape());
  }
  r.grad[0] = 1.0;
  for (auto it = backward_steps_.rbegin(); it != backward_steps_.rend(); ++it) {
    (*it)(*this);
  }
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  check_same_shape("add", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, b, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    });
  }
  return o;
}

Var Tape::sub(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  check_same_shape("sub", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, b, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      }
    });
  }
  return o;
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  check_same_shape("mul", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, b, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& A = t.value(a);
      const Tensor& B = t.value(b);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * B[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * A[i];
      }
    });
  }
  return o;
}

Var Tape::scale(Var a, double k) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * k;
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o, k](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * k;
    });
  }
  return o;
}

Var Tape::add_scalar(Var a, double k) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + k;
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
  }
  return o;
}

Var Tape::elem_scale(Var a, Tensor mask) {
  const Tensor& A = value(a);
  check_same_shape("elem_scale", A, mask);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * mask[i];
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o, m = std::move(mask)](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * m[i];
    });
  }
  return o;
}

Var Tape::row_scale(Var a, Tensor scales) {
  const Tensor& A = value(a);
  if (A.rank() != 2 || scales.rank() != 1 || scales.dim(0) != A.dim(0)) {
    throw std::invalid_argument("row_scale: need [NxD] and [N], got " +
                                shape_string(A.shape()) + " and " +
                                shape_string(scales.shape()));
  }
  const std::size_t n = A.dim(0), d = A.dim(1);
  Tensor out(A.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out.at2(r, c) = A.at2(r, c) * scales[r];
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o, s = std::move(scales), n, d](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) da.at2(r, c) += g.at2(r, c) * s[r];
    });
  }
  return o;
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_string(A.shape()) + " x " +
                                shape_string(B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A.at2(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at2(i, j) += av * B.at2(p, j);
    }
  }
  bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, b, o, m, k, n](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& A = t.value(a);
      const Tensor& B = t.value(b);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);  // dA = g * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g.at2(i, j) * B.at2(p, j);
            da.at2(i, p) += s;
          }
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);  // dB = A^T * g
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += A.at2(i, p) * g.at2(i, j);
            db.at2(p, j) += s;
          }
      }
    });
  }
  return o;
}

Var Tape::relu(Var a) {
  const Tensor& A = value(a);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    // Subgradient at 0 is 0.
    record([a, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& A = t.value(a);
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A[i] > 0.0) da[i] += g[i];
    });
  }
  return o;
}

Var Tape::reshape(Var a, std::vector<std::size_t> new_shape) {
  Tensor out = value(a).reshaped(std::move(new_shape));
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
  }
  return o;
}

Var Tape::sum(Var a) {
  const Tensor& A = value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += A[i];
  bool rg = requires_grad(a);
  Var o = push(Tensor::scalar(s), rg);
  if (rg) {
    record([a, o](Tape& t) {
      const double g = t.nodes_[o.id].grad[0];
      Tensor& da = t.grad_buf(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
    });
  }
  return o;
}

Var Tape::vector_norm(Var a) {
  const Tensor& A = value(a);
  if (A.rank() < 1) {
    throw std::invalid_argument("vector_norm: need rank >= 1");
  }
  const std::size_t d = A.dim(A.rank() - 1);
  const std::size_t rows = A.size() / d;
  std::vector<std::size_t> out_shape(A.shape().begin(), A.shape().end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = A[r * d + c];
      s += v * v;
    }
    out[r] = std::sqrt(s);
  }
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    // Gradient at the zero vector is defined as zero.
    record([a, o, rows, d](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& A = t.value(a);
      const Tensor& N = t.value(o);
      Tensor& da = t.grad_buf(a);
      for (std::size_t r = 0; r < rows; ++r) {
        if (N[r] == 0.0) continue;
        const double gn = g[r] / N[r];
        for (std::size_t c = 0; c < d; ++c) da[r * d + c] += gn * A[r * d + c];
      }
    });
  }
  return o;
}

Var Tape::softmax(Var a, std::size_t axis) {
  const Tensor& A = value(a);
  if (axis >= A.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " out of range for " + shape_string(A.shape()));
  }
  const std::size_t len = A.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= A.dim(i);
  for (std::size_t i = axis + 1; i < A.rank(); ++i) inner *= A.dim(i);

  Tensor out(A.shape());
  for (std::size_t ou = 0; ou < outer; ++ou) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = ou * len * inner + in;
      double mx = A[base];
      for (std::size_t k = 1; k < len; ++k)
        mx = std::max(mx, A[base + k * inner]);
      double denom = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(A[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= denom;
    }
  }
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o, outer, inner, len](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& Y = t.value(o);
      Tensor& da = t.grad_buf(a);
      for (std::size_t ou = 0; ou < outer; ++ou) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = ou * len * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k)
            dot += g[base + k * inner] * Y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t idx = base + k * inner;
            da[idx] += Y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return o;
}

Var Tape::pad2d(Var a, std::size_t pad) {
  const Tensor& A = value(a);
  if (A.rank() != 3) {
    throw std::invalid_argument("pad2d: need [CxHxW], got " +
                                shape_string(A.shape()));
  }
  const std::size_t C = A.dim(0), H = A.dim(1), W = A.dim(2);
  Tensor out({C, H + 2 * pad, W + 2 * pad});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        out.at3(c, h + pad, w + pad) = A.at3(c, h, w);
  bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([a, o, C, H, W, pad](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& da = t.grad_buf(a);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w)
            da.at3(c, h, w) += g.at3(c, h + pad, w + pad);
    });
  }
  return o;
}

Var Tape::conv2d(Var input, Var kernels, std::size_t stride) {
  const Tensor& X = value(input);
  const Tensor& K = value(kernels);
  if (X.rank() != 3 || K.rank() != 4) {
    throw std::invalid_argument("conv2d: need input [CxHxW] and kernels "
                                "[C_out x C_in x KH x KW], got " +
                                shape_string(X.shape()) + " and " +
                                shape_string(K.shape()));
  }
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv2d: stride must be 1 or 2");
  }
  const std::size_t ci_n = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t co_n = K.dim(0), kh_n = K.dim(2), kw_n = K.dim(3);
  if (K.dim(1) != ci_n) {
    throw std::invalid_argument("conv2d: kernel input channels " +
                                std::to_string(K.dim(1)) + " != input channels " +
                                std::to_string(ci_n));
  }
  if (H < kh_n || W < kw_n) {
    throw std::invalid_argument("conv2d: input " + shape_string(X.shape()) +
                                " smaller than kernel " + shape_string(K.shape()));
  }
  const std::size_t oh_n = (H - kh_n) / stride + 1;
  const std::size_t ow_n = (W - kw_n) / stride + 1;

  // Cross-correlation, valid padding.
  Tensor out({co_n, oh_n, ow_n});
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* kbase = K.data() + ((co * ci_n + ci) * kh_n) * kw_n;
      for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
          double s = 0.0;
          for (std::size_t kh = 0; kh < kh_n; ++kh) {
            const double* xrow = X.data() + (ci * H + oh * stride + kh) * W + ow * stride;
            const double* krow = kbase + kh * kw_n;
            for (std::size_t kw = 0; kw < kw_n; ++kw) s += xrow[kw] * krow[kw];
          }
          out.at3(co, oh, ow) += s;
        }
      }
    }
  }
  bool rg = requires_grad(input) || requires_grad(kernels);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([input, kernels, o, ci_n, H, W, co_n, kh_n, kw_n, oh_n, ow_n,
            stride](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& X = t.value(input);
      const Tensor& K = t.value(kernels);
      const bool need_dx = t.requires_grad(input);
      const bool need_dk = t.requires_grad(kernels);
      Tensor* dx = need_dx ? &t.grad_buf(input) : nullptr;
      Tensor* dk = need_dk ? &t.grad_buf(kernels) : nullptr;
      for (std::size_t co = 0; co < co_n; ++co) {
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const double gv = g.at3(co, oh, ow);
            if (gv == 0.0) continue;
            for (std::size_t ci = 0; ci < ci_n; ++ci) {
              for (std::size_t kh = 0; kh < kh_n; ++kh) {
                const std::size_t xoff = (ci * H + oh * stride + kh) * W + ow * stride;
                const std::size_t koff = ((co * ci_n + ci) * kh_n + kh) * kw_n;
                if (need_dx) {
                  double* dxrow = dx->data() + xoff;
                  const double* krow = K.data() + koff;
                  for (std::size_t kw = 0; kw < kw_n; ++kw)
                    dxrow[kw] += gv * krow[kw];
                }
                if (need_dk) {
                  double* dkrow = dk->data() + koff;
                  const double* xrow = X.data() + xoff;
                  for (std::size_t kw = 0; kw < kw_n; ++kw)
                    dkrow[kw] += gv * xrow[kw];
                }
              }
            }
          }
        }
      }
    });
  }
  return o;
}

Var Tape::channel_bias(Var x, Var b) {
  const Tensor& X = value(x);
  const Tensor& B = value(b);
  if (X.rank() != 3 || B.rank() != 1 || B.dim(0) != X.dim(0)) {
    throw std::invalid_argument("channel_bias: need [CxHxW] and [C], got " +
                                shape_string(X.shape()) + " and " +
                                shape_string(B.shape()));
  }
  const std::size_t C = X.dim(0), hw = X.dim(1) * X.dim(2);
  Tensor out(X.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      out[c * hw + i] = X[c * hw + i] + B[c];
  bool rg = requires_grad(x) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([x, b, o, C, hw](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      if (t.requires_grad(x)) {
        Tensor& dx = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += g[c * hw + i];
          db[c] += s;
        }
      }
    });
  }
  return o;
}

Var Tape::capsules_from_featuremap(Var x, std::size_t channels, std::size_t dim) {
  const Tensor& X = value(x);
  if (X.rank() != 3 || X.dim(0) != channels * dim) {
    throw std::invalid_argument("capsules_from_featuremap: feature map " +
                                shape_string(X.shape()) + " does not slice into " +
                                std::to_string(channels) + " capsule channels of dim " +
                                std::to_string(dim));
  }
  const std::size_t H = X.dim(1), W = X.dim(2);
  Tensor out({channels * H * W, dim});
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t cap = (ch * H + y) * W + xx;
        for (std::size_t d = 0; d < dim; ++d)
          out.at2(cap, d) = X.at3(ch * dim + d, y, xx);
      }
  bool rg = requires_grad(x);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([x, o, channels, dim, H, W](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      Tensor& dx = t.grad_buf(x);
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::size_t cap = (ch * H + y) * W + xx;
            for (std::size_t d = 0; d < dim; ++d)
              dx.at3(ch * dim + d, y, xx) += g.at2(cap, d);
          }
    });
  }
  return o;
}

namespace {

// Shared core for norm-gain activations u = f(||s||) * s/||s|| applied along
// the last axis. The gain callback returns f(x) and d/dx f(x).
struct VecRows {
  std::size_t rows;
  std::size_t d;
};

VecRows vec_rows(const Tensor& t, const char* op) {
  if (t.rank() < 1 || t.dim(t.rank() - 1) == 0) {
    throw std::invalid_argument(std::string(op) + ": need a trailing vector axis");
  }
  const std::size_t d = t.dim(t.rank() - 1);
  return {t.size() / d, d};
}

}  // namespace

Var Tape::squash(Var s) {
  const Tensor& S = value(s);
  const auto [rows, d] = vec_rows(S, "squash");
  Tensor out(S.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double x2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = S[r * d + c];
      x2 += v * v;
    }
    // u = s * x / (1 + x^2); norm(u) = x^2/(1+x^2); squash(0) = 0.
    const double x = std::sqrt(x2);
    const double k = x / (1.0 + x2);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = S[r * d + c] * k;
  }
  bool rg = requires_grad(s);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([s, o, rows, d](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& S = t.value(s);
      Tensor& ds = t.grad_buf(s);
      for (std::size_t r = 0; r < rows; ++r) {
        double x2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double v = S[r * d + c];
          x2 += v * v;
        }
        const double x = std::sqrt(x2);
        if (x == 0.0) continue;  // jacobian vanishes at the origin
        const double denom = 1.0 + x2;
        const double f_over_x = x / denom;                    // f(x)/x
        const double fprime = (2.0 * x) / (denom * denom);    // f'(x)
        double udot = 0.0;  // (s_hat . g)
        for (std::size_t c = 0; c < d; ++c) udot += S[r * d + c] / x * g[r * d + c];
        for (std::size_t c = 0; c < d; ++c) {
          const double sh = S[r * d + c] / x;
          ds[r * d + c] += f_over_x * (g[r * d + c] - udot * sh) + fprime * udot * sh;
        }
      }
    });
  }
  return o;
}

Var Tape::ci_squash(Var s, double bar, int exponent) {
  if (bar <= 0.0) {
    throw std::invalid_argument("ci_squash: bar must be positive");
  }
  if (exponent < 1) {
    throw std::invalid_argument("ci_squash: exponent must be >= 1");
  }
  const Tensor& S = value(s);
  const auto [rows, d] = vec_rows(S, "ci_squash");
  Tensor out(S.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double x2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = S[r * d + c];
      x2 += v * v;
    }
    const double x = std::sqrt(x2);
    if (x == 0.0) continue;
    // f(x) = (min(x, bar)/bar)^p; saturates exactly at 1 for x >= bar.
    const double f = x >= bar ? 1.0 : std::pow(x / bar, exponent);
    const double k = f / x;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = S[r * d + c] * k;
  }
  bool rg = requires_grad(s);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([s, o, rows, d, bar, exponent](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& S = t.value(s);
      Tensor& ds = t.grad_buf(s);
      for (std::size_t r = 0; r < rows; ++r) {
        double x2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double v = S[r * d + c];
          x2 += v * v;
        }
        const double x = std::sqrt(x2);
        if (x == 0.0) continue;
        double f, fprime;
        if (x >= bar) {
          f = 1.0;
          fprime = 0.0;
        } else {
          f = std::pow(x / bar, exponent);
          fprime = exponent * std::pow(x / bar, exponent - 1) / bar;
        }
        const double f_over_x = f / x;
        double udot = 0.0;
        for (std::size_t c = 0; c < d; ++c) udot += S[r * d + c] / x * g[r * d + c];
        for (std::size_t c = 0; c < d; ++c) {
          const double sh = S[r * d + c] / x;
          ds[r * d + c] += f_over_x * (g[r * d + c] - udot * sh) + fprime * udot * sh;
        }
      }
    });
  }
  return o;
}

Var Tape::power_activation(Var u, int n) {
  if (n < 1) {
    throw std::invalid_argument("power_activation: n must be >= 1");
  }
  const Tensor& U = value(u);
  const auto [rows, d] = vec_rows(U, "power_activation");
  Tensor out(U.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double p2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = U[r * d + c];
      p2 += v * v;
    }
    const double p = std::sqrt(p2);
    // Power_n(u) = ||u||^n * u/||u|| = ||u||^(n-1) * u; Power_n(0) = 0.
    const double k = (p == 0.0 && n > 1) ? 0.0 : std::pow(p, n - 1);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = U[r * d + c] * k;
  }
  bool rg = requires_grad(u);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([u, o, rows, d, n](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& U = t.value(u);
      Tensor& du = t.grad_buf(u);
      for (std::size_t r = 0; r < rows; ++r) {
        if (n == 1) {
          for (std::size_t c = 0; c < d; ++c) du[r * d + c] += g[r * d + c];
          continue;
        }
        double p2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double v = U[r * d + c];
          p2 += v * v;
        }
        const double p = std::sqrt(p2);
        if (p == 0.0) continue;
        const double k = std::pow(p, n - 1);
        const double k2 = (n - 1) * std::pow(p, n - 3);
        double udot = 0.0;
        for (std::size_t c = 0; c < d; ++c) udot += U[r * d + c] * g[r * d + c];
        for (std::size_t c = 0; c < d; ++c)
          du[r * d + c] += k * g[r * d + c] + k2 * udot * U[r * d + c];
      }
    });
  }
  return o;
}

Var Tape::capsule_votes(Var u, Var w) {
  const Tensor& U = value(u);
  const Tensor& W = value(w);
  if (U.rank() != 2 || W.rank() != 4 || W.dim(0) != U.dim(0) ||
      W.dim(3) != U.dim(1)) {
    throw std::invalid_argument("capsule_votes: need u [N_in x d_in], w "
                                "[N_in x N_out x d_out x d_in], got " +
                                shape_string(U.shape()) + " and " +
                                shape_string(W.shape()));
  }
  const std::size_t n_in = U.dim(0), d_in = U.dim(1);
  const std::size_t n_out = W.dim(1), d_out = W.dim(2);
  Tensor out({n_in, n_out, d_out});
  for (std::size_t i = 0; i < n_in; ++i) {
    const double* ui = U.data() + i * d_in;
    for (std::size_t j = 0; j < n_out; ++j) {
      const double* wij = W.data() + ((i * n_out + j) * d_out) * d_in;
      double* vij = out.data() + (i * n_out + j) * d_out;
      for (std::size_t od = 0; od < d_out; ++od) {
        double s = 0.0;
        const double* wrow = wij + od * d_in;
        for (std::size_t id = 0; id < d_in; ++id) s += wrow[id] * ui[id];
        vij[od] = s;
      }
    }
  }
  bool rg = requires_grad(u) || requires_grad(w);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([u, w, o, n_in, d_in, n_out, d_out](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& U = t.value(u);
      const Tensor& W = t.value(w);
      const bool need_du = t.requires_grad(u);
      const bool need_dw = t.requires_grad(w);
      Tensor* du = need_du ? &t.grad_buf(u) : nullptr;
      Tensor* dw = need_dw ? &t.grad_buf(w) : nullptr;
      for (std::size_t i = 0; i < n_in; ++i) {
        const double* ui = U.data() + i * d_in;
        double* dui = need_du ? du->data() + i * d_in : nullptr;
        for (std::size_t j = 0; j < n_out; ++j) {
          const std::size_t wbase = ((i * n_out + j) * d_out) * d_in;
          const double* gij = g.data() + (i * n_out + j) * d_out;
          for (std::size_t od = 0; od < d_out; ++od) {
            const double gv = gij[od];
            if (gv == 0.0) continue;
            const double* wrow = W.data() + wbase + od * d_in;
            if (need_du)
              for (std::size_t id = 0; id < d_in; ++id) dui[id] += gv * wrow[id];
            if (need_dw) {
              double* dwrow = dw->data() + wbase + od * d_in;
              for (std::size_t id = 0; id < d_in; ++id) dwrow[id] += gv * ui[id];
            }
          }
        }
      }
    });
  }
  return o;
}

Var Tape::coeff_vote_sum(Var c, Var v) {
  const Tensor& C = value(c);
  const Tensor& V = value(v);
  if (C.rank() != 2 || V.rank() != 3 || V.dim(0) != C.dim(0) ||
      V.dim(1) != C.dim(1)) {
    throw std::invalid_argument("coeff_vote_sum: need c [N_in x N_out], v "
                                "[N_in x N_out x d], got " +
                                shape_string(C.shape()) + " and " +
                                shape_string(V.shape()));
  }
  const std::size_t n_in = C.dim(0), n_out = C.dim(1), d = V.dim(2);
  Tensor out({n_out, d});
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < n_out; ++j) {
      const double cij = C.at2(i, j);
      const double* vij = V.data() + (i * n_out + j) * d;
      double* sj = out.data() + j * d;
      for (std::size_t k = 0; k < d; ++k) sj[k] += cij * vij[k];
    }
  bool rg = requires_grad(c) || requires_grad(v);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([c, v, o, n_in, n_out, d](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& C = t.value(c);
      const Tensor& V = t.value(v);
      const bool need_dc = t.requires_grad(c);
      const bool need_dv = t.requires_grad(v);
      Tensor* dc = need_dc ? &t.grad_buf(c) : nullptr;
      Tensor* dv = need_dv ? &t.grad_buf(v) : nullptr;
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t j = 0; j < n_out; ++j) {
          const double* gj = g.data() + j * d;
          const double* vij = V.data() + (i * n_out + j) * d;
          if (need_dc) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += gj[k] * vij[k];
            dc->at2(i, j) += s;
          }
          if (need_dv) {
            const double cij = C.at2(i, j);
            double* dvij = dv->data() + (i * n_out + j) * d;
            for (std::size_t k = 0; k < d; ++k) dvij[k] += cij * gj[k];
          }
        }
    });
  }
  return o;
}

Var Tape::vote_agreement(Var v, Var u) {
  const Tensor& V = value(v);
  const Tensor& U = value(u);
  if (V.rank() != 3 || U.rank() != 2 || U.dim(0) != V.dim(1) ||
      U.dim(1) != V.dim(2)) {
    throw std::invalid_argument("vote_agreement: need v [N_in x N_out x d], u "
                                "[N_out x d], got " +
                                shape_string(V.shape()) + " and " +
                                shape_string(U.shape()));
  }
  const std::size_t n_in = V.dim(0), n_out = V.dim(1), d = V.dim(2);
  Tensor out({n_in, n_out});
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < n_out; ++j) {
      const double* vij = V.data() + (i * n_out + j) * d;
      const double* uj = U.data() + j * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += vij[k] * uj[k];
      out.at2(i, j) = s;
    }
  bool rg = requires_grad(v) || requires_grad(u);
  Var o = push(std::move(out), rg);
  if (rg) {
    record([v, u, o, n_in, n_out, d](Tape& t) {
      const Tensor& g = t.nodes_[o.id].grad;
      const Tensor& V = t.value(v);
      const Tensor& U = t.value(u);
      const bool need_dv = t.requires_grad(v);
      const bool need_du = t.requires_grad(u);
      Tensor* dv = need_dv ? &t.grad_buf(v) : nullptr;
      Tensor* du = need_du ? &t.grad_buf(u) : nullptr;
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t j = 0; j < n_out; ++j) {
          const double gv = g.at2(i, j);
          if (gv == 0.0) continue;
          const double* vij = V.data() + (i * n_out + j) * d;
          const double* uj = U.data() + j * d;
          if (need_dv) {
            double* dvij = dv->data() + (i * n_out + j) * d;
            for (std::size_t k = 0; k < d; ++k) dvij[k] += gv * uj[k];
          }
          if (need_du) {
            double* duj = du->data() + j * d;
            for (std::size_t k = 0; k < d; ++k) duj[k] += gv * vij[k];
          }
        }
    });
  }
  return o;
}

Var Tape::margin_loss(Var activations, const std::vector<int>& labels,
                      double m_plus, double m_minus, double lambda_down) {
  const Tensor& A = value(activations);
  if (A.rank() != 1) {
    throw std::invalid_argument("margin_loss: activations must be rank 1, got " +
                                shape_string(A.shape()));
  }
  if (labels.empty()) {
    throw std::invalid_argument("margin_loss: empty label set");
  }
  const std::size_t k_n = A.dim(0);
  std::vector<char> positive(k_n, 0);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k_n) {
      throw std::invalid_argument("margin_loss: label " + std::to_string(label) +
                                  " out of range for " + std::to_string(k_n) +
                                  " classes");
    }
    positive[static_cast<std::size_t>(label)] = 1;
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < k_n; ++k) {
    if (positive[k]) {
      const double h = std::max(0.0, m_plus - A[k]);
      loss += h * h;
    } else {
      const double h = std::max(0.0, A[k] - m_minus);
      loss += lambda_down * h * h;
    }
  }
  bool rg = requires_grad(activations);
  Var o = push(Tensor::scalar(loss), rg);
  if (rg) {
    record([activations, o, positive = std::move(positive), k_n, m_plus, m_minus,
            lambda_down](Tape& t) {
      const double g = t.nodes_[o.id].grad[0];
      const Tensor& A = t.value(activations);
      Tensor& da = t.grad_buf(activations);
      for (std::size_t k = 0; k < k_n; ++k) {
        if (positive[k]) {
          const double h = std::max(0.0, m_plus - A[k]);
          da[k] += g * (-2.0 * h);
        } else {
          const double h = std::max(0.0, A[k] - m_minus);
          da[k] += g * (2.0 * lambda_down * h);
        }
      }
    });
  }
  return o;
}

}  // namespace capsroute
