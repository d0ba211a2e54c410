#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <type_traits>
#include <vector>

#include "dcs/tensor.hpp"

namespace dcs {

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstRowMap = Eigen::Map<const RowMat<S>>;

// Patch matrix layout: K = C*k*k rows, P = H1*W1 columns, row-major.
template <typename S>
inline void im2col(const S* img, int C, int H, int W, int k, int stride, int pad, int H1, int W1,
                   S* cols) {
  const int P = H1 * W1;
  for (int c = 0; c < C; ++c) {
    const S* plane = img + static_cast<std::int64_t>(c) * H * W;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        S* row = cols + static_cast<std::int64_t>((c * k + ki) * k + kj) * P;
        for (int oh = 0; oh < H1; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::memset(row + oh * W1, 0, sizeof(S) * static_cast<std::size_t>(W1));
            continue;
          }
          const S* src = plane + static_cast<std::int64_t>(ih) * W;
          for (int ow = 0; ow < W1; ++ow) {
            const int iw = ow * stride - pad + kj;
            row[oh * W1 + ow] = (iw >= 0 && iw < W) ? src[iw] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
inline void col2im_add(const S* cols, int C, int H, int W, int k, int stride, int pad, int H1,
                       int W1, S* img) {
  const int P = H1 * W1;
  for (int c = 0; c < C; ++c) {
    S* plane = img + static_cast<std::int64_t>(c) * H * W;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const S* row = cols + static_cast<std::int64_t>((c * k + ki) * k + kj) * P;
        for (int oh = 0; oh < H1; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          S* dst = plane + static_cast<std::int64_t>(ih) * W;
          for (int ow = 0; ow < W1; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * W1 + ow];
          }
        }
      }
    }
  }
}

template <typename S>
inline void expect_rank(const Tensor<S>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw DimError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                   std::to_string(t.rank()));
}

template <typename S>
inline void expect_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) throw DimError(std::string(what) + ": shape mismatch");
}

// Folded eval-mode batchnorm coefficients: y = x*scale[c] + shift[c].
// Shared with the sparse inference engine so both paths do the exact same
// per-element arithmetic.
template <typename S>
inline void bn_fold(const S* gamma, const S* beta, const S* mean, const S* var, int C, double eps,
                    S* scale, S* shift) {
  for (int c = 0; c < C; ++c) {
    const S inv = S(1) / std::sqrt(var[c] + static_cast<S>(eps));
    const S s = (gamma ? gamma[c] : S(1)) * inv;
    scale[c] = s;
    shift[c] = (beta ? beta[c] : S(0)) - mean[c] * s;
  }
}

}  // namespace detail

// Cross-correlation of input [B,Cin,H,W] with weight [Cout,Cin,k,k].
// Output spatial side = floor((H + 2*padding - k)/stride) + 1.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, int stride, int padding) {
  detail::expect_rank(input, 4, "conv2d input");
  detail::expect_rank(weight, 4, "conv2d weight");
  const int B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin) throw DimError("conv2d: weight in-channels do not match input");
  if (weight.dim(3) != k) throw DimError("conv2d: kernel must be square");
  if (k % 2 == 0) throw DimError("conv2d: kernel size must be odd");
  if (stride < 1 || padding < 0) throw DimError("conv2d: invalid stride/padding");
  const int H1 = (H + 2 * padding - k) / stride + 1;
  const int W1 = (W + 2 * padding - k) / stride + 1;
  if (H + 2 * padding < k || W + 2 * padding < k || H1 < 1 || W1 < 1)
    throw DimError("conv2d: output would be empty");

  const int K = Cin * k * k;
  const int P = H1 * W1;
  Tensor<S> out({B, Cout, H1, W1});
  {
    std::vector<S> cols(static_cast<std::size_t>(K) * P);
    detail::ConstRowMap<S> Wm(weight.data(), Cout, K);
    for (int b = 0; b < B; ++b) {
      detail::im2col(input.data() + static_cast<std::int64_t>(b) * Cin * H * W, Cin, H, W, k,
                     stride, padding, H1, W1, cols.data());
      detail::ConstRowMap<S> Cm(cols.data(), K, P);
      detail::RowMap<S> Om(out.data() + static_cast<std::int64_t>(b) * Cout * P, Cout, P);
      Om.noalias() = Wm * Cm;
    }
  }

  detail::record<S>(out, {input, weight}, [input, weight, B, Cin, H, W, Cout, k, stride, padding,
                                           H1, W1, K, P](detail::TensorNode<S>& self) {
    auto in_node = input.node();
    auto w_node = weight.node();
    const bool need_dw = w_node->requires_grad;
    const bool need_dx = in_node->requires_grad;
    if (need_dw) w_node->ensure_grad();
    if (need_dx) in_node->ensure_grad();
    std::vector<S> cols(static_cast<std::size_t>(K) * P);
    std::vector<S> dcols(need_dx ? static_cast<std::size_t>(K) * P : 0);
    detail::ConstRowMap<S> Wm(weight.data(), Cout, K);
    for (int b = 0; b < B; ++b) {
      detail::ConstRowMap<S> dOm(self.grad.data() + static_cast<std::int64_t>(b) * Cout * P, Cout,
                                 P);
      if (need_dw) {
        detail::im2col(input.data() + static_cast<std::int64_t>(b) * Cin * H * W, Cin, H, W, k,
                       stride, padding, H1, W1, cols.data());
        detail::ConstRowMap<S> Cm(cols.data(), K, P);
        detail::RowMap<S> dWm(w_node->grad.data(), Cout, K);
        dWm.noalias() += dOm * Cm.transpose();
      }
      if (need_dx) {
        detail::RowMap<S> dCm(dcols.data(), K, P);
        dCm.noalias() = Wm.transpose() * dOm;
        detail::col2im_add(dcols.data(), Cin, H, W, k, stride, padding, H1, W1,
                           in_node->grad.data() + static_cast<std::int64_t>(b) * Cin * H * W);
      }
    }
  });
  detail::check_finite("conv2d", out);
  return out;
}

namespace detail {

// Batch normalization over axis 1 of x viewed as [B, C, M]. Train mode
// normalizes with batch statistics and folds them into the running stats;
// eval mode applies the folded running-stat affine. gamma/beta may be
// undefined (non-affine BN).
template <typename S>
Tensor<S> batchnorm_impl(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                         Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                         double eps, double momentum, int C, int M) {
  const int B = x.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(B) * M;
  const bool affine = gamma.defined();
  if (affine && (gamma.size() != C || beta.size() != C))
    throw DimError("batchnorm: gamma/beta must have C elements");
  if (running_mean.size() != C || running_var.size() != C)
    throw DimError("batchnorm: running stats must have C elements");

  Tensor<S> out(x.shape());
  const S* xv = x.data();
  S* ov = out.data();
  auto at = [C, M](int b, int c) { return (static_cast<std::int64_t>(b) * C + c) * M; };

  std::vector<S> mean(C), inv_std(C);
  if (training) {
    if (n < 2) throw DimError("batchnorm: train mode needs at least 2 values per channel");
    for (int c = 0; c < C; ++c) {
      S sum = 0;
      for (int b = 0; b < B; ++b) {
        const S* p = xv + at(b, c);
        for (int m = 0; m < M; ++m) sum += p[m];
      }
      const S mu = sum / static_cast<S>(n);
      S ss = 0;
      for (int b = 0; b < B; ++b) {
        const S* p = xv + at(b, c);
        for (int m = 0; m < M; ++m) {
          const S d = p[m] - mu;
          ss += d * d;
        }
      }
      const S var = ss / static_cast<S>(n);
      mean[c] = mu;
      inv_std[c] = S(1) / std::sqrt(var + static_cast<S>(eps));
      const S mom = static_cast<S>(momentum);
      running_mean.data()[c] = (S(1) - mom) * running_mean.data()[c] + mom * mu;
      const S unbiased = ss / static_cast<S>(n - 1);
      running_var.data()[c] = (S(1) - mom) * running_var.data()[c] + mom * unbiased;
    }
    for (int c = 0; c < C; ++c) {
      const S g = affine ? gamma.data()[c] : S(1);
      const S be = affine ? beta.data()[c] : S(0);
      const S s = g * inv_std[c];
      const S sh = be - mean[c] * s;
      for (int b = 0; b < B; ++b) {
        const S* p = xv + at(b, c);
        S* q = ov + at(b, c);
        for (int m = 0; m < M; ++m) q[m] = p[m] * s + sh;
      }
    }
  } else {
    std::vector<S> scale(C), shift(C);
    detail::bn_fold(affine ? gamma.data() : nullptr, affine ? beta.data() : nullptr,
                    running_mean.data(), running_var.data(), C, eps, scale.data(), shift.data());
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = S(1) / std::sqrt(running_var.data()[c] + static_cast<S>(eps));
      for (int b = 0; b < B; ++b) {
        const S* p = xv + at(b, c);
        S* q = ov + at(b, c);
        for (int m = 0; m < M; ++m) q[m] = p[m] * scale[c] + shift[c];
      }
    }
  }

  std::vector<Tensor<S>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  detail::record<S>(out, inputs,
                    [x, gamma, beta, training, C, M, B, n, affine, mean = std::move(mean),
                     inv_std = std::move(inv_std), at](detail::TensorNode<S>& self) {
                      auto xn = x.node();
                      const S* xv = x.data();
                      const S* dy = self.grad.data();
                      for (int c = 0; c < C; ++c) {
                        const S g = affine ? gamma.data()[c] : S(1);
                        S sum_dy = 0, sum_dy_xhat = 0;
                        for (int b = 0; b < B; ++b) {
                          const S* p = xv + at(b, c);
                          const S* d = dy + at(b, c);
                          for (int m = 0; m < M; ++m) {
                            sum_dy += d[m];
                            sum_dy_xhat += d[m] * (p[m] - mean[c]) * inv_std[c];
                          }
                        }
                        if (affine && gamma.node()->requires_grad) {
                          gamma.node()->ensure_grad();
                          gamma.node()->grad[c] += sum_dy_xhat;
                        }
                        if (affine && beta.node()->requires_grad) {
                          beta.node()->ensure_grad();
                          beta.node()->grad[c] += sum_dy;
                        }
                        if (!xn->requires_grad) continue;
                        xn->ensure_grad();
                        S* dx = xn->grad.data();
                        if (training) {
                          const S k1 = sum_dy / static_cast<S>(n);
                          const S k2 = sum_dy_xhat / static_cast<S>(n);
                          for (int b = 0; b < B; ++b) {
                            const S* p = xv + at(b, c);
                            const S* d = dy + at(b, c);
                            S* dst = dx + at(b, c);
                            for (int m = 0; m < M; ++m) {
                              const S xhat = (p[m] - mean[c]) * inv_std[c];
                              dst[m] += g * inv_std[c] * (d[m] - k1 - xhat * k2);
                            }
                          }
                        } else {
                          const S s = g * inv_std[c];
                          for (int b = 0; b < B; ++b) {
                            const S* d = dy + at(b, c);
                            S* dst = dx + at(b, c);
                            for (int m = 0; m < M; ++m) dst[m] += d[m] * s;
                          }
                        }
                      }
                    });
  detail::check_finite("batchnorm", out);
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      double eps = 1e-5, double momentum = 0.1) {
  detail::expect_rank(x, 4, "batchnorm2d input");
  return detail::batchnorm_impl(x, gamma, beta, running_mean, running_var, training, eps,
                                momentum, x.dim(1), x.dim(2) * x.dim(3));
}

template <typename S>
Tensor<S> batchnorm1d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                      double eps = 1e-5, double momentum = 0.1) {
  detail::expect_rank(x, 2, "batchnorm1d input");
  return detail::batchnorm_impl(x, gamma, beta, running_mean, running_var, training, eps,
                                momentum, x.dim(1), 1);
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* xv = x.data();
  S* ov = out.data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[i] > S(0) ? xv[i] : S(0);
  detail::record<S>(out, {x}, [x, n](detail::TensorNode<S>& self) {
    auto xn = x.node();
    xn->ensure_grad();
    const S* xv = x.data();
    const S* dy = self.grad.data();
    S* dx = xn->grad.data();
    for (std::int64_t i = 0; i < n; ++i)
      if (xv[i] > S(0)) dx[i] += dy[i];
  });
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* xv = x.data();
  S* ov = out.data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) ov[i] = S(1) / (S(1) + std::exp(-xv[i]));
  detail::record<S>(out, {x}, [x, n](detail::TensorNode<S>& self) {
    auto xn = x.node();
    xn->ensure_grad();
    const S* y = self.value.data();  // capturing `out` would cycle the graph
    const S* dy = self.grad.data();
    S* dx = xn->grad.data();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (S(1) - y[i]);
  });
  detail::check_finite("sigmoid", out);
  return out;
}

// Spatial mean: [B,C,H,W] -> [B,C].
template <typename S>
Tensor<S> gap2d(const Tensor<S>& x) {
  detail::expect_rank(x, 4, "gap2d input");
  const int B = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  Tensor<S> out({B, C});
  const S* xv = x.data();
  S* ov = out.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* p = xv + (static_cast<std::int64_t>(b) * C + c) * M;
      S sum = 0;
      for (int m = 0; m < M; ++m) sum += p[m];
      ov[b * C + c] = sum / static_cast<S>(M);
    }
  detail::record<S>(out, {x}, [x, B, C, M](detail::TensorNode<S>& self) {
    auto xn = x.node();
    xn->ensure_grad();
    const S* dy = self.grad.data();
    S* dx = xn->grad.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const S g = dy[b * C + c] / static_cast<S>(M);
        S* dst = dx + (static_cast<std::int64_t>(b) * C + c) * M;
        for (int m = 0; m < M; ++m) dst[m] += g;
      }
  });
  return out;
}

// x [B,n] * weight [m,n]^T (+ bias [m]) -> [B,m]. bias may be undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  detail::expect_rank(x, 2, "linear input");
  detail::expect_rank(weight, 2, "linear weight");
  const int B = x.dim(0), n = x.dim(1), m = weight.dim(0);
  if (weight.dim(1) != n) throw DimError("linear: weight columns do not match input width");
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != m) throw DimError("linear: bias must have m elements");

  Tensor<S> out({B, m});
  {
    detail::ConstRowMap<S> X(x.data(), B, n), Wm(weight.data(), m, n);
    detail::RowMap<S> O(out.data(), B, m);
    O.noalias() = X * Wm.transpose();
    if (has_bias) {
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bv(bias.data(), m);
      O.rowwise() += bv;
    }
  }
  std::vector<Tensor<S>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  detail::record<S>(out, inputs, [x, weight, bias, has_bias, B, n, m](detail::TensorNode<S>& self) {
    detail::ConstRowMap<S> dO(self.grad.data(), B, m);
    if (x.node()->requires_grad) {
      x.node()->ensure_grad();
      detail::RowMap<S> dX(x.node()->grad.data(), B, n);
      detail::ConstRowMap<S> Wm(weight.data(), m, n);
      dX.noalias() += dO * Wm;
    }
    if (weight.node()->requires_grad) {
      weight.node()->ensure_grad();
      detail::RowMap<S> dW(weight.node()->grad.data(), m, n);
      detail::ConstRowMap<S> X(x.data(), B, n);
      dW.noalias() += dO.transpose() * X;
    }
    if (has_bias && bias.node()->requires_grad) {
      bias.node()->ensure_grad();
      // Fixed-order scalar accumulation: a vectorized reduction here would
      // peel to the buffer's aligned address, making the sum order (and the
      // last ulp) depend on where the allocator placed the gradient.
      S* db = bias.node()->grad.data();
      const S* d = self.grad.data();
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < m; ++j) db[j] += d[static_cast<std::int64_t>(b) * m + j];
    }
  });
  detail::check_finite("linear", out);
  return out;
}

// Row-wise L2 normalization of [B,d]; rejects zero-norm rows.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x) {
  detail::expect_rank(x, 2, "l2_normalize input");
  const int B = x.dim(0), d = x.dim(1);
  Tensor<S> out(x.shape());
  std::vector<S> norms(B);
  for (int b = 0; b < B; ++b) {
    const S* p = x.data() + static_cast<std::int64_t>(b) * d;
    S ss = 0;
    for (int i = 0; i < d; ++i) ss += p[i] * p[i];
    const S r = std::sqrt(ss);
    if (r == S(0)) throw DegenerateInput("l2_normalize: zero-norm row " + std::to_string(b));
    norms[b] = r;
    S* q = out.data() + static_cast<std::int64_t>(b) * d;
    for (int i = 0; i < d; ++i) q[i] = p[i] / r;
  }
  // The closure reads the normalized rows from `self` rather than capturing
  // `out`: a tensor captured inside its own node's backward function would
  // form a shared_ptr cycle and pin every upstream graph node forever.
  detail::record<S>(out, {x},
                    [x, B, d, norms = std::move(norms)](detail::TensorNode<S>& self) {
                      auto xn = x.node();
                      xn->ensure_grad();
                      for (int b = 0; b < B; ++b) {
                        const S* y = self.value.data() + static_cast<std::int64_t>(b) * d;
                        const S* dy = self.grad.data() + static_cast<std::int64_t>(b) * d;
                        S* dx = xn->grad.data() + static_cast<std::int64_t>(b) * d;
                        S dot = 0;
                        for (int i = 0; i < d; ++i) dot += dy[i] * y[i];
                        for (int i = 0; i < d; ++i) dx[i] += (dy[i] - y[i] * dot) / norms[b];
                      }
                    });
  detail::check_finite("l2_normalize", out);
  return out;
}

// Forward identity that contributes zero gradient to its ancestors.
template <typename S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  return x.detach();
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "add");
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::record<S>(out, {a, b}, [a, b, n](detail::TensorNode<S>& self) {
    detail::accumulate(a.node(), self.grad.data(), n);
    detail::accumulate(b.node(), self.grad.data(), n);
  });
  detail::check_finite("add", out);
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::record<S>(out, {a, b}, [a, b, n](detail::TensorNode<S>& self) {
    detail::accumulate(a.node(), self.grad.data(), n);
    if (b.node()->requires_grad) {
      b.node()->ensure_grad();
      S* g = b.node()->grad.data();
      const S* dy = self.grad.data();
      for (std::int64_t i = 0; i < n; ++i) g[i] -= dy[i];
    }
  });
  detail::check_finite("sub", out);
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::record<S>(out, {a, b}, [a, b, n](detail::TensorNode<S>& self) {
    const S* dy = self.grad.data();
    if (a.node()->requires_grad) {
      a.node()->ensure_grad();
      S* g = a.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) g[i] += dy[i] * b.data()[i];
    }
    if (b.node()->requires_grad) {
      b.node()->ensure_grad();
      S* g = b.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) g[i] += dy[i] * a.data()[i];
    }
  });
  detail::check_finite("mul", out);
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, std::type_identity_t<S> c) {
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  detail::record<S>(out, {a}, [a, c, n](detail::TensorNode<S>& self) {
    auto an = a.node();
    an->ensure_grad();
    S* g = an->grad.data();
    const S* dy = self.grad.data();
    for (std::int64_t i = 0; i < n; ++i) g[i] += dy[i] * c;
  });
  detail::check_finite("scale", out);
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, std::type_identity_t<S> c) {
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  detail::record<S>(out, {a}, [a, n](detail::TensorNode<S>& self) {
    detail::accumulate(a.node(), self.grad.data(), n);
  });
  detail::check_finite("add_scalar", out);
  return out;
}

template <typename S>
Tensor<S> absolute(const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::abs(a.data()[i]);
  detail::record<S>(out, {a}, [a, n](detail::TensorNode<S>& self) {
    auto an = a.node();
    an->ensure_grad();
    S* g = an->grad.data();
    const S* dy = self.grad.data();
    for (std::int64_t i = 0; i < n; ++i) {
      const S x = a.data()[i];
      if (x > S(0))
        g[i] += dy[i];
      else if (x < S(0))
        g[i] -= dy[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Tensor<S> out({1});
  const std::int64_t n = a.size();
  S s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += a.data()[i];
  out.data()[0] = s;
  detail::record<S>(out, {a}, [a, n](detail::TensorNode<S>& self) {
    auto an = a.node();
    an->ensure_grad();
    const S g = self.grad[0];
    S* dst = an->grad.data();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += g;
  });
  detail::check_finite("sum_all", out);
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.size()));
}

// Row-wise dot product of two [B,d] tensors -> [B].
template <typename S>
Tensor<S> rows_dot(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "rows_dot");
  detail::expect_rank(a, 2, "rows_dot input");
  const int B = a.dim(0), d = a.dim(1);
  Tensor<S> out({B});
  for (int r = 0; r < B; ++r) {
    const S* pa = a.data() + static_cast<std::int64_t>(r) * d;
    const S* pb = b.data() + static_cast<std::int64_t>(r) * d;
    S s = 0;
    for (int i = 0; i < d; ++i) s += pa[i] * pb[i];
    out.data()[r] = s;
  }
  detail::record<S>(out, {a, b}, [a, b, B, d](detail::TensorNode<S>& self) {
    const S* dy = self.grad.data();
    if (a.node()->requires_grad) {
      a.node()->ensure_grad();
      for (int r = 0; r < B; ++r) {
        S* g = a.node()->grad.data() + static_cast<std::int64_t>(r) * d;
        const S* pb = b.data() + static_cast<std::int64_t>(r) * d;
        for (int i = 0; i < d; ++i) g[i] += dy[r] * pb[i];
      }
    }
    if (b.node()->requires_grad) {
      b.node()->ensure_grad();
      for (int r = 0; r < B; ++r) {
        S* g = b.node()->grad.data() + static_cast<std::int64_t>(r) * d;
        const S* pa = a.data() + static_cast<std::int64_t>(r) * d;
        for (int i = 0; i < d; ++i) g[i] += dy[r] * pa[i];
      }
    }
  });
  detail::check_finite("rows_dot", out);
  return out;
}

// Per-channel mask: x [B,C,H,W] * m [B,C] broadcast over spatial dims.
template <typename S>
Tensor<S> mask_channels(const Tensor<S>& x, const Tensor<S>& m) {
  detail::expect_rank(x, 4, "mask_channels input");
  detail::expect_rank(m, 2, "mask_channels mask");
  const int B = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  if (m.dim(0) != B || m.dim(1) != C) throw DimError("mask_channels: mask must be [B,C]");
  Tensor<S> out(x.shape());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S f = m.data()[b * C + c];
      const S* p = x.data() + (static_cast<std::int64_t>(b) * C + c) * M;
      S* q = out.data() + (static_cast<std::int64_t>(b) * C + c) * M;
      for (int i = 0; i < M; ++i) q[i] = p[i] * f;
    }
  detail::record<S>(out, {x, m}, [x, m, B, C, M](detail::TensorNode<S>& self) {
    const S* dy = self.grad.data();
    if (x.node()->requires_grad) {
      x.node()->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S f = m.data()[b * C + c];
          const S* d = dy + (static_cast<std::int64_t>(b) * C + c) * M;
          S* g = x.node()->grad.data() + (static_cast<std::int64_t>(b) * C + c) * M;
          for (int i = 0; i < M; ++i) g[i] += d[i] * f;
        }
    }
    if (m.node()->requires_grad) {
      m.node()->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const S* d = dy + (static_cast<std::int64_t>(b) * C + c) * M;
          const S* p = x.data() + (static_cast<std::int64_t>(b) * C + c) * M;
          S s = 0;
          for (int i = 0; i < M; ++i) s += d[i] * p[i];
          m.node()->grad.data()[b * C + c] += s;
        }
    }
  });
  return out;
}

// Straight-through estimator: forward takes the hard values, backward
// routes the incoming gradient to `soft` unchanged.
template <typename S>
Tensor<S> straight_through(const Tensor<S>& soft, const std::vector<S>& hard) {
  if (static_cast<std::int64_t>(hard.size()) != soft.size())
    throw DimError("straight_through: hard/soft size mismatch");
  Tensor<S> out = Tensor<S>::from_data(soft.shape(), hard);
  detail::record<S>(out, {soft}, [soft](detail::TensorNode<S>& self) {
    detail::accumulate(soft.node(), self.grad.data(), self.size());
  });
  return out;
}

}  // namespace dcs
