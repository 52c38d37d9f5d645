#pragma once

// Differentiable operations used by the backbone, the extraction blocks and
// the losses. Dense kernels go through Eigen; everything else is plain loops.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "m2cl/autodiff.hpp"

namespace m2cl {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// Unfolds one C,H,W image into a (C*k*k) x (Ho*Wo) patch matrix.
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            row[oy * Wo + ox] = (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W))
                                    ? img[(c * H + iy) * W + ix]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* img) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(W)) img[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

/// Strictly greater, with NaN beating any number so it propagates through max.
template <typename T>
bool beats(T a, T b) {
  return a > b || (a != a && b == b);
}

}  // namespace detail

/// 2-D cross-correlation. input [N,C,H,W], weight [F,C,k,k], bias [F].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  using detail::require;
  require(input.shape().size() == 4, "conv2d: input must be rank 4, got " + shape_str(input.shape()));
  require(weight.shape().size() == 4, "conv2d: weight must be rank 4, got " + shape_str(weight.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == C, "conv2d: dimension mismatch, input has " + std::to_string(C) +
                                  " channels but weight expects " + std::to_string(weight.dim(1)));
  require(weight.dim(3) == k, "conv2d: kernel must be square");
  require(bias.numel() == F, "conv2d: bias length " + std::to_string(bias.numel()) + " != filters " +
                                 std::to_string(F));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(k <= H + 2 * pad && k <= W + 2 * pad, "conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t P = Ho * Wo, K = C * k * k;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out(Shape{N, F, Ho, Wo});
  AlignedVector<T> cols(direct ? 0 : K * P);
  detail::ConstMatMap<T> wm(weight.value().data(), F, K);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.value().data(), F);
  for (std::size_t n = 0; n < N; ++n) {
    const T* img = input.value().data() + n * C * H * W;
    if (!direct) detail::im2col(img, C, H, W, k, stride, pad, Ho, Wo, cols.data());
    detail::ConstMatMap<T> cm(direct ? img : cols.data(), K, P);
    detail::MatMap<T> om(out.data() + n * F * P, F, P);
    om.noalias() = wm * cm;
    om.colwise() += bv;
  }

  return make_result<T>(std::move(out), {input, weight, bias}, [=](Node<T>& self) {
    auto& xin = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const T* gy = self.grad.data();
    detail::ConstMatMap<T> wmat(wn.value.data(), F, K);
    AlignedVector<T> buf(direct ? 0 : K * P);
    AlignedVector<T> gcols(K * P);
    for (std::size_t n = 0; n < N; ++n) {
      detail::ConstMatMap<T> g(gy + n * F * P, F, P);
      const T* img = xin.value.data() + n * C * H * W;
      if (wn.requires_grad) {
        if (!direct) detail::im2col(img, C, H, W, k, stride, pad, Ho, Wo, buf.data());
        detail::ConstMatMap<T> cm(direct ? img : buf.data(), K, P);
        detail::MatMap<T> gw(wn.grad_ref().data(), F, K);
        gw.noalias() += g * cm.transpose();
      }
      if (bn.requires_grad) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(bn.grad_ref().data(), F);
        gb += g.rowwise().sum();
      }
      if (xin.requires_grad) {
        T* gx = xin.grad_ref().data() + n * C * H * W;
        if (direct) {
          detail::MatMap<T> gxm(gx, K, P);
          gxm.noalias() += wmat.transpose() * g;
        } else {
          detail::MatMap<T> gc(gcols.data(), K, P);
          gc.noalias() = wmat.transpose() * g;
          detail::col2im(gcols.data(), C, H, W, k, stride, pad, Ho, Wo, gx);
        }
      }
    }
  });
}

/// k x k max pooling with stride 1 and no padding: [N,C,n,n] -> [N,C,n-k+1,n-k+1].
/// Ties go to the first maximal cell in row-major order.
template <typename T>
Var<T> maxpool_stride1(const Var<T>& input, std::size_t k) {
  detail::require(input.shape().size() == 4, "maxpool_stride1: input must be rank 4");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (k < 1 || k > H || k > W)
    throw ShapeError("maxpool_stride1: kernel " + std::to_string(k) + " infeasible for " + std::to_string(H) +
                     "x" + std::to_string(W) + " input");
  const std::size_t th = H - k + 1, tw = W - k + 1;
  Tensor<T> out(Shape{N, C, th, tw});
  std::vector<std::uint32_t> argmax(N * C * th * tw);
  AlignedVector<T> hmax(H * tw);
  std::vector<std::uint32_t> harg(H * tw);
  const T* x = input.value().data();
  // Separable: leftmost max along each row, then topmost among row maxima.
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const T* src = x + plane * H * W;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t j = 0; j < tw; ++j) {
        std::size_t best = j;
        for (std::size_t q = j + 1; q < j + k; ++q)
          if (detail::beats(src[r * W + q], src[r * W + best])) best = q;
        hmax[r * tw + j] = src[r * W + best];
        harg[r * tw + j] = static_cast<std::uint32_t>(r * W + best);
      }
    T* dst = out.data() + plane * th * tw;
    std::uint32_t* am = argmax.data() + plane * th * tw;
    for (std::size_t i = 0; i < th; ++i)
      for (std::size_t j = 0; j < tw; ++j) {
        std::size_t best = i;
        for (std::size_t r = i + 1; r < i + k; ++r)
          if (detail::beats(hmax[r * tw + j], hmax[best * tw + j])) best = r;
        dst[i * tw + j] = hmax[best * tw + j];
        am[i * tw + j] = harg[best * tw + j];
      }
  }
  return make_result<T>(std::move(out), {input}, [=, argmax = std::move(argmax)](Node<T>& self) {
    auto& xin = *self.parents[0];
    T* gx = xin.grad_ref().data();
    const T* gy = self.grad.data();
    const std::size_t per_out = th * tw, per_in = H * W;
    for (std::size_t plane = 0; plane < N * C; ++plane)
      for (std::size_t o = 0; o < per_out; ++o)
        gx[plane * per_in + argmax[plane * per_out + o]] += gy[plane * per_out + o];
  });
}

/// Uniform double in [0,1) from the top 53 bits of one draw.
template <typename Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Zeroes whole (n,c) feature maps with probability `rate` and scales the
/// survivors by 1/(1-rate). Identity when not training or when rate is 0.
template <typename T>
Var<T> spatial_dropout(const Var<T>& input, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("spatial_dropout: rate must lie in [0,1), got " + std::to_string(rate));
  detail::require(input.shape().size() == 4, "spatial_dropout: input must be rank 4");
  if (!training || rate == 0.0) return input;
  const std::size_t planes = input.dim(0) * input.dim(1), area = input.dim(2) * input.dim(3);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(planes);
  for (auto& m : mask) m = uniform01(rng) < rate ? T(0) : scale;
  Tensor<T> out(input.shape());
  const T* x = input.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < area; ++i) out[p * area + i] = mask[p] == T(0) ? T(0) : x[p * area + i] * mask[p];
  return make_result<T>(std::move(out), {input}, [=, mask = std::move(mask)](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    for (std::size_t p = 0; p < planes; ++p)
      if (mask[p] != T(0))
        for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += self.grad[p * area + i] * mask[p];
  });
}

/// Affine map input[N,D] * weight[D,E] + bias[E].
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  using detail::require;
  require(input.shape().size() == 2 && weight.shape().size() == 2, "linear: expected rank-2 input and weight");
  const std::size_t N = input.dim(0), D = input.dim(1), E = weight.dim(1);
  require(weight.dim(0) == D, "linear: dimension mismatch, input width " + std::to_string(D) + " vs weight rows " +
                                  std::to_string(weight.dim(0)));
  require(bias.numel() == E, "linear: bias length mismatch");
  Tensor<T> out(Shape{N, E});
  detail::MatMap<T> om(out.data(), N, E);
  om.noalias() = detail::ConstMatMap<T>(input.value().data(), N, D) * detail::ConstMatMap<T>(weight.value().data(), D, E);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), E);
  return make_result<T>(std::move(out), {input, weight, bias}, [=](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    detail::ConstMatMap<T> g(self.grad.data(), N, E);
    if (xn.requires_grad)
      detail::MatMap<T>(xn.grad_ref().data(), N, D).noalias() +=
          g * detail::ConstMatMap<T>(wn.value.data(), D, E).transpose();
    if (wn.requires_grad)
      detail::MatMap<T>(wn.grad_ref().data(), D, E).noalias() +=
          detail::ConstMatMap<T>(xn.value.data(), N, D).transpose() * g;
    if (bn.requires_grad)
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn.grad_ref().data(), E) += g.colwise().sum();
  });
}

template <typename T>
Var<T> relu(const Var<T>& input) {
  Tensor<T> out(input.shape());
  const T* x = input.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (x[i] > T(0) || x[i] != x[i]) ? x[i] : T(0);  // NaN passes through
  return make_result<T>(std::move(out), {input}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    T* gx = xn.grad_ref().data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      if (xn.value[i] > T(0)) gx[i] += self.grad[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& n = *self.parents[p];
      if (!n.requires_grad) continue;
      T* g = n.grad_ref().data();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

/// a + alpha * b, elementwise.
template <typename T>
Var<T> add_scaled(const Var<T>& a, const Var<T>& b, T alpha) {
  detail::require(a.shape() == b.shape(), "add_scaled: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + alpha * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [alpha](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) an.grad_ref()[i] += self.grad[i];
    if (bn.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) bn.grad_ref()[i] += alpha * self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) an.grad_ref()[i] += self.grad[i] * bn.value[i];
    if (bn.requires_grad)
      for (std::size_t i = 0; i < self.grad.numel(); ++i) bn.grad_ref()[i] += self.grad[i] * an.value[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.value()[i];
  return make_result<T>(Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    const T g = self.grad[0];
    for (auto& v : an.grad_ref().storage()) v += g;
  });
}

/// Scalar view of one element, addressed by flat index.
template <typename T>
Var<T> select(const Var<T>& a, std::size_t flat_index) {
  detail::require(flat_index < a.numel(), "select: index out of range");
  return make_result<T>(Tensor<T>::scalar(a.value()[flat_index]), {a}, [flat_index](Node<T>& self) {
    self.parents[0]->grad_ref()[flat_index] += self.grad[0];
  });
}

/// Per-channel learnable scale and shift on [N,C,H,W].
template <typename T>
Var<T> channel_affine(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta) {
  detail::require(input.shape().size() == 4, "channel_affine: input must be rank 4");
  const std::size_t N = input.dim(0), C = input.dim(1), A = input.dim(2) * input.dim(3);
  detail::require(gamma.numel() == C && beta.numel() == C, "channel_affine: parameter length mismatch");
  Tensor<T> out(input.shape());
  const T* x = input.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T g = gamma.value()[c], b = beta.value()[c];
      const std::size_t base = (n * C + c) * A;
      for (std::size_t i = 0; i < A; ++i) out[base + i] = x[base + i] * g + b;
    }
  return make_result<T>(std::move(out), {input, gamma, beta}, [=](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * A;
        T sg = T(0), sb = T(0);
        for (std::size_t i = 0; i < A; ++i) {
          sg += self.grad[base + i] * xn.value[base + i];
          sb += self.grad[base + i];
        }
        if (gn.requires_grad) gn.grad_ref()[c] += sg;
        if (bn.requires_grad) bn.grad_ref()[c] += sb;
        if (xn.requires_grad) {
          T* gx = xn.grad_ref().data() + base;
          const T g = gn.value[c];
          for (std::size_t i = 0; i < A; ++i) gx[i] += self.grad[base + i] * g;
        }
      }
  });
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  detail::require(input.shape().size() == 4, "global_avg_pool: input must be rank 4");
  const std::size_t N = input.dim(0), C = input.dim(1), A = input.dim(2) * input.dim(3);
  Tensor<T> out(Shape{N, C});
  for (std::size_t p = 0; p < N * C; ++p) {
    T acc = T(0);
    for (std::size_t i = 0; i < A; ++i) acc += input.value()[p * A + i];
    out[p] = acc / static_cast<T>(A);
  }
  return make_result<T>(std::move(out), {input}, [=](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    for (std::size_t p = 0; p < N * C; ++p) {
      const T g = self.grad[p] / static_cast<T>(A);
      for (std::size_t i = 0; i < A; ++i) gx[p * A + i] += g;
    }
  });
}

/// [N, ...] -> [N, prod(...)].
template <typename T>
Var<T> flatten(const Var<T>& input) {
  const std::size_t N = input.dim(0);
  Tensor<T> out = input.value().reshaped(Shape{N, input.numel() / N});
  return make_result<T>(std::move(out), {input}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
  });
}

/// Joins rank-2 tensors with equal row counts along the feature axis.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t N = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.shape().size() == 2 && p.dim(0) == N, "concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Tensor<T> out(Shape{N, total});
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < widths[j]; ++d) out[n * total + offset + d] = parts[j].value()[n * widths[j] + d];
    offset += widths[j];
  }
  return make_result<T>(std::move(out), parts, [=](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < widths.size(); ++j) {
      auto& pn = *self.parents[j];
      if (pn.requires_grad) {
        T* g = pn.grad_ref().data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t d = 0; d < widths[j]; ++d) g[n * widths[j] + d] += self.grad[n * total + off + d];
      }
      off += widths[j];
    }
  });
}

/// Divides each row by its Euclidean norm, or by eps when the norm is below eps.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& input, double eps = 1e-12) {
  detail::require(input.shape().size() == 2, "l2_normalize_rows: input must be rank 2");
  const std::size_t N = input.dim(0), D = input.dim(1);
  Tensor<T> out(input.shape());
  std::vector<T> denom(N);
  for (std::size_t n = 0; n < N; ++n) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) ss += static_cast<double>(input.value()[n * D + d]) * input.value()[n * D + d];
    denom[n] = static_cast<T>(std::max(std::sqrt(ss), eps));
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = input.value()[n * D + d] / denom[n];
  }
  return make_result<T>(std::move(out), {input}, [=, denom = std::move(denom)](Node<T>& self) {
    auto& xn = *self.parents[0];
    T* gx = xn.grad_ref().data();
    for (std::size_t n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * D;
      const T* x = xn.value.data() + n * D;
      if (denom[n] > static_cast<T>(eps)) {
        // d(x/|x|) = (g - y (y.g)) / |x|
        T yg = T(0);
        for (std::size_t d = 0; d < D; ++d) yg += x[d] * g[d];
        yg /= denom[n];
        for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += (g[d] - (x[d] / denom[n]) * yg) / denom[n];
      } else {
        for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += g[d] / denom[n];
      }
    }
  });
}

/// Mean negative log-softmax of the labelled class.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.shape().size() == 2, "cross_entropy: logits must be rank 2");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  detail::require(labels.size() == N, "cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(C) +
                       " classes");
  Tensor<T> probs(Shape{N, C});
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.value().data() + n * C;
    const T m = *std::max_element(z, z + C);
    double se = 0.0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(static_cast<double>(z[c] - m));
    const double lse = std::log(se) + m;
    for (std::size_t c = 0; c < C; ++c) probs[n * C + c] = static_cast<T>(std::exp(z[c] - lse));
    total += lse - z[labels[n]];
  }
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total / N)), {logits},
                        [=, probs = std::move(probs)](Node<T>& self) {
                          T* g = self.parents[0]->grad_ref().data();
                          const T s = self.grad[0] / static_cast<T>(N);
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c)
                              g[n * C + c] +=
                                  s * (probs[n * C + c] - (static_cast<int>(c) == labels[n] ? T(1) : T(0)));
                        });
}

}  // namespace m2cl
