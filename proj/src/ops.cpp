// SPDX-License-Identifier: Apache-2.0
#include "gmnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace gmnet {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

#define GMNET_REQUIRE(ok, what)                    \
  do {                                             \
    if (!(ok)) throw std::invalid_argument(what);  \
  } while (0)

void require_rank4(const Shape& s, const char* op) {
  GMNET_REQUIRE(s.size() == 4, std::string(op) + " expects an (N,C,H,W) tensor, got " + shape_str(s));
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  GMNET_REQUIRE(a->value.shape() == b->value.shape(),
          "elementwise_sum shape mismatch: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node<T>(std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate_grad(*self.grad);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  GMNET_REQUIRE(a->value.shape() == b->value.shape(),
          "mul shape mismatch: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node<T>(std::move(out), "mul", {a, b}, [](Node<T>& self) {
    const Tensor<T>& g = *self.grad;
    Node<T>& lhs = *self.inputs[0];
    Node<T>& rhs = *self.inputs[1];
    // Snapshot values first: lhs and rhs may be the same node.
    const Tensor<T> lv = lhs.value;
    const Tensor<T> rv = rhs.value;
    if (lhs.requires_grad) {
      Tensor<T>& buf = lhs.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * rv[i];
    }
    if (rhs.requires_grad) {
      Tensor<T>& buf = rhs.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i] * lv[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x->value.data()) total += v;
  return make_node<T>(Tensor<T>({1}, std::vector<T>{total}), "sum", {x}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    const T g = (*self.grad)[0];
    Tensor<T>& buf = in.grad_buffer();
    for (auto& v : buf.data()) v += g;
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  require_rank4(sa, "concat_channels");
  require_rank4(sb, "concat_channels");
  GMNET_REQUIRE(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels non-channel dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> out = Tensor<T>::uninitialized({n, ca + cb, sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a->value.ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
    std::copy_n(b->value.ptr() + i * cb * hw, cb * hw, out.ptr() + (i * (ca + cb) + ca) * hw);
  }
  return make_node<T>(std::move(out), "concat_channels", {a, b}, [n, ca, cb, hw](Node<T>& self) {
    const T* g = self.grad->ptr();
    for (std::size_t part = 0; part < 2; ++part) {
      Node<T>& in = *self.inputs[part];
      if (!in.requires_grad) continue;
      const std::size_t c = part == 0 ? ca : cb;
      const std::size_t offset = part == 0 ? 0 : ca;
      T* dst = in.grad_buffer().ptr();
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = g + (i * (ca + cb) + offset) * hw;
        T* d = dst + i * c * hw;
        for (std::size_t j = 0; j < c * hw; ++j) d[j] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& input, BatchNormState<T>& state, Mode mode) {
  const Shape& s = input->value.shape();
  require_rank4(s, "batch_norm");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  GMNET_REQUIRE(c == state.channels(), "batch_norm channel mismatch: input has " + std::to_string(c) +
                                     " channels, state has " + std::to_string(state.channels()));
  const std::size_t m = n * hw;
  if (mode == Mode::Train) GMNET_REQUIRE(m >= 2, "batch_norm train mode needs N*H*W >= 2, got " + std::to_string(m));

  const T* x = input->value.ptr();
  Tensor<T> out = Tensor<T>::uninitialized(s);
  Tensor<T> xhat = Tensor<T>::uninitialized(s);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (mode == Mode::Train) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * hw;
        T plane{0};
#pragma omp simd reduction(+ : plane)
        for (std::size_t j = 0; j < hw; ++j) plane += p[j];
        acc += plane;
      }
      mean = static_cast<T>(acc / static_cast<double>(m));
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * hw;
        T plane{0};
#pragma omp simd reduction(+ : plane)
        for (std::size_t j = 0; j < hw; ++j) plane += (p[j] - mean) * (p[j] - mean);
        sq += plane;
      }
      var = static_cast<T>(sq / static_cast<double>(m));
      const T unbiased = static_cast<T>(sq / static_cast<double>(m - 1));
      const T mom = state.stats_momentum;
      state.running_mean[ch] = mom * state.running_mean[ch] + (T{1} - mom) * mean;
      state.running_var[ch] = mom * state.running_var[ch] + (T{1} - mom) * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const T istd = T{1} / std::sqrt(var + state.eps);
    inv_std[ch] = istd;
    const T g = state.gamma->value[ch];
    const T b = state.beta->value[ch];
    T* xh = xhat.ptr();
    T* o = out.ptr();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * hw;
#pragma omp simd
      for (std::size_t j = 0; j < hw; ++j) {
        const T v = (x[off + j] - mean) * istd;
        xh[off + j] = v;
        o[off + j] = g * v + b;
      }
    }
  }

  const bool train = mode == Mode::Train;
  return make_node<T>(
      std::move(out), "batch_norm", {input, state.gamma, state.beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, m, train](Node<T>& self) {
        const T* dy = self.grad->ptr();
        Node<T>& in = *self.inputs[0];
        Node<T>& gamma = *self.inputs[1];
        Node<T>& beta = *self.inputs[2];
        T* dx = in.requires_grad ? in.grad_buffer().ptr() : nullptr;
        T* dg = gamma.requires_grad ? gamma.grad_buffer().ptr() : nullptr;
        T* db = beta.requires_grad ? beta.grad_buffer().ptr() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_dy{0}, sum_dy_xhat{0};
          const T* xh = xhat.ptr();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
#pragma omp simd reduction(+ : sum_dy, sum_dy_xhat)
            for (std::size_t j = 0; j < hw; ++j) {
              sum_dy += dy[off + j];
              sum_dy_xhat += dy[off + j] * xh[off + j];
            }
          }
          if (dg) dg[ch] += sum_dy_xhat;
          if (db) db[ch] += sum_dy;
          if (!dx) continue;
          const T scale = gamma.value[ch] * inv_std[ch];
          if (train) {
            const T mean_dy = sum_dy / static_cast<T>(m);
            const T mean_dy_xhat = sum_dy_xhat / static_cast<T>(m);
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * hw;
#pragma omp simd
              for (std::size_t j = 0; j < hw; ++j) {
                dx[off + j] += scale * (dy[off + j] - mean_dy - xh[off + j] * mean_dy_xhat);
              }
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * hw;
              for (std::size_t j = 0; j < hw; ++j) dx[off + j] += scale * dy[off + j];
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x->value;
  T* o = out.ptr();
  const std::size_t count = out.numel();
#pragma omp simd
  for (std::size_t i = 0; i < count; ++i) o[i] = o[i] > T{0} ? o[i] : T{0};
  return make_node<T>(std::move(out), "relu", {x}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    const T* g = self.grad->ptr();
    const T* y = self.value.ptr();
    T* dx = in.grad_buffer().ptr();
    const std::size_t len = self.value.numel();
#pragma omp simd
    for (std::size_t i = 0; i < len; ++i) dx[i] += y[i] > T{0} ? g[i] : T{0};
  });
}

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k, std::size_t stride) {
  GMNET_REQUIRE(k >= 1 && stride >= 1, "avg_pool2d needs k >= 1 and stride >= 1");
  const Shape& s = x->value.shape();
  require_rank4(s, "avg_pool2d");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  GMNET_REQUIRE(h >= k && w >= k, "avg_pool2d window " + std::to_string(k) + " larger than input " + shape_str(s));
  const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  const T inv = T{1} / static_cast<T>(k * k);
  Tensor<T> out = Tensor<T>::uninitialized({n, c, oh, ow});
  const T* src = x->value.ptr();
  T* dst = out.ptr();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = src + p * h * w;
    T* oplane = dst + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        T acc{0};
        for (std::size_t a = 0; a < k; ++a) {
          const T* row = plane + (i * stride + a) * w + j * stride;
          for (std::size_t b = 0; b < k; ++b) acc += row[b];
        }
        oplane[i * ow + j] = acc * inv;
      }
    }
  }
  return make_node<T>(std::move(out), "avg_pool2d", {x}, [=](Node<T>& self) {
    const T* g = self.grad->ptr();
    T* dx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t p = 0; p < n * c; ++p) {
      T* plane = dx + p * h * w;
      const T* gplane = g + p * oh * ow;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const T v = gplane[i * ow + j] * inv;
          for (std::size_t a = 0; a < k; ++a) {
            T* row = plane + (i * stride + a) * w + j * stride;
            for (std::size_t b = 0; b < k; ++b) row[b] += v;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x->value.shape();
  require_rank4(s, "global_avg_pool");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  const T inv = T{1} / static_cast<T>(hw);
  Tensor<T> out = Tensor<T>::uninitialized({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = x->value.ptr() + p * hw;
    T acc{0};
    for (std::size_t j = 0; j < hw; ++j) acc += plane[j];
    out[p] = acc * inv;
  }
  return make_node<T>(std::move(out), "global_avg_pool", {x}, [=](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t p = 0; p < n * c; ++p) {
      const T v = (*self.grad)[p] * inv;
      for (std::size_t j = 0; j < hw; ++j) dx[p * hw + j] += v;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const Shape& si = input->value.shape();
  const Shape& sw = weight->value.shape();
  GMNET_REQUIRE(si.size() == 2 && sw.size() == 2 && si[1] == sw[1],
          "linear dim mismatch: input " + shape_str(si) + ", weight " + shape_str(sw));
  const std::size_t n = si[0], d = si[1], k = sw[0];
  GMNET_REQUIRE(bias->value.shape() == Shape{k}, "linear bias shape " + shape_str(bias->value.shape()) +
                                                " does not match " + std::to_string(k) + " outputs");
  Tensor<T> out = Tensor<T>::uninitialized({n, k});
  ConstMapMat<T> X(input->value.ptr(), n, d);
  ConstMapMat<T> W(weight->value.ptr(), k, d);
  MapMat<T> Y(out.ptr(), n, k);
  Y.noalias() = X * W.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) Y(i, j) += bias->value[j];

  return make_node<T>(std::move(out), "linear", {input, weight, bias}, [n, d, k](Node<T>& self) {
    ConstMapMat<T> G(self.grad->ptr(), n, k);
    Node<T>& in = *self.inputs[0];
    Node<T>& w = *self.inputs[1];
    Node<T>& b = *self.inputs[2];
    if (in.requires_grad) {
      MapMat<T> dX(in.grad_buffer().ptr(), n, d);
      dX.noalias() += G * ConstMapMat<T>(w.value.ptr(), k, d);
    }
    if (w.requires_grad) {
      MapMat<T> dW(w.grad_buffer().ptr(), k, d);
      dW.noalias() += G.transpose() * ConstMapMat<T>(in.value.ptr(), n, d);
    }
    if (b.requires_grad) {
      T* db = b.grad_buffer().ptr();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) db[j] += G(i, j);
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double keep_prob, Mode mode, Rng& rng) {
  GMNET_REQUIRE(keep_prob > 0.0 && keep_prob <= 1.0, "dropout keep_prob must lie in (0,1], got " + std::to_string(keep_prob));
  if (mode == Mode::Eval || keep_prob == 1.0) return x;
  // Each 64-bit draw yields two 32-bit uniforms; an element survives when its
  // uniform falls below keep_prob * 2^32.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(keep_prob, 32));
  const T scale = static_cast<T>(1.0 / keep_prob);
  const std::size_t count = x->value.numel();
  Tensor<T> mask = Tensor<T>::uninitialized(x->value.shape());
  Tensor<T> out = x->value;
  T* m = mask.ptr();
  for (std::size_t i = 0; i < count; i += 2) {
    const std::uint64_t bits = rng();
    m[i] = (bits & 0xffffffffu) < threshold ? scale : T{0};
    if (i + 1 < count) m[i + 1] = (bits >> 32) < threshold ? scale : T{0};
  }
  T* o = out.ptr();
#pragma omp simd
  for (std::size_t i = 0; i < count; ++i) o[i] *= m[i];
  return make_node<T>(std::move(out), "dropout", {x}, [mask = std::move(mask)](Node<T>& self) {
    const T* g = self.grad->ptr();
    T* dx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t i = 0; i < mask.numel(); ++i) dx[i] += g[i] * mask[i];
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  GMNET_REQUIRE(logits.rank() == 2, "softmax expects (N,K) logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * k;
    T* prow = p.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (std::size_t j = 0; j < k; ++j) prow[j] /= z;
  }
  return p;
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<std::int32_t>& labels) {
  const Tensor<T>& z = logits->value;
  GMNET_REQUIRE(z.rank() == 2, "softmax_cross_entropy expects (N,K) logits, got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  GMNET_REQUIRE(labels.size() == n, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                  std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    GMNET_REQUIRE(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            "label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " outside [0," +
                std::to_string(k) + ")");
  }
  Tensor<T> probs = softmax_rows(z);
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    T se{0};
    for (std::size_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
    loss += std::log(se) + mx - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  return make_node<T>(Tensor<T>({1}, std::vector<T>{loss}), "softmax_cross_entropy", {logits},
                      [probs = std::move(probs), labels, n, k](Node<T>& self) {
                        const T g = (*self.grad)[0] / static_cast<T>(n);
                        T* dz = self.inputs[0]->grad_buffer().ptr();
                        for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t j = 0; j < k; ++j) {
                            const T onehot = static_cast<std::size_t>(labels[i]) == j ? T{1} : T{0};
                            dz[i * k + j] += g * (probs[i * k + j] - onehot);
                          }
                        }
                      });
}

#define GMNET_INSTANTIATE_OPS(T)                                                            \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> sum<T>(const Var<T>&);                                                    \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                         \
  template Var<T> batch_norm<T>(const Var<T>&, BatchNormState<T>&, Mode);                   \
  template Var<T> relu<T>(const Var<T>&);                                                   \
  template Var<T> avg_pool2d<T>(const Var<T>&, std::size_t, std::size_t);                   \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                        \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> dropout<T>(const Var<T>&, double, Mode, Rng&);                            \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                     \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, const std::vector<std::int32_t>&);

GMNET_INSTANTIATE_OPS(float)
GMNET_INSTANTIATE_OPS(double)

}  // namespace gmnet
