// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmnet/ops.hpp"

namespace gmnet {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvDims {
  std::size_t n, c, h, w;     // input
  std::size_t o, k;           // output channels, kernel
  std::size_t oh, ow;         // output spatial
  std::size_t groups, stride, pad;

  std::size_t cg() const { return c / groups; }
  std::size_t og() const { return o / groups; }
  std::size_t col_rows() const { return c * k * k; }
  std::size_t col_cols() const { return oh * ow; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Unfolds one image (c,h,w) into a (c*k*k) x (oh*ow) row-major matrix.
template <typename T>
void im2col(const T* img, const ConvDims& d, T* cols) {
  const std::size_t ncols = d.col_cols();
  for (std::size_t ch = 0; ch < d.c; ++ch) {
    const T* plane = img + ch * d.h * d.w;
    for (std::size_t a = 0; a < d.k; ++a) {
      for (std::size_t b = 0; b < d.k; ++b) {
        T* row = cols + ((ch * d.k + a) * d.k + b) * ncols;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + a) - static_cast<long>(d.pad);
          T* dst = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill_n(dst, d.ow, T{0});
            continue;
          }
          const T* src = plane + iy * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + b) - static_cast<long>(d.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(d.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into an image gradient.
template <typename T>
void col2im(const T* cols, const ConvDims& d, T* img) {
  const std::size_t ncols = d.col_cols();
  for (std::size_t ch = 0; ch < d.c; ++ch) {
    T* plane = img + ch * d.h * d.w;
    for (std::size_t a = 0; a < d.k; ++a) {
      for (std::size_t b = 0; b < d.k; ++b) {
        const T* row = cols + ((ch * d.k + a) * d.k + b) * ncols;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + a) - static_cast<long>(d.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          T* dst = plane + iy * d.w;
          const T* src = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + b) - static_cast<long>(d.pad);
            if (ix >= 0 && ix < static_cast<long>(d.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}


// ---- direct path ------------------------------------------------------------
// Stride-1 3x3 convolution over zero-padded planes, used when groups are narrow
// and the per-group GEMMs would be too small to pay for the im2col expansion.

bool use_direct(const ConvDims& d) {
  return d.stride == 1 && d.k == 3 && d.pad == 1 && d.ow >= 12 && d.cg() * d.og() <= 512;
}

// Planes with a one-pixel zero border, laid out back to back. Results are
// computed on rows of the padded width; the last two columns of each row are
// junk and get dropped when copied out.
template <typename T>
struct PaddedPlanes {
  std::size_t w = 0, stride = 0;
  std::vector<T> data;

  PaddedPlanes(std::size_t planes, std::size_t h, std::size_t width)
      : w(width + 2), stride((h + 2) * (width + 2)), data(planes * stride + 3, T{0}) {}

  // Interior writes only; the border stays zero from construction.
  void load(const T* src, std::size_t planes, std::size_t h, std::size_t width) {
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src + (p * h + y) * width, width, data.data() + p * stride + (y + 1) * w + 1);
  }
};

// out[oc][p] += sum_ic sum_ab w[oc][ic][a][b] * in[ic][p + a*wp + b] over the
// flattened range p < oh*wp. Weights are (outs, ins/groups, 3, 3).
template <typename T>
void correlate3(const PaddedPlanes<T>& in, std::size_t ins, const T* w, std::size_t outs, std::size_t groups,
                std::size_t oh, T* out) {
  const std::size_t ig = ins / groups, og = outs / groups, wp = in.w, len = oh * wp;
  for (std::size_t oc = 0; oc < outs; ++oc) {
    const std::size_t j = oc / og;
    T* o = out + oc * len;
    for (std::size_t icl = 0; icl < ig; ++icl) {
      const T* k = w + (oc * ig + icl) * 9;
      const T k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6], k7 = k[7], k8 = k[8];
      const T* r0 = in.data.data() + (j * ig + icl) * in.stride;
      const T* r1 = r0 + wp;
      const T* r2 = r1 + wp;
#pragma omp simd
      for (std::size_t p = 0; p < len; ++p) {
        o[p] += k0 * r0[p] + k1 * r0[p + 1] + k2 * r0[p + 2] + k3 * r1[p] + k4 * r1[p + 1] + k5 * r1[p + 2] +
                k6 * r2[p] + k7 * r2[p + 1] + k8 * r2[p + 2];
      }
    }
  }
}

// dw[oc][ic][a][b] += sum_p g[oc][p] * in[ic][p + a*wp + b]; g is in the wide
// layout with zeros in the junk columns.
template <typename T>
void weight_grad3(const PaddedPlanes<T>& in, const T* g, std::size_t outs, std::size_t ig, std::size_t og,
                  std::size_t oh, T* dw) {
  const std::size_t wp = in.w, len = oh * wp;
  for (std::size_t oc = 0; oc < outs; ++oc) {
    const std::size_t j = oc / og;
    const T* go = g + oc * len;
    for (std::size_t icl = 0; icl < ig; ++icl) {
      const T* r0 = in.data.data() + (j * ig + icl) * in.stride;
      const T* r1 = r0 + wp;
      const T* r2 = r1 + wp;
      T a0{}, a1{}, a2{}, a3{}, a4{}, a5{}, a6{}, a7{}, a8{};
#pragma omp simd reduction(+ : a0, a1, a2, a3, a4, a5, a6, a7, a8)
      for (std::size_t p = 0; p < len; ++p) {
        const T gv = go[p];
        a0 += gv * r0[p];
        a1 += gv * r0[p + 1];
        a2 += gv * r0[p + 2];
        a3 += gv * r1[p];
        a4 += gv * r1[p + 1];
        a5 += gv * r1[p + 2];
        a6 += gv * r2[p];
        a7 += gv * r2[p + 1];
        a8 += gv * r2[p + 2];
      }
      T* k = dw + (oc * ig + icl) * 9;
      k[0] += a0, k[1] += a1, k[2] += a2, k[3] += a3, k[4] += a4;
      k[5] += a5, k[6] += a6, k[7] += a7, k[8] += a8;
    }
  }
}

// Weights for the input-gradient correlation: (c, o/g, 3, 3), spatially flipped.
template <typename T>
std::vector<T> flipped_transpose(const T* w, const ConvDims& d) {
  const std::size_t cg = d.cg(), og = d.og();
  std::vector<T> wt(d.c * og * 9);
  for (std::size_t oc = 0; oc < d.o; ++oc) {
    const std::size_t j = oc / og, ocl = oc % og;
    for (std::size_t icl = 0; icl < cg; ++icl) {
      const T* src = w + (oc * cg + icl) * 9;
      T* dst = wt.data() + ((j * cg + icl) * og + ocl) * 9;
      for (std::size_t t = 0; t < 9; ++t) dst[t] = src[8 - t];
    }
  }
  return wt;
}

template <typename T>
void direct_forward(const ConvDims& d, const T* x, const T* w, T* y) {
  PaddedPlanes<T> in(d.c, d.h, d.w);
  const std::size_t wp = in.w, in_img = d.c * d.h * d.w, out_img = d.o * d.oh * d.ow;
  std::vector<T> wide(d.o * d.oh * wp);
  for (std::size_t i = 0; i < d.n; ++i) {
    in.load(x + i * in_img, d.c, d.h, d.w);
    std::fill(wide.begin(), wide.end(), T{0});
    correlate3(in, d.c, w, d.o, d.groups, d.oh, wide.data());
    T* dst = y + i * out_img;
    for (std::size_t r = 0; r < d.o * d.oh; ++r) std::copy_n(wide.data() + r * wp, d.ow, dst + r * d.ow);
  }
}

// With pad 1 and stride 1 the output grid equals the input grid, so the input
// gradient is the same padded correlation run on dy with flipped weights.
template <typename T>
void direct_backward(const ConvDims& d, const T* x, const T* w, const T* dy, T* dx, T* dw) {
  const std::size_t img = d.c * d.h * d.w, out_img = d.o * d.oh * d.ow;
  PaddedPlanes<T> in(dw ? d.c : 0, d.h, d.w);
  PaddedPlanes<T> gpad(dx ? d.o : 0, d.oh, d.ow);
  std::vector<T> gwide(dw ? d.o * d.oh * in.w : 0, T{0});
  std::vector<T> dxwide(dx ? d.c * d.h * gpad.w : 0);
  const std::vector<T> wt = dx ? flipped_transpose(w, d) : std::vector<T>{};
  for (std::size_t i = 0; i < d.n; ++i) {
    const T* g = dy + i * out_img;
    if (dw) {
      in.load(x + i * img, d.c, d.h, d.w);
      for (std::size_t r = 0; r < d.o * d.oh; ++r) std::copy_n(g + r * d.ow, d.ow, gwide.data() + r * in.w);
      weight_grad3(in, gwide.data(), d.o, d.cg(), d.og(), d.oh, dw);
    }
    if (dx) {
      gpad.load(g, d.o, d.oh, d.ow);
      std::fill(dxwide.begin(), dxwide.end(), T{0});
      correlate3(gpad, d.o, wt.data(), d.c, d.groups, d.h, dxwide.data());
      T* dst = dx + i * img;
      for (std::size_t r = 0; r < d.c * d.h; ++r) {
        const T* src = dxwide.data() + r * gpad.w;
        T* row = dst + r * d.w;
        for (std::size_t c = 0; c < d.w; ++c) row[c] += src[c];
      }
    }
  }
}

}  // namespace

std::size_t count_conv_params(std::size_t k, std::size_t c, std::size_t o, std::size_t g, bool with_bias) {
  if (g == 0 || c % g != 0 || o % g != 0) {
    throw std::invalid_argument("grouped convolution needs c and o divisible by g: c=" + std::to_string(c) +
                                " o=" + std::to_string(o) + " g=" + std::to_string(g));
  }
  return k * k * (c / g) * (o / g) * g + (with_bias ? o : 0);
}

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw std::invalid_argument("convolution stride must be >= 1");
  const std::size_t padded = in + 2 * padding;
  if (padded < k) {
    throw std::invalid_argument("convolution kernel " + std::to_string(k) + " exceeds padded input " +
                                std::to_string(padded));
  }
  if ((padded - k) % stride != 0) {
    throw std::invalid_argument("non-integral convolution output size: (" + std::to_string(in) + " + 2*" +
                                std::to_string(padding) + " - " + std::to_string(k) + ") / " +
                                std::to_string(stride));
  }
  return (padded - k) / stride + 1;
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geo) {
  const Shape& si = input->value.shape();
  const Shape& sw = weight->value.shape();
  if (si.size() != 4) throw std::invalid_argument("conv2d expects (N,C,H,W) input, got " + shape_str(si));
  if (sw.size() != 4 || sw[2] != sw[3]) {
    throw std::invalid_argument("conv2d expects (o, c/g, k, k) weight, got " + shape_str(sw));
  }
  ConvDims d{};
  d.n = si[0];
  d.c = si[1];
  d.h = si[2];
  d.w = si[3];
  d.o = sw[0];
  d.k = sw[2];
  d.groups = geo.groups;
  d.stride = geo.stride;
  d.pad = geo.padding;
  // Validates divisibility and names c, o, g.
  (void)count_conv_params(d.k, d.c, d.o, d.groups, false);
  if (sw[1] != d.cg()) {
    throw std::invalid_argument("conv2d weight " + shape_str(sw) + " expects " + std::to_string(sw[1] * d.groups) +
                                " input channels at g=" + std::to_string(d.groups) + ", input has " +
                                std::to_string(d.c));
  }
  if (bias && bias->value.shape() != Shape{d.o}) {
    throw std::invalid_argument("conv2d bias shape " + shape_str(bias->value.shape()) + " for " +
                                std::to_string(d.o) + " outputs");
  }
  d.oh = conv_output_extent(d.h, d.k, d.stride, d.pad);
  d.ow = conv_output_extent(d.w, d.k, d.stride, d.pad);

  const std::size_t in_img = d.c * d.h * d.w;
  const std::size_t out_img = d.o * d.oh * d.ow;
  const std::size_t ncols = d.col_cols();
  const std::size_t krows = d.cg() * d.k * d.k;  // rows of one group's column block

  Tensor<T> out = Tensor<T>::uninitialized({d.n, d.o, d.oh, d.ow});
  const bool direct = use_direct(d);
  if (direct) direct_forward(d, input->value.ptr(), weight->value.ptr(), out.ptr());
  std::vector<T> cols(d.pointwise() || direct ? 0 : d.col_rows() * ncols);
  for (std::size_t i = 0; i < d.n; ++i) {
    if (direct) break;
    const T* img = input->value.ptr() + i * in_img;
    const T* colp = img;
    if (!d.pointwise()) {
      im2col(img, d, cols.data());
      colp = cols.data();
    }
    for (std::size_t j = 0; j < d.groups; ++j) {
      ConstMapMat<T> Wj(weight->value.ptr() + j * d.og() * krows, d.og(), krows);
      ConstMapMat<T> Cj(colp + j * krows * ncols, krows, ncols);
      MapMat<T> Yj(out.ptr() + i * out_img + j * d.og() * ncols, d.og(), ncols);
      Yj.noalias() = Wj * Cj;
    }
  }
  if (bias) {
    for (std::size_t i = 0; i < d.n; ++i) {
      for (std::size_t oc = 0; oc < d.o; ++oc) {
        T* plane = out.ptr() + i * out_img + oc * ncols;
        const T b = bias->value[oc];
        for (std::size_t p = 0; p < ncols; ++p) plane[p] += b;
      }
    }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(bias);
  return make_node<T>(std::move(out), "conv2d", std::move(inputs), [d, in_img, out_img, ncols, krows](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    Node<T>& w = *self.inputs[1];
    Node<T>* b = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    const T* dy = self.grad->ptr();
    T* dx = in.requires_grad ? in.grad_buffer().ptr() : nullptr;
    T* dw = w.requires_grad ? w.grad_buffer().ptr() : nullptr;
    if (use_direct(d)) {
      direct_backward(d, in.value.ptr(), w.value.ptr(), dy, dx, dw);
      dx = nullptr;
      dw = nullptr;
    }
    std::vector<T> cols(d.pointwise() ? 0 : d.col_rows() * ncols);
    std::vector<T> dcols(dx && !d.pointwise() ? d.col_rows() * ncols : 0);
    for (std::size_t i = 0; i < d.n; ++i) {
      const T* dyi = dy + i * out_img;
      if (dw) {
        const T* colp = in.value.ptr() + i * in_img;
        if (!d.pointwise()) {
          im2col(colp, d, cols.data());
          colp = cols.data();
        }
        for (std::size_t j = 0; j < d.groups; ++j) {
          ConstMapMat<T> Gj(dyi + j * d.og() * ncols, d.og(), ncols);
          ConstMapMat<T> Cj(colp + j * krows * ncols, krows, ncols);
          MapMat<T> dWj(dw + j * d.og() * krows, d.og(), krows);
          dWj.noalias() += Gj * Cj.transpose();
        }
      }
      if (dx) {
        T* target = d.pointwise() ? dx + i * in_img : dcols.data();
        for (std::size_t j = 0; j < d.groups; ++j) {
          ConstMapMat<T> Gj(dyi + j * d.og() * ncols, d.og(), ncols);
          ConstMapMat<T> Wj(w.value.ptr() + j * d.og() * krows, d.og(), krows);
          MapMat<T> dCj(target + j * krows * ncols, krows, ncols);
          if (d.pointwise()) {
            dCj.noalias() += Wj.transpose() * Gj;
          } else {
            dCj.noalias() = Wj.transpose() * Gj;
          }
        }
        if (!d.pointwise()) col2im(dcols.data(), d, dx + i * in_img);
      }
      if (b && b->requires_grad) {
        T* db = b->grad_buffer().ptr();
        for (std::size_t oc = 0; oc < d.o; ++oc) {
          const T* plane = dyi + oc * ncols;
          T acc{0};
          for (std::size_t p = 0; p < ncols; ++p) acc += plane[p];
          db[oc] += acc;
        }
      }
    }
  });
}

template Var<float> conv2d<float>(const Var<float>&, const Var<float>&, const Var<float>&, const ConvGeometry&);
template Var<double> conv2d<double>(const Var<double>&, const Var<double>&, const Var<double>&, const ConvGeometry&);

}  // namespace gmnet
