#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fdu/tensor.hpp"

// Low-level layer primitives. Convolutions run as per-sample im2col + GEMM
// with channel-major buffers so no layout transposes are needed. Everything
// is templated on the scalar type: training runs in f32, gradient checking
// instantiates the same code in f64.

namespace fdu::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvDims {
  int in_ch, out_ch, k, stride, pad;
  int in_h, in_w, out_h, out_w;
};

inline ConvDims conv_dims(int in_ch, int out_ch, int k, int stride, int pad, int in_h, int in_w) {
  ConvDims d;
  d.in_ch = in_ch;
  d.out_ch = out_ch;
  d.k = k;
  d.stride = stride;
  d.pad = pad;
  d.in_h = in_h;
  d.in_w = in_w;
  d.out_h = (in_h + 2 * pad - k) / stride + 1;
  d.out_w = (in_w + 2 * pad - k) / stride + 1;
  return d;
}

template <typename T>
void im2col(const T* in, const ConvDims& d, T* cols) {
  const int kk = d.k * d.k;
  const int ow = d.out_w, oh = d.out_h;
  for (int c = 0; c < d.in_ch; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * d.in_h * d.in_w;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        T* row = cols + static_cast<std::size_t>(c * kk + ky * d.k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.in_h) {
            std::fill(row + static_cast<std::size_t>(oy) * ow,
                      row + static_cast<std::size_t>(oy + 1) * ow, T{});
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * d.stride + kx - d.pad;
            row[static_cast<std::size_t>(oy) * ow + ox] =
                (ix < 0 || ix >= d.in_w) ? T{} : plane[static_cast<std::size_t>(iy) * d.in_w + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* cols, const ConvDims& d, T* in_grad) {
  const int kk = d.k * d.k;
  const int ow = d.out_w, oh = d.out_h;
  for (int c = 0; c < d.in_ch; ++c) {
    T* plane = in_grad + static_cast<std::size_t>(c) * d.in_h * d.in_w;
    for (int ky = 0; ky < d.k; ++ky) {
      for (int kx = 0; kx < d.k; ++kx) {
        const T* row = cols + static_cast<std::size_t>(c * kk + ky * d.k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * d.stride + kx - d.pad;
            if (ix < 0 || ix >= d.in_w) continue;
            plane[static_cast<std::size_t>(iy) * d.in_w + ix] +=
                row[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

/// out[b] = weight x im2col(in[b]) + bias. in: [B,Cin,H,W], out: [B,Cout,OH,OW],
/// weight: [Cout, Cin*k*k], bias: [Cout]. `cols` is a scratch buffer of
/// Cin*k*k*OH*OW elements.
template <typename T>
void conv_forward(const Tensor<T>& in, const ConvDims& d, const Tensor<T>& weight,
                  const Tensor<T>& bias, Tensor<T>& out, std::vector<T>& cols) {
  const std::size_t batch = in.dim(0);
  const std::size_t in_sz = static_cast<std::size_t>(d.in_ch) * d.in_h * d.in_w;
  const std::size_t out_sz = static_cast<std::size_t>(d.out_ch) * d.out_h * d.out_w;
  const std::size_t col_rows = static_cast<std::size_t>(d.in_ch) * d.k * d.k;
  const std::size_t col_cols = static_cast<std::size_t>(d.out_h) * d.out_w;
  cols.resize(col_rows * col_cols);
  ConstMatMap<T> w(weight.data.data(), d.out_ch, static_cast<Eigen::Index>(col_rows));
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(in.data.data() + b * in_sz, d, cols.data());
    ConstMatMap<T> c(cols.data(), static_cast<Eigen::Index>(col_rows),
                     static_cast<Eigen::Index>(col_cols));
    MatMap<T> o(out.data.data() + b * out_sz, d.out_ch, static_cast<Eigen::Index>(col_cols));
    o.noalias() = w * c;
    for (int oc = 0; oc < d.out_ch; ++oc) o.row(oc).array() += bias.data[static_cast<std::size_t>(oc)];
  }
}

/// Accumulates weight/bias gradients and writes the input gradient.
/// Pass in_grad == nullptr to skip the input gradient (first layer, params-only).
template <typename T>
void conv_backward(const Tensor<T>& in, const ConvDims& d, const Tensor<T>& weight,
                   const Tensor<T>& out_grad, Tensor<T>& weight_grad, Tensor<T>& bias_grad,
                   Tensor<T>* in_grad, std::vector<T>& cols, std::vector<T>& dcols) {
  const std::size_t batch = in.dim(0);
  const std::size_t in_sz = static_cast<std::size_t>(d.in_ch) * d.in_h * d.in_w;
  const std::size_t out_sz = static_cast<std::size_t>(d.out_ch) * d.out_h * d.out_w;
  const std::size_t col_rows = static_cast<std::size_t>(d.in_ch) * d.k * d.k;
  const std::size_t col_cols = static_cast<std::size_t>(d.out_h) * d.out_w;
  cols.resize(col_rows * col_cols);
  dcols.resize(col_rows * col_cols);
  ConstMatMap<T> w(weight.data.data(), d.out_ch, static_cast<Eigen::Index>(col_rows));
  MatMap<T> wg(weight_grad.data.data(), d.out_ch, static_cast<Eigen::Index>(col_rows));
  if (in_grad) std::fill(in_grad->data.begin(), in_grad->data.end(), T{});
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(in.data.data() + b * in_sz, d, cols.data());
    ConstMatMap<T> c(cols.data(), static_cast<Eigen::Index>(col_rows),
                     static_cast<Eigen::Index>(col_cols));
    ConstMatMap<T> og(out_grad.data.data() + b * out_sz, d.out_ch,
                      static_cast<Eigen::Index>(col_cols));
    wg.noalias() += og * c.transpose();
    for (int oc = 0; oc < d.out_ch; ++oc) {
      bias_grad.data[static_cast<std::size_t>(oc)] += og.row(oc).sum();
    }
    if (in_grad) {
      MatMap<T> dc(dcols.data(), static_cast<Eigen::Index>(col_rows),
                   static_cast<Eigen::Index>(col_cols));
      dc.noalias() = w.transpose() * og;
      col2im_accumulate(dcols.data(), d, in_grad->data.data() + b * in_sz);
    }
  }
}

/// 2x2 max pool, stride 2. Records the argmax offset for the backward pass.
template <typename T>
void maxpool_forward(const Tensor<T>& in, int channels, int in_h, int in_w, Tensor<T>& out,
                     std::vector<std::uint32_t>& argmax) {
  const std::size_t batch = in.dim(0);
  const int oh = in_h / 2, ow = in_w / 2;
  argmax.resize(batch * static_cast<std::size_t>(channels) * oh * ow);
  std::size_t oi = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const T* plane =
          in.data.data() + (b * channels + static_cast<std::size_t>(c)) * in_h * in_w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          std::uint32_t best_idx = static_cast<std::uint32_t>((oy * 2) * in_w + ox * 2);
          T best = plane[best_idx];
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::uint32_t idx =
                  static_cast<std::uint32_t>((oy * 2 + dy) * in_w + (ox * 2 + dx));
              if (plane[idx] > best) {  // ties keep the first (row-major) cell
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          out.data[oi] = best;
          argmax[oi] = best_idx;
          ++oi;
        }
      }
    }
  }
}

template <typename T>
void maxpool_backward(const Tensor<T>& out_grad, int channels, int in_h, int in_w,
                      const std::vector<std::uint32_t>& argmax, Tensor<T>& in_grad) {
  const std::size_t batch = in_grad.dim(0);
  const int oh = in_h / 2, ow = in_w / 2;
  std::fill(in_grad.data.begin(), in_grad.data.end(), T{});
  std::size_t oi = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      T* plane = in_grad.data.data() + (b * channels + static_cast<std::size_t>(c)) * in_h * in_w;
      for (int i = 0; i < oh * ow; ++i, ++oi) plane[argmax[oi]] += out_grad.data[oi];
    }
  }
}

/// ReLU with the derivative at 0 defined as 0 (mask is pre > 0).
template <typename T>
void relu_forward(Tensor<T>& t) {
  for (T& v : t.data) v = v > T{} ? v : T{};
}

template <typename T>
void relu_backward(const Tensor<T>& pre, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (!(pre.data[i] > T{})) grad.data[i] = T{};
  }
}

/// out = in x weight^T + bias. in: [B, in_dim], weight: [out_dim, in_dim].
template <typename T>
void dense_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                   Tensor<T>& out) {
  const Eigen::Index b = static_cast<Eigen::Index>(in.dim(0));
  const Eigen::Index in_dim = static_cast<Eigen::Index>(weight.dim(1));
  const Eigen::Index out_dim = static_cast<Eigen::Index>(weight.dim(0));
  ConstMatMap<T> x(in.data.data(), b, in_dim);
  ConstMatMap<T> w(weight.data.data(), out_dim, in_dim);
  MatMap<T> o(out.data.data(), b, out_dim);
  o.noalias() = x * w.transpose();
  for (Eigen::Index r = 0; r < b; ++r) {
    for (Eigen::Index c = 0; c < out_dim; ++c) {
      o(r, c) += bias.data[static_cast<std::size_t>(c)];
    }
  }
}

template <typename T>
void dense_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& out_grad,
                    Tensor<T>& weight_grad, Tensor<T>& bias_grad, Tensor<T>* in_grad) {
  const Eigen::Index b = static_cast<Eigen::Index>(in.dim(0));
  const Eigen::Index in_dim = static_cast<Eigen::Index>(weight.dim(1));
  const Eigen::Index out_dim = static_cast<Eigen::Index>(weight.dim(0));
  ConstMatMap<T> x(in.data.data(), b, in_dim);
  ConstMatMap<T> w(weight.data.data(), out_dim, in_dim);
  ConstMatMap<T> og(out_grad.data.data(), b, out_dim);
  MatMap<T> wg(weight_grad.data.data(), out_dim, in_dim);
  wg.noalias() += og.transpose() * x;
  for (Eigen::Index c = 0; c < out_dim; ++c) {
    bias_grad.data[static_cast<std::size_t>(c)] += og.col(c).sum();
  }
  if (in_grad) {
    MatMap<T> ig(in_grad->data.data(), b, in_dim);
    ig.noalias() = og * w;
  }
}

/// Nearest-neighbour 2x upsample, [B,C,H,W] -> [B,C,2H,2W].
template <typename T>
void upsample2_forward(const Tensor<T>& in, Tensor<T>& out) {
  const std::size_t b = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T* src = in.data.data() + bc * h * w;
    T* dst = out.data.data() + bc * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) {
        dst[y * 2 * w + x] = src[(y / 2) * w + (x / 2)];
      }
    }
  }
}

template <typename T>
void upsample2_backward(const Tensor<T>& out_grad, Tensor<T>& in_grad) {
  const std::size_t b = in_grad.dim(0), c = in_grad.dim(1), h = in_grad.dim(2),
                    w = in_grad.dim(3);
  std::fill(in_grad.data.begin(), in_grad.data.end(), T{});
  for (std::size_t bc = 0; bc < b * c; ++bc) {
    const T* src = out_grad.data.data() + bc * 4 * h * w;
    T* dst = in_grad.data.data() + bc * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t x = 0; x < 2 * w; ++x) {
        dst[(y / 2) * w + (x / 2)] += src[y * 2 * w + x];
      }
    }
  }
}

/// Mean softmax cross-entropy in f64 with the logit gradient in T.
/// Returns the loss; writes (softmax - onehot)/B into dlogits when non-null.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const TensorI64& labels,
                             Tensor<T>* dlogits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  std::vector<double> p(c);
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = logits.data.data() + i * c;
    double m = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) - m);
      z += p[j];
    }
    const auto y = static_cast<std::size_t>(labels.data[i]);
    total += std::log(z) - (static_cast<double>(row[y]) - m);
    if (dlogits) {
      T* drow = dlogits->data.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double soft = p[j] / z;
        drow[j] = static_cast<T>((soft - (j == y ? 1.0 : 0.0)) / static_cast<double>(b));
      }
    }
  }
  return total / static_cast<double>(b);
}

}  // namespace fdu::nn
