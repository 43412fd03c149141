// SPDX-License-Identifier: Apache-2.0
#include "kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "csmap/tensor.hpp"

namespace csmap::kernels {
namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Columns per GEMM; keeps the im2col buffer cache-sized for large images.
constexpr std::size_t kTargetColumns = 4096;

std::size_t chunk_size(const ConvDims& d) {
  const std::size_t per_sample = d.out_h * d.out_w;
  return std::max<std::size_t>(1, kTargetColumns / std::max<std::size_t>(1, per_sample));
}

// col[(c*K + ky)*K + kx, (b - b0)*P + oy*out_w + ox]
template <typename S>
void im2col(const ConvDims& d, const S* x, std::size_t b0, std::size_t b1, S* col) {
  const std::size_t per_sample = d.out_h * d.out_w;
  const std::size_t cols = (b1 - b0) * per_sample;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(d.padding);
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    for (std::size_t ky = 0; ky < d.kernel; ++ky) {
      for (std::size_t kx = 0; kx < d.kernel; ++kx) {
        S* row = col + ((c * d.kernel + ky) * d.kernel + kx) * cols;
        for (std::size_t b = b0; b < b1; ++b) {
          const S* plane = x + (b * d.in_channels + c) * d.in_h * d.in_w;
          S* dst = row + (b - b0) * per_sample;
          for (std::size_t oy = 0; oy < d.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) {
              std::fill(dst + oy * d.out_w, dst + (oy + 1) * d.out_w, S{0});
              continue;
            }
            const S* src = plane + iy * d.in_w;
            for (std::size_t ox = 0; ox < d.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - pad;
              dst[oy * d.out_w + ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) ? S{0} : src[ix];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const ConvDims& d, const S* col, std::size_t b0, std::size_t b1, S* x) {
  const std::size_t per_sample = d.out_h * d.out_w;
  const std::size_t cols = (b1 - b0) * per_sample;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(d.padding);
  for (std::size_t c = 0; c < d.in_channels; ++c) {
    for (std::size_t ky = 0; ky < d.kernel; ++ky) {
      for (std::size_t kx = 0; kx < d.kernel; ++kx) {
        const S* row = col + ((c * d.kernel + ky) * d.kernel + kx) * cols;
        for (std::size_t b = b0; b < b1; ++b) {
          S* plane = x + (b * d.in_channels + c) * d.in_h * d.in_w;
          const S* src = row + (b - b0) * per_sample;
          for (std::size_t oy = 0; oy < d.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
            S* dst = plane + iy * d.in_w;
            for (std::size_t ox = 0; ox < d.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) - pad;
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.in_w)) dst[ix] += src[oy * d.out_w + ox];
            }
          }
        }
      }
    }
  }
}

// [n, C, P] slice -> [C, chunk*P] matrix and back.
template <typename S>
void gather_channels(const S* nchw, std::size_t channels, std::size_t per_sample, std::size_t b0, std::size_t b1,
                     S* mat) {
  const std::size_t cols = (b1 - b0) * per_sample;
  for (std::size_t b = b0; b < b1; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(nchw + (b * channels + c) * per_sample, per_sample, mat + c * cols + (b - b0) * per_sample);
}

template <typename S>
void scatter_channels(const S* mat, std::size_t channels, std::size_t per_sample, std::size_t b0, std::size_t b1,
                      S* nchw) {
  const std::size_t cols = (b1 - b0) * per_sample;
  for (std::size_t b = b0; b < b1; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(mat + c * cols + (b - b0) * per_sample, per_sample, nchw + (b * channels + c) * per_sample);
}

}  // namespace

template <typename S>
void conv_apply(const ConvDims& d, const S* x, const S* w, S* out) {
  const std::size_t per_sample = d.out_h * d.out_w;
  const std::size_t step = chunk_size(d);
  AlignedVector<S> col(d.patch() * step * per_sample);
  AlignedVector<S> y(d.out_channels * step * per_sample);
  Eigen::Map<const RowMat<S>> wm(w, d.out_channels, d.patch());
  for (std::size_t b0 = 0; b0 < d.n; b0 += step) {
    const std::size_t b1 = std::min(d.n, b0 + step);
    const std::size_t cols = (b1 - b0) * per_sample;
    im2col(d, x, b0, b1, col.data());
    Eigen::Map<const RowMat<S>> cm(col.data(), d.patch(), cols);
    Eigen::Map<RowMat<S>> ym(y.data(), d.out_channels, cols);
    ym.noalias() = wm * cm;
    scatter_channels(y.data(), d.out_channels, per_sample, b0, b1, out);
  }
}

template <typename S>
void conv_adjoint(const ConvDims& d, const S* dy, const S* w, S* dx) {
  const std::size_t per_sample = d.out_h * d.out_w;
  const std::size_t step = chunk_size(d);
  std::fill(dx, dx + d.n * d.in_channels * d.in_h * d.in_w, S{0});
  AlignedVector<S> col(d.patch() * step * per_sample);
  AlignedVector<S> g(d.out_channels * step * per_sample);
  Eigen::Map<const RowMat<S>> wm(w, d.out_channels, d.patch());
  for (std::size_t b0 = 0; b0 < d.n; b0 += step) {
    const std::size_t b1 = std::min(d.n, b0 + step);
    const std::size_t cols = (b1 - b0) * per_sample;
    gather_channels(dy, d.out_channels, per_sample, b0, b1, g.data());
    Eigen::Map<const RowMat<S>> gm(g.data(), d.out_channels, cols);
    Eigen::Map<RowMat<S>> cm(col.data(), d.patch(), cols);
    cm.noalias() = wm.transpose() * gm;
    col2im(d, col.data(), b0, b1, dx);
  }
}

template <typename S>
void conv_weight_grad(const ConvDims& d, const S* x, const S* dy, S* dw) {
  const std::size_t per_sample = d.out_h * d.out_w;
  const std::size_t step = chunk_size(d);
  AlignedVector<S> col(d.patch() * step * per_sample);
  AlignedVector<S> g(d.out_channels * step * per_sample);
  Eigen::Map<RowMat<S>> dwm(dw, d.out_channels, d.patch());
  for (std::size_t b0 = 0; b0 < d.n; b0 += step) {
    const std::size_t b1 = std::min(d.n, b0 + step);
    const std::size_t cols = (b1 - b0) * per_sample;
    im2col(d, x, b0, b1, col.data());
    gather_channels(dy, d.out_channels, per_sample, b0, b1, g.data());
    Eigen::Map<const RowMat<S>> cm(col.data(), d.patch(), cols);
    Eigen::Map<const RowMat<S>> gm(g.data(), d.out_channels, cols);
    dwm.noalias() += gm * cm.transpose();
  }
}

template <typename S>
void dense_forward(std::size_t n, std::size_t in, std::size_t out, const S* x, const S* w, const S* b, S* y) {
  Eigen::Map<const RowMat<S>> xm(x, n, in);
  Eigen::Map<const RowMat<S>> wm(w, out, in);
  Eigen::Map<RowMat<S>> ym(y, n, out);
  ym.noalias() = xm * wm.transpose();
  if (b != nullptr) ym.rowwise() += Eigen::Map<const RowVec<S>>(b, out);
}

template <typename S>
void dense_backward(std::size_t n, std::size_t in, std::size_t out, const S* x, const S* w, const S* dy, S* dx,
                    S* dw, S* db) {
  Eigen::Map<const RowMat<S>> dym(dy, n, out);
  if (dx != nullptr) {
    Eigen::Map<RowMat<S>> dxm(dx, n, in);
    dxm.noalias() = dym * Eigen::Map<const RowMat<S>>(w, out, in);
  }
  if (dw != nullptr) {
    Eigen::Map<RowMat<S>> dwm(dw, out, in);
    dwm.noalias() += dym.transpose() * Eigen::Map<const RowMat<S>>(x, n, in);
  }
  if (db != nullptr) {
    Eigen::Map<RowVec<S>> dbm(db, out);
    dbm += dym.colwise().sum();
  }
}

#define CSMAP_INSTANTIATE(S)                                                                                  \
  template void conv_apply<S>(const ConvDims&, const S*, const S*, S*);                                       \
  template void conv_adjoint<S>(const ConvDims&, const S*, const S*, S*);                                     \
  template void conv_weight_grad<S>(const ConvDims&, const S*, const S*, S*);                                 \
  template void dense_forward<S>(std::size_t, std::size_t, std::size_t, const S*, const S*, const S*, S*);    \
  template void dense_backward<S>(std::size_t, std::size_t, std::size_t, const S*, const S*, const S*, S*, S*, \
                                  S*);

CSMAP_INSTANTIATE(float)
CSMAP_INSTANTIATE(double)

#undef CSMAP_INSTANTIATE

}  // namespace csmap::kernels
