// SPDX-License-Identifier: Apache-2.0
//
// Raw compute kernels behind the graph ops. All image buffers are NCHW.
#pragma once

#include <cstddef>

namespace csmap::kernels {

/// Geometry of a strided 2-D convolution seen from the forward conv:
/// input [n, in_channels, in_h, in_w] -> output [n, out_channels, out_h, out_w],
/// weight [out_channels, in_channels, kernel, kernel].
struct ConvDims {
  std::size_t n = 0;
  std::size_t in_channels = 0, in_h = 0, in_w = 0;
  std::size_t out_channels = 0, out_h = 0, out_w = 0;
  std::size_t kernel = 0, stride = 1, padding = 0;

  std::size_t patch() const { return in_channels * kernel * kernel; }
};

/// out = conv(x, w). Overwrites `out`.
template <typename S>
void conv_apply(const ConvDims& d, const S* x, const S* w, S* out);

/// dx = conv^T(dy, w), the adjoint of conv_apply in x. Overwrites `dx`.
/// This is also the forward pass of a transposed convolution.
template <typename S>
void conv_adjoint(const ConvDims& d, const S* dy, const S* w, S* dx);

/// dw += dy (*) x, the adjoint of conv_apply in w.
template <typename S>
void conv_weight_grad(const ConvDims& d, const S* x, const S* dy, S* dw);

/// y[n, out] = x[n, in] * w[out, in]^T + b
template <typename S>
void dense_forward(std::size_t n, std::size_t in, std::size_t out, const S* x, const S* w, const S* b, S* y);

/// dx = dy * w (overwrites), dw += dy^T * x, db += colsum(dy). Null outputs are skipped.
template <typename S>
void dense_backward(std::size_t n, std::size_t in, std::size_t out, const S* x, const S* w, const S* dy, S* dx,
                    S* dw, S* db);

}  // namespace csmap::kernels
