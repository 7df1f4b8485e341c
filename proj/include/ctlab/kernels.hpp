// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels behind the detector. `ctlab::kernels` holds the OpenMP
// versions used for training; `ctlab::kernels::reference` holds direct serial
// loop nests kept as the test oracle and benchmark baseline.
//
// Every output element is produced by exactly one thread with a fixed
// accumulation order, so results do not depend on the thread count.

#pragma once

#include <cstddef>

namespace ctlab::kernels {

struct ConvShape {
  int batch = 1;
  int in_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t in_size() const { return static_cast<std::size_t>(batch) * in_channels * in_h * in_w; }
  std::size_t out_size() const {
    return static_cast<std::size_t>(batch) * out_channels * out_h() * out_w();
  }
  std::size_t weight_size() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

/// C[M x N] (+)= A[M x K] * B[K x N]
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);
/// C[M x N] (+)= A[K x M]^T * B[K x N]
template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);
/// C[M x N] (+)= A[M x K] * B[N x K]^T
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

/// out = conv(in, weight) + bias, NCHW / OIHW layouts.
template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out);

/// Accumulates into d_weight / d_bias; overwrites d_in when non-null.
template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* d_out, T* d_in,
                     T* d_weight, T* d_bias);

/// y[B x O] = x[B x I] * W[O x I]^T + b
template <typename T>
void linear_forward(int batch, int in, int out, const T* x, const T* weight, const T* bias, T* y);

/// Accumulates d_weight / d_bias; overwrites d_x when non-null.
template <typename T>
void linear_backward(int batch, int in, int out, const T* x, const T* weight, const T* d_y, T* d_x,
                     T* d_weight, T* d_bias);

namespace reference {

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out);

template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* d_out, T* d_in,
                     T* d_weight, T* d_bias);

template <typename T>
void linear_forward(int batch, int in, int out, const T* x, const T* weight, const T* bias, T* y);

template <typename T>
void linear_backward(int batch, int in, int out, const T* x, const T* weight, const T* d_y, T* d_x,
                     T* d_weight, T* d_bias);

}  // namespace reference

}  // namespace ctlab::kernels
