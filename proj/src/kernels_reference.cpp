// SPDX-License-Identifier: Apache-2.0
//
// Direct loop nests. Slow on purpose; no im2col, no threading.

#include <algorithm>

#include "ctlab/kernels.hpp"

namespace ctlab::kernels::reference {

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = accumulate ? c[i * n + j] : T(0);
      for (int kk = 0; kk < k; ++kk) sum += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = sum;
    }
  }
}

template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  const int oh = s.out_h();
  const int ow = s.out_w();
  for (int b = 0; b < s.batch; ++b) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T sum = bias ? bias[oc] : T(0);
          for (int ic = 0; ic < s.in_channels; ++ic) {
            for (int ky = 0; ky < s.kernel; ++ky) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.in_h) continue;
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.in_w) continue;
                sum += weight[((oc * s.in_channels + ic) * s.kernel + ky) * s.kernel + kx] *
                       in[((b * s.in_channels + ic) * s.in_h + iy) * s.in_w + ix];
              }
            }
          }
          out[((b * s.out_channels + oc) * oh + oy) * ow + ox] = sum;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* d_out, T* d_in,
                     T* d_weight, T* d_bias) {
  const int oh = s.out_h();
  const int ow = s.out_w();
  if (d_in) std::fill(d_in, d_in + s.in_size(), T(0));
  for (int b = 0; b < s.batch; ++b) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T g = d_out[((b * s.out_channels + oc) * oh + oy) * ow + ox];
          if (d_bias) d_bias[oc] += g;
          for (int ic = 0; ic < s.in_channels; ++ic) {
            for (int ky = 0; ky < s.kernel; ++ky) {
              const int iy = oy * s.stride - s.pad + ky;
              if (iy < 0 || iy >= s.in_h) continue;
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int ix = ox * s.stride - s.pad + kx;
                if (ix < 0 || ix >= s.in_w) continue;
                const int wi = ((oc * s.in_channels + ic) * s.kernel + ky) * s.kernel + kx;
                const int ii = ((b * s.in_channels + ic) * s.in_h + iy) * s.in_w + ix;
                d_weight[wi] += g * in[ii];
                if (d_in) d_in[ii] += g * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void linear_forward(int batch, int in, int out, const T* x, const T* weight, const T* bias, T* y) {
  for (int b = 0; b < batch; ++b) {
    for (int o = 0; o < out; ++o) {
      T sum = bias ? bias[o] : T(0);
      for (int i = 0; i < in; ++i) sum += x[b * in + i] * weight[o * in + i];
      y[b * out + o] = sum;
    }
  }
}

template <typename T>
void linear_backward(int batch, int in, int out, const T* x, const T* weight, const T* d_y, T* d_x,
                     T* d_weight, T* d_bias) {
  if (d_x) std::fill(d_x, d_x + static_cast<std::size_t>(batch) * in, T(0));
  for (int b = 0; b < batch; ++b) {
    for (int o = 0; o < out; ++o) {
      const T g = d_y[b * out + o];
      if (d_bias) d_bias[o] += g;
      for (int i = 0; i < in; ++i) {
        d_weight[o * in + i] += g * x[b * in + i];
        if (d_x) d_x[b * in + i] += g * weight[o * in + i];
      }
    }
  }
}

#define CTLAB_INSTANTIATE(T)                                                                     \
  template void gemm_nn<T>(int, int, int, const T*, const T*, T*, bool);                        \
  template void conv2d_forward<T>(const ConvShape&, const T*, const T*, const T*, T*);          \
  template void conv2d_backward<T>(const ConvShape&, const T*, const T*, const T*, T*, T*, T*); \
  template void linear_forward<T>(int, int, int, const T*, const T*, const T*, T*);             \
  template void linear_backward<T>(int, int, int, const T*, const T*, const T*, T*, T*, T*);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

}  // namespace ctlab::kernels::reference
