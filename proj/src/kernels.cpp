// SPDX-License-Identifier: Apache-2.0

#include "ctlab/kernels.hpp"

#include <algorithm>
#include <vector>

namespace ctlab::kernels {

namespace {

// Serial row-range kernels. The public entry points split rows across threads;
// the convolution kernels split images across threads and call these directly.

constexpr int kMr = 4;   // rows per register block
constexpr int kNr = 16;  // columns per register block

/// Serial core: rows [r0, r1) of C[M x N] (+)= A * B, where element (i, kk) of
/// A sits at a[i * as_i + kk * as_k] and B is a contiguous K x N matrix. Each
/// output element accumulates over kk in increasing order.
template <typename T>
void gemm_rows(int r0, int r1, int n, int k, const T* a, std::ptrdiff_t as_i, std::ptrdiff_t as_k, const T* b,
               T* c, bool accumulate) {
  int i = r0;
  for (; i + kMr <= r1; i += kMr) {
    const T* ar[kMr];
    for (int r = 0; r < kMr; ++r) ar[r] = a + (i + r) * as_i;
    int j = 0;
    for (; j + kNr <= n; j += kNr) {
      T acc[kMr][kNr];
      for (int r = 0; r < kMr; ++r) {
        const T* crow = c + static_cast<std::size_t>(i + r) * n + j;
        for (int q = 0; q < kNr; ++q) acc[r][q] = accumulate ? crow[q] : T(0);
      }
      for (int kk = 0; kk < k; ++kk) {
        const T* brow = b + static_cast<std::size_t>(kk) * n + j;
        for (int r = 0; r < kMr; ++r) {
          const T av = ar[r][kk * as_k];
#pragma omp simd
          for (int q = 0; q < kNr; ++q) acc[r][q] += av * brow[q];
        }
      }
      for (int r = 0; r < kMr; ++r) {
        T* crow = c + static_cast<std::size_t>(i + r) * n + j;
        for (int q = 0; q < kNr; ++q) crow[q] = acc[r][q];
      }
    }
    if (j < n) {
      const int nr = n - j;
      T acc[kMr][kNr];
      for (int r = 0; r < kMr; ++r) {
        const T* crow = c + static_cast<std::size_t>(i + r) * n + j;
        for (int q = 0; q < nr; ++q) acc[r][q] = accumulate ? crow[q] : T(0);
      }
      for (int kk = 0; kk < k; ++kk) {
        const T* brow = b + static_cast<std::size_t>(kk) * n + j;
        for (int r = 0; r < kMr; ++r) {
          const T av = ar[r][kk * as_k];
          for (int q = 0; q < nr; ++q) acc[r][q] += av * brow[q];
        }
      }
      for (int r = 0; r < kMr; ++r) {
        T* crow = c + static_cast<std::size_t>(i + r) * n + j;
        for (int q = 0; q < nr; ++q) crow[q] = acc[r][q];
      }
    }
  }
  for (; i < r1; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    for (int kk = 0; kk < k; ++kk) {
      const T av = a[i * as_i + kk * as_k];
      const T* brow = b + static_cast<std::size_t>(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// dst[K x N] = src[N x K]^T
template <typename T>
void transpose(int rows, int cols, const T* src, T* dst) {
  for (int r = 0; r < rows; ++r) {
    for (int q = 0; q < cols; ++q) dst[static_cast<std::size_t>(q) * rows + r] = src[static_cast<std::size_t>(r) * cols + q];
  }
}

/// Splits the rows of C into register blocks across threads.
template <typename T>
void gemm_parallel(int m, int n, int k, const T* a, std::ptrdiff_t as_i, std::ptrdiff_t as_k, const T* b, T* c,
                   bool accumulate) {
  const int blocks = (m + kMr - 1) / kMr;
#pragma omp parallel for schedule(static)
  for (int blk = 0; blk < blocks; ++blk) {
    gemm_rows(blk * kMr, std::min(m, (blk + 1) * kMr), n, k, a, as_i, as_k, b, c, accumulate);
  }
}

template <typename T>
void im2col(const ConvShape& s, const T* in, T* col) {
  const int oh = s.out_h();
  const int ow = s.out_w();
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < s.in_channels; ++ci) {
    const T* plane = in + static_cast<std::size_t>(ci) * s.in_h * s.in_w;
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        T* row = col + ((static_cast<std::size_t>(ci) * s.kernel + ky) * s.kernel + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= s.in_h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * s.in_w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            dst[ox] = (ix >= 0 && ix < s.in_w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvShape& s, const T* col, T* in) {
  const int oh = s.out_h();
  const int ow = s.out_w();
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::fill(in, in + static_cast<std::size_t>(s.in_channels) * s.in_h * s.in_w, T(0));
  for (int ci = 0; ci < s.in_channels; ++ci) {
    T* plane = in + static_cast<std::size_t>(ci) * s.in_h * s.in_w;
    for (int ky = 0; ky < s.kernel; ++ky) {
      for (int kx = 0; kx < s.kernel; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(ci) * s.kernel + ky) * s.kernel + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= s.in_h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * s.in_w;
          const T* src = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix >= 0 && ix < s.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  gemm_parallel(m, n, k, a, k, 1, b, c, accumulate);
}

template <typename T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  gemm_parallel(m, n, k, a, 1, m, b, c, accumulate);
}

template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> bt(static_cast<std::size_t>(k) * n);
  transpose(n, k, b, bt.data());
  gemm_parallel(m, n, k, a, k, 1, bt.data(), c, accumulate);
}

template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  const int p = s.out_h() * s.out_w();
  const int ckk = s.in_channels * s.kernel * s.kernel;
  const std::size_t in_stride = static_cast<std::size_t>(s.in_channels) * s.in_h * s.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(s.out_channels) * p;
#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(ckk) * p);
#pragma omp for schedule(static)
    for (int b = 0; b < s.batch; ++b) {
      im2col(s, in + b * in_stride, col.data());
      T* o = out + b * out_stride;
      for (int oc = 0; oc < s.out_channels; ++oc) {
        std::fill(o + static_cast<std::size_t>(oc) * p, o + static_cast<std::size_t>(oc + 1) * p,
                  bias ? bias[oc] : T(0));
      }
      gemm_rows(0, s.out_channels, p, ckk, weight, ckk, 1, col.data(), o, true);
    }
  }
}

template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* d_out, T* d_in,
                     T* d_weight, T* d_bias) {
  const int p = s.out_h() * s.out_w();
  const int ckk = s.in_channels * s.kernel * s.kernel;
  const std::size_t in_stride = static_cast<std::size_t>(s.in_channels) * s.in_h * s.in_w;
  const std::size_t out_stride = static_cast<std::size_t>(s.out_channels) * p;
  const std::size_t wsize = s.weight_size();

  // Per-image weight gradients, reduced below in image order.
  std::vector<T> dw_per_image(wsize * s.batch);
#pragma omp parallel
  {
    std::vector<T> col(static_cast<std::size_t>(ckk) * p);
    std::vector<T> dcol(d_in ? static_cast<std::size_t>(ckk) * p : 0);
    std::vector<T> col_t(static_cast<std::size_t>(ckk) * p);
#pragma omp for schedule(static)
    for (int b = 0; b < s.batch; ++b) {
      const T* go = d_out + b * out_stride;
      im2col(s, in + b * in_stride, col.data());
      transpose(ckk, p, col.data(), col_t.data());
      gemm_rows(0, s.out_channels, ckk, p, go, p, 1, col_t.data(), dw_per_image.data() + b * wsize, false);
      if (d_in) {
        gemm_rows(0, ckk, p, s.out_channels, weight, 1, ckk, go, dcol.data(), false);
        col2im(s, dcol.data(), d_in + b * in_stride);
      }
    }
  }
  for (int b = 0; b < s.batch; ++b) {
    const T* src = dw_per_image.data() + b * wsize;
    for (std::size_t i = 0; i < wsize; ++i) d_weight[i] += src[i];
  }
  if (d_bias) {
    for (int b = 0; b < s.batch; ++b) {
      for (int oc = 0; oc < s.out_channels; ++oc) {
        const T* g = d_out + b * out_stride + static_cast<std::size_t>(oc) * p;
        T sum = T(0);
        for (int i = 0; i < p; ++i) sum += g[i];
        d_bias[oc] += sum;
      }
    }
  }
}

template <typename T>
void linear_forward(int batch, int in, int out, const T* x, const T* weight, const T* bias, T* y) {
  gemm_nt(batch, out, in, x, weight, y, false);
  if (bias) {
    for (int b = 0; b < batch; ++b) {
      T* row = y + static_cast<std::size_t>(b) * out;
      for (int o = 0; o < out; ++o) row[o] += bias[o];
    }
  }
}

template <typename T>
void linear_backward(int batch, int in, int out, const T* x, const T* weight, const T* d_y, T* d_x,
                     T* d_weight, T* d_bias) {
  gemm_tn(out, in, batch, d_y, x, d_weight, true);
  if (d_bias) {
    for (int b = 0; b < batch; ++b) {
      const T* row = d_y + static_cast<std::size_t>(b) * out;
      for (int o = 0; o < out; ++o) d_bias[o] += row[o];
    }
  }
  if (d_x) gemm_nn(batch, in, out, d_y, weight, d_x, false);
}

#define CTLAB_INSTANTIATE(T)                                                                        \
  template void gemm_nn<T>(int, int, int, const T*, const T*, T*, bool);                           \
  template void gemm_tn<T>(int, int, int, const T*, const T*, T*, bool);                           \
  template void gemm_nt<T>(int, int, int, const T*, const T*, T*, bool);                           \
  template void conv2d_forward<T>(const ConvShape&, const T*, const T*, const T*, T*);             \
  template void conv2d_backward<T>(const ConvShape&, const T*, const T*, const T*, T*, T*, T*);    \
  template void linear_forward<T>(int, int, int, const T*, const T*, const T*, T*);                \
  template void linear_backward<T>(int, int, int, const T*, const T*, const T*, T*, T*, T*);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

}  // namespace ctlab::kernels
