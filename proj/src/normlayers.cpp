// SPDX-License-Identifier: Apache-2.0

#include "ctlab/normlayers.hpp"

#include <cmath>
#include <string>

namespace ctlab {

namespace {

int stats_index(NormKind kind, Split split) {
  return kind == NormKind::kBatch ? 0 : static_cast<int>(split);
}

template <typename T>
void check_affine(const Tensor<T>& x, std::span<const T> alpha, std::span<const T> beta) {
  if (alpha.size() != static_cast<std::size_t>(x.c) || beta.size() != static_cast<std::size_t>(x.c)) {
    throw ShapeError("norm layer: affine size does not match channel count " + std::to_string(x.c));
  }
}

}  // namespace

template <typename T>
void norm_forward_train(const Tensor<T>& x, std::span<const Segment> segments, NormKind kind,
                        const NormOptions& opts, NormStats<T>& stats, std::span<const T> alpha,
                        std::span<const T> beta, Tensor<T>& y, NormTape<T>* tape) {
  check_affine(x, alpha, beta);
  if (stats.channels() != x.c) throw ShapeError("norm layer: statistics size mismatch");
  if (!y.same_shape(x)) y = Tensor<T>(x.n, x.c, x.h, x.w);
  const int hw = x.h * x.w;
  const std::size_t nseg = segments.size();
  if (tape) {
    tape->n = x.n;
    tape->c = x.c;
    tape->hw = hw;
    tape->segments.assign(segments.begin(), segments.end());
    tape->xhat.resize(x.size());
    tape->inv_std.assign(nseg * x.c, T(0));
    tape->batch_mean.assign(nseg * x.c, T(0));
    tape->batch_var.assign(nseg * x.c, T(0));
  }

  for (std::size_t si = 0; si < nseg; ++si) {
    const Segment& seg = segments[si];
    if (seg.count < 2) {
      throw TrainingError("norm layer: batch of " + std::to_string(seg.count) +
                          " sample(s) in a training-mode forward; need at least 2");
    }
    if (seg.begin < 0 || seg.begin + seg.count > x.n) throw ShapeError("norm layer: segment out of range");
    const int idx = stats_index(kind, seg.split);
    const double m = static_cast<double>(seg.count) * hw;

    for (int ch = 0; ch < x.c; ++ch) {
      double sum = 0.0;
      for (int i = seg.begin; i < seg.begin + seg.count; ++i) {
        const T* p = x.sample(i) + static_cast<std::size_t>(ch) * hw;
        for (int k = 0; k < hw; ++k) sum += p[k];
      }
      const double mean = sum / m;
      double sq = 0.0;
      for (int i = seg.begin; i < seg.begin + seg.count; ++i) {
        const T* p = x.sample(i) + static_cast<std::size_t>(ch) * hw;
        for (int k = 0; k < hw; ++k) {
          const double d = p[k] - mean;
          sq += d * d;
        }
      }
      const double var = sq / m;
      const T inv_std = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
      const T mu = static_cast<T>(mean);
      for (int i = seg.begin; i < seg.begin + seg.count; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * x.sample_size() + static_cast<std::size_t>(ch) * hw;
        const T* p = x.data.data() + off;
        T* q = y.data.data() + off;
        T* xh = tape ? tape->xhat.data() + off : nullptr;
        for (int k = 0; k < hw; ++k) {
          const T n = (p[k] - mu) * inv_std;
          if (xh) xh[k] = n;
          q[k] = alpha[ch] * n + beta[ch];
        }
      }
      if (tape) {
        tape->inv_std[si * x.c + ch] = inv_std;
        tape->batch_mean[si * x.c + ch] = mu;
        tape->batch_var[si * x.c + ch] = static_cast<T>(var);
      }
      const T rho = static_cast<T>(opts.momentum);
      stats.mean[idx][ch] = (T(1) - rho) * stats.mean[idx][ch] + rho * mu;
      stats.var[idx][ch] = (T(1) - rho) * stats.var[idx][ch] + rho * static_cast<T>(var);
    }
    ++stats.updates[idx];
  }
}

template <typename T>
std::pair<T, T> inference_moments(NormKind kind, const NormOptions& opts, const NormStats<T>& stats,
                                  int channel) {
  if (kind == NormKind::kBatch) {
    if (stats.updates[0] == 0) throw InferenceError("batch norm: running statistics never updated");
    return {stats.mean[0][channel], stats.var[0][channel]};
  }
  if (stats.updates[0] == 0 || stats.updates[1] == 0) {
    throw InferenceError(std::string("data-specific norm: ") +
                         (stats.updates[0] == 0 ? "labeled" : "unlabeled") +
                         " split statistics never updated");
  }
  const T mean = (stats.mean[0][channel] + stats.mean[1][channel]) / T(2);
  T var;
  if (opts.merge == VarianceMerge::kVariance) {
    var = (stats.var[0][channel] + stats.var[1][channel]) / T(2);
  } else {
    const T sd = (std::sqrt(stats.var[0][channel]) + std::sqrt(stats.var[1][channel])) / T(2);
    var = sd * sd;
  }
  return {mean, var};
}

template <typename T>
void norm_forward_infer(const Tensor<T>& x, NormKind kind, const NormOptions& opts,
                        const NormStats<T>& stats, std::span<const T> alpha, std::span<const T> beta,
                        Tensor<T>& y) {
  check_affine(x, alpha, beta);
  if (stats.channels() != x.c) throw ShapeError("norm layer: statistics size mismatch");
  if (!y.same_shape(x)) y = Tensor<T>(x.n, x.c, x.h, x.w);
  const int hw = x.h * x.w;
  for (int ch = 0; ch < x.c; ++ch) {
    const auto [mean, var] = inference_moments(kind, opts, stats, ch);
    const T scale = alpha[ch] / std::sqrt(var + static_cast<T>(opts.eps));
    const T shift = beta[ch] - scale * mean;
    for (int i = 0; i < x.n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * x.sample_size() + static_cast<std::size_t>(ch) * hw;
      const T* p = x.data.data() + off;
      T* q = y.data.data() + off;
      for (int k = 0; k < hw; ++k) q[k] = scale * p[k] + shift;
    }
  }
}

template <typename T>
void norm_backward(const NormTape<T>& tape, const Tensor<T>& dy, std::span<const T> alpha, Tensor<T>& dx,
                   std::span<T> d_alpha, std::span<T> d_beta) {
  if (dy.n != tape.n || dy.c != tape.c || dy.h * dy.w != tape.hw) throw ShapeError("norm backward: shape");
  if (!dx.same_shape(dy)) dx = Tensor<T>(dy.n, dy.c, dy.h, dy.w);
  const int hw = tape.hw;
  for (std::size_t si = 0; si < tape.segments.size(); ++si) {
    const Segment& seg = tape.segments[si];
    const double m = static_cast<double>(seg.count) * hw;
    for (int ch = 0; ch < tape.c; ++ch) {
      double sum_dy = 0.0;
      double sum_dy_xhat = 0.0;
      for (int i = seg.begin; i < seg.begin + seg.count; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * dy.sample_size() + static_cast<std::size_t>(ch) * hw;
        const T* g = dy.data.data() + off;
        const T* xh = tape.xhat.data() + off;
        for (int k = 0; k < hw; ++k) {
          sum_dy += g[k];
          sum_dy_xhat += static_cast<double>(g[k]) * xh[k];
        }
      }
      d_alpha[ch] += static_cast<T>(sum_dy_xhat);
      d_beta[ch] += static_cast<T>(sum_dy);
      const T inv_std = tape.inv_std[si * tape.c + ch];
      const T a = alpha[ch];
      const T mean_dy = static_cast<T>(sum_dy / m);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
      for (int i = seg.begin; i < seg.begin + seg.count; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * dy.sample_size() + static_cast<std::size_t>(ch) * hw;
        const T* g = dy.data.data() + off;
        const T* xh = tape.xhat.data() + off;
        T* out = dx.data.data() + off;
        for (int k = 0; k < hw; ++k) out[k] = a * inv_std * (g[k] - mean_dy - xh[k] * mean_dy_xhat);
      }
    }
  }
}

template <typename T>
Tensor<T> dbn_forward_train(const Tensor<T>& x, Split split, DbnState<T>& state, NormTape<T>* tape) {
  Tensor<T> y;
  const Segment seg{split, 0, x.n};
  norm_forward_train<T>(x, std::span<const Segment>(&seg, 1), NormKind::kDataSpecific, state.options,
                        state.stats, state.alpha, state.beta, y, tape);
  return y;
}

template <typename T>
Tensor<T> dbn_forward_infer(const Tensor<T>& x, const DbnState<T>& state) {
  Tensor<T> y;
  norm_forward_infer<T>(x, NormKind::kDataSpecific, state.options, state.stats, state.alpha, state.beta, y);
  return y;
}

template <typename T>
Tensor<T> bn_forward_train(const Tensor<T>& x, DbnState<T>& state, NormTape<T>* tape) {
  Tensor<T> y;
  const Segment seg{Split::kLabeled, 0, x.n};
  norm_forward_train<T>(x, std::span<const Segment>(&seg, 1), NormKind::kBatch, state.options, state.stats,
                        state.alpha, state.beta, y, tape);
  return y;
}

template <typename T>
Tensor<T> bn_forward_infer(const Tensor<T>& x, const DbnState<T>& state) {
  Tensor<T> y;
  norm_forward_infer<T>(x, NormKind::kBatch, state.options, state.stats, state.alpha, state.beta, y);
  return y;
}

#define CTLAB_INSTANTIATE(T)                                                                              \
  template void norm_forward_train<T>(const Tensor<T>&, std::span<const Segment>, NormKind,             \
                                      const NormOptions&, NormStats<T>&, std::span<const T>,           \
                                      std::span<const T>, Tensor<T>&, NormTape<T>*);                    \
  template void norm_forward_infer<T>(const Tensor<T>&, NormKind, const NormOptions&,                    \
                                      const NormStats<T>&, std::span<const T>, std::span<const T>,     \
                                      Tensor<T>&);                                                       \
  template void norm_backward<T>(const NormTape<T>&, const Tensor<T>&, std::span<const T>, Tensor<T>&, \
                                 std::span<T>, std::span<T>);                                            \
  template std::pair<T, T> inference_moments<T>(NormKind, const NormOptions&, const NormStats<T>&, int); \
  template Tensor<T> dbn_forward_train<T>(const Tensor<T>&, Split, DbnState<T>&, NormTape<T>*);          \
  template Tensor<T> dbn_forward_infer<T>(const Tensor<T>&, const DbnState<T>&);                         \
  template Tensor<T> bn_forward_train<T>(const Tensor<T>&, DbnState<T>&, NormTape<T>*);                  \
  template Tensor<T> bn_forward_infer<T>(const Tensor<T>&, const DbnState<T>&);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

}  // namespace ctlab
