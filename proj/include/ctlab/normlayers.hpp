// SPDX-License-Identifier: Apache-2.0
//
// Batch normalization and data-specific batch normalization (DBN).
//
// DBN keeps one set of running statistics per data split (labeled and
// unlabeled) and a single shared affine transform. Training-mode forwards
// normalize each split with its own batch moments; inference uses the mean of
// the two running sets. Plain BN is the same layer with one statistics set.

#pragma once

#include <array>
#include <span>
#include <vector>

#include "ctlab/tensor.hpp"

namespace ctlab {

enum class Split { kLabeled = 0, kUnlabeled = 1 };

enum class NormKind {
  kBatch,         // one statistics set shared by every sample
  kDataSpecific,  // one statistics set per Split, shared affine
};

/// How the two split variances combine at inference. Means are always
/// averaged; variances are averaged by default, standard deviations on request.
enum class VarianceMerge { kVariance, kStdDev };

struct NormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  VarianceMerge merge = VarianceMerge::kVariance;
};

/// Running statistics. Only index 0 is used by plain BN.
template <typename T>
struct NormStats {
  std::array<std::vector<T>, 2> mean;
  std::array<std::vector<T>, 2> var;
  std::array<long, 2> updates{0, 0};

  NormStats() = default;
  explicit NormStats(int channels) {
    for (int s = 0; s < 2; ++s) {
      mean[s].assign(static_cast<std::size_t>(channels), T(0));
      var[s].assign(static_cast<std::size_t>(channels), T(1));
    }
  }
  int channels() const { return static_cast<int>(mean[0].size()); }
  bool operator==(const NormStats&) const = default;
};

/// A contiguous range of samples in an NCHW batch that belongs to one split.
struct Segment {
  Split split = Split::kLabeled;
  int begin = 0;
  int count = 0;
};

/// Saved values for the backward pass.
template <typename T>
struct NormTape {
  int n = 0, c = 0, hw = 0;
  std::vector<Segment> segments;
  std::vector<T> xhat;              // normalized, pre-affine
  std::vector<T> inv_std;           // [segment][channel]
  std::vector<T> batch_mean;        // [segment][channel]
  std::vector<T> batch_var;         // [segment][channel], biased
};

/// Normalizes each segment with its own batch moments and folds them into the
/// running statistics of that segment's split (split index 0 for kBatch).
/// Throws TrainingError when a segment has fewer than two samples.
template <typename T>
void norm_forward_train(const Tensor<T>& x, std::span<const Segment> segments, NormKind kind,
                        const NormOptions& opts, NormStats<T>& stats, std::span<const T> alpha,
                        std::span<const T> beta, Tensor<T>& y, NormTape<T>* tape);

/// Uses running statistics (merged across splits for kDataSpecific). Throws
/// InferenceError when a required split has never been updated.
template <typename T>
void norm_forward_infer(const Tensor<T>& x, NormKind kind, const NormOptions& opts,
                        const NormStats<T>& stats, std::span<const T> alpha, std::span<const T> beta,
                        Tensor<T>& y);

/// Overwrites dx; accumulates into d_alpha / d_beta.
template <typename T>
void norm_backward(const NormTape<T>& tape, const Tensor<T>& dy, std::span<const T> alpha, Tensor<T>& dx,
                   std::span<T> d_alpha, std::span<T> d_beta);

/// Inference statistics for one channel.
template <typename T>
std::pair<T, T> inference_moments(NormKind kind, const NormOptions& opts, const NormStats<T>& stats,
                                  int channel);

/// Standalone DBN layer: running statistics plus the shared affine pair.
template <typename T>
struct DbnState {
  NormStats<T> stats;
  std::vector<T> alpha;
  std::vector<T> beta;
  NormOptions options;

  explicit DbnState(int channels, NormOptions opts = {})
      : stats(channels), alpha(static_cast<std::size_t>(channels), T(1)),
        beta(static_cast<std::size_t>(channels), T(0)), options(opts) {}
};

/// Whole batch belongs to `split`.
template <typename T>
Tensor<T> dbn_forward_train(const Tensor<T>& x, Split split, DbnState<T>& state, NormTape<T>* tape = nullptr);
template <typename T>
Tensor<T> dbn_forward_infer(const Tensor<T>& x, const DbnState<T>& state);
template <typename T>
Tensor<T> bn_forward_train(const Tensor<T>& x, DbnState<T>& state, NormTape<T>* tape = nullptr);
template <typename T>
Tensor<T> bn_forward_infer(const Tensor<T>& x, const DbnState<T>& state);

}  // namespace ctlab
