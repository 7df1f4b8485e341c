// SPDX-License-Identifier: Apache-2.0
//
// Miniature two-stage detector:
//   backbone  3 x (3x3 conv stride 2 -> norm -> ReLU), channels 16/32/32
//   proposal  1x1 convs: objectness logit and 4 deltas per anchor
//   ROI head  bilinear 4x4 crop -> fc 128 -> ReLU -> (n+1) logits, 4 deltas
//
// Every piece has an explicit backward. Scalar type is a template parameter:
// training runs in float, gradient audits in double.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "ctlab/boxes.hpp"
#include "ctlab/image.hpp"
#include "ctlab/normlayers.hpp"
#include "ctlab/params.hpp"
#include "ctlab/tensor.hpp"

namespace ctlab {

struct DetectorConfig {
  int image_size = 64;
  int num_classes = 3;  // known categories; the head emits num_classes + 1
  std::vector<double> anchor_sizes{12.0, 24.0};
  std::array<int, 3> channels{16, 32, 32};
  int roi_grid = 4;
  int hidden = 128;
  NormKind norm = NormKind::kDataSpecific;
  NormOptions norm_options;
  /// ROI regression outputs are normalized deltas; multiply by these to decode.
  std::array<double, 4> roi_delta_std{0.1, 0.1, 0.2, 0.2};

  static constexpr int kStride = 8;
  int feature_size() const { return image_size / kStride; }
  int anchors_per_cell() const { return static_cast<int>(anchor_sizes.size()); }
  int num_anchors() const { return feature_size() * feature_size() * anchors_per_cell(); }
  int crop_size() const { return channels[2] * roi_grid * roi_grid; }
  void validate() const;
};

/// Trainable parameter indices inside DetectorParams::weights.
enum ParamIndex : std::size_t {
  kConv1W, kConv1B, kNorm1Alpha, kNorm1Beta,
  kConv2W, kConv2B, kNorm2Alpha, kNorm2Beta,
  kConv3W, kConv3B, kNorm3Alpha, kNorm3Beta,
  kRpnClsW, kRpnClsB, kRpnRegW, kRpnRegB,
  kFcW, kFcB, kClsW, kClsB, kRegW, kRegB,
  kParamCount
};

template <typename T>
struct DetectorParams {
  DetectorConfig config;
  ParamSet<T> weights;
  std::array<NormStats<T>, 3> norms;

  /// He fan-in initialization for convs and linears, zero biases, unit/zero affine.
  static DetectorParams init(const DetectorConfig& config, std::uint64_t seed);

  template <typename U>
  DetectorParams<U> cast() const;

  void require_compatible(const DetectorParams& o, const char* what) const;
};

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
struct BackboneTape {
  std::array<Tensor<T>, 3> conv_in;
  std::array<NormTape<T>, 3> norm;
  std::array<Tensor<T>, 3> act;  // post-ReLU; act[2] is the feature map
};

/// Packs images into an NCHW tensor. Throws ShapeError on size mismatch.
template <typename T>
Tensor<T> images_to_tensor(std::span<const Image* const> images, int expected_size);

/// Training mode: norm layers use per-segment batch moments and update the
/// running statistics of `params`.
template <typename T>
Tensor<T> backbone_forward_train(DetectorParams<T>& params, const Tensor<T>& images,
                                 std::span<const Segment> segments, BackboneTape<T>& tape);

/// Inference mode: running statistics, no mutation.
template <typename T>
Tensor<T> backbone_forward_infer(const DetectorParams<T>& params, const Tensor<T>& images);

template <typename T>
void backbone_backward(const DetectorParams<T>& params, const BackboneTape<T>& tape,
                       const Tensor<T>& d_features, ParamSet<T>& grads);

// ---------------------------------------------------------------------------
// Proposal stage

/// Objectness logits (N, A, P) and deltas (N, 4A, P), P = feature cells.
/// Anchor index is cell * A + a, matching make_anchors.
template <typename T>
struct RpnOutput {
  Tensor<T> logits;
  Tensor<T> deltas;

  T logit(int image, int anchor) const;
  BoxDelta delta(int image, int anchor) const;
};

template <typename T>
RpnOutput<T> rpn_forward(const DetectorParams<T>& params, const Tensor<T>& features);

/// Accumulates into grads and d_features.
template <typename T>
void rpn_backward(const DetectorParams<T>& params, const Tensor<T>& features, const Tensor<T>& d_logits,
                  const Tensor<T>& d_deltas, ParamSet<T>& grads, Tensor<T>& d_features);

std::vector<BoundingBox> detector_anchors(const DetectorConfig& config);

struct ProposalOptions {
  double nms_threshold = 0.7;
  int top_k = 64;
  double min_size = 2.0;
};

/// Boxes with objectness scores, clipped to the image, NMS'd, best top_k.
using ProposalSet = std::vector<BoundingBox>;

template <typename T>
ProposalSet propose(const RpnOutput<T>& rpn, int image, const DetectorConfig& config,
                    std::span<const BoundingBox> anchors, const ProposalOptions& options);

// ---------------------------------------------------------------------------
// ROI stage

/// One ROI: a box on a given image of the batch.
struct RoiRef {
  int image = 0;
  BoundingBox box;
};

/// Bilinear samples of the stride-8 feature map at a grid x grid lattice of
/// box-interior points. Output shape (R, C, grid, grid).
template <typename T>
Tensor<T> roi_features(const Tensor<T>& features, std::span<const RoiRef> rois, int grid);

/// Scatters d_crops back onto d_features (accumulating).
template <typename T>
void roi_features_backward(const Tensor<T>& d_crops, std::span<const RoiRef> rois, int grid,
                           Tensor<T>& d_features);

template <typename T>
struct RoiHeadTape {
  int rows = 0;
  std::vector<T> input;   // R x crop_size
  std::vector<T> hidden;  // R x hidden, post-ReLU
};

template <typename T>
struct RoiHeadOutput {
  int rows = 0;
  int classes = 0;           // n + 1
  std::vector<T> logits;     // R x classes
  std::vector<T> probs;      // R x classes, softmax
  std::vector<T> deltas;     // R x 4, normalized
};

template <typename T>
RoiHeadOutput<T> roi_head(const DetectorParams<T>& params, const Tensor<T>& crops, RoiHeadTape<T>* tape);

/// Accumulates into grads; writes d_crops.
template <typename T>
void roi_head_backward(const DetectorParams<T>& params, const RoiHeadTape<T>& tape,
                       std::span<const T> d_logits, std::span<const T> d_deltas, ParamSet<T>& grads,
                       Tensor<T>& d_crops);

/// Decodes a normalized ROI delta against its proposal.
BoundingBox decode_roi(const DetectorConfig& config, const BoundingBox& proposal, const double* normalized);

// ---------------------------------------------------------------------------
// Inference

struct DetectOptions {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  int max_detections = 32;
  ProposalOptions proposals{0.7, 32, 2.0};
};

/// A detection with the full class distribution of the ROI it came from.
struct Detection {
  BoundingBox box;  // category and score set
  std::vector<double> probs;
};

/// Everything the teacher needs to answer follow-up ROI queries on the same view.
template <typename T>
struct InferenceResult {
  Tensor<T> features;
  std::vector<std::vector<Detection>> detections;  // per image
};

template <typename T>
InferenceResult<T> detect(const DetectorParams<T>& params, const Tensor<T>& images, const DetectOptions& options);

/// Class probabilities of arbitrary boxes on precomputed inference features.
template <typename T>
std::vector<std::vector<double>> classify_boxes(const DetectorParams<T>& params, const Tensor<T>& features,
                                                std::span<const RoiRef> rois);

}  // namespace ctlab
