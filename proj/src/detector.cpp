// SPDX-License-Identifier: Apache-2.0

#include "ctlab/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ctlab/kernels.hpp"
#include "ctlab/rng.hpp"

namespace ctlab {

namespace {

constexpr std::array<ParamIndex, 3> kConvW{kConv1W, kConv2W, kConv3W};
constexpr std::array<ParamIndex, 3> kConvB{kConv1B, kConv2B, kConv3B};
constexpr std::array<ParamIndex, 3> kAlpha{kNorm1Alpha, kNorm2Alpha, kNorm3Alpha};
constexpr std::array<ParamIndex, 3> kBeta{kNorm1Beta, kNorm2Beta, kNorm3Beta};

// exp(4.135) ~ 62.5: a decoded side never exceeds 62.5x its reference.
constexpr double kMaxLogRatio = 4.135;

kernels::ConvShape conv_shape(const DetectorConfig& cfg, int layer, int batch) {
  kernels::ConvShape s;
  s.batch = batch;
  s.in_channels = layer == 0 ? Image::kChannels : cfg.channels[layer - 1];
  s.in_h = s.in_w = cfg.image_size >> layer;
  s.out_channels = cfg.channels[layer];
  s.kernel = 3;
  s.stride = 2;
  s.pad = 1;
  return s;
}

template <typename T>
std::span<const T> cspan(const ParamSet<T>& p, ParamIndex i) {
  return std::span<const T>(p[i].value);
}

template <typename T>
std::span<T> mspan(ParamSet<T>& p, ParamIndex i) {
  return std::span<T>(p[i].value);
}

template <typename T>
void softmax_row(const T* logits, T* probs, int k) {
  T mx = logits[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
  T sum = T(0);
  for (int j = 0; j < k; ++j) {
    probs[j] = std::exp(logits[j] - mx);
    sum += probs[j];
  }
  for (int j = 0; j < k; ++j) probs[j] /= sum;
}

struct BilinearTap {
  int x0, x1, y0, y1;
  double wx, wy;  // weight of x1 / y1
};

BilinearTap bilinear_tap(double fx, double fy, int w, int h) {
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  BilinearTap t;
  t.x0 = static_cast<int>(std::floor(fx));
  t.y0 = static_cast<int>(std::floor(fy));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.wx = fx - t.x0;
  t.wy = fy - t.y0;
  return t;
}

// Sample point (gx, gy) of a box, in feature-map coordinates. Feature cell j
// is centred on input pixel coordinate stride * (j + 0.5).
std::pair<double, double> sample_point(const BoundingBox& b, int gx, int gy, int grid) {
  const double px = b.x1 + (gx + 0.5) * b.width() / grid;
  const double py = b.y1 + (gy + 0.5) * b.height() / grid;
  return {px / DetectorConfig::kStride - 0.5, py / DetectorConfig::kStride - 0.5};
}

}  // namespace

void DetectorConfig::validate() const {
  if (image_size < 32 || image_size % kStride != 0) throw ConfigError("detector: image size must be a multiple of 8");
  if (num_classes < 1) throw ConfigError("detector: need at least one known class");
  if (anchor_sizes.empty()) throw ConfigError("detector: no anchor sizes");
  if (roi_grid < 1 || hidden < 1) throw ConfigError("detector: bad head size");
}

template <typename T>
DetectorParams<T> DetectorParams<T>::init(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  DetectorParams<T> p;
  p.config = config;
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto he = [&](ParamArray<T>& a, int fan_in) {
    const double sd = std::sqrt(2.0 / fan_in);
    for (T& v : a.value) v = static_cast<T>(sd * gauss(rng));
  };
  auto small = [&](ParamArray<T>& a, double sd) {
    for (T& v : a.value) v = static_cast<T>(sd * gauss(rng));
  };

  const char* names[3] = {"backbone.conv1", "backbone.conv2", "backbone.conv3"};
  const char* norms[3] = {"backbone.norm1", "backbone.norm2", "backbone.norm3"};
  for (int l = 0; l < 3; ++l) {
    const auto s = conv_shape(config, l, 1);
    he(p.weights.add(std::string(names[l]) + ".weight", {s.out_channels, s.in_channels, 3, 3}), s.in_channels * 9);
    p.weights.add(std::string(names[l]) + ".bias", {s.out_channels});
    p.weights.add(std::string(norms[l]) + ".alpha", {s.out_channels}, T(1));
    p.weights.add(std::string(norms[l]) + ".beta", {s.out_channels}, T(0));
    p.norms[l] = NormStats<T>(s.out_channels);
  }
  const int c = config.channels[2];
  const int a = config.anchors_per_cell();
  he(p.weights.add("rpn.cls.weight", {a, c}), c);
  p.weights.add("rpn.cls.bias", {a});
  he(p.weights.add("rpn.reg.weight", {4 * a, c}), c);
  p.weights.add("rpn.reg.bias", {4 * a});
  he(p.weights.add("roi.fc.weight", {config.hidden, config.crop_size()}), config.crop_size());
  p.weights.add("roi.fc.bias", {config.hidden});
  small(p.weights.add("roi.cls.weight", {config.num_classes + 1, config.hidden}), 0.01);
  p.weights.add("roi.cls.bias", {config.num_classes + 1});
  small(p.weights.add("roi.reg.weight", {4, config.hidden}), 0.001);
  p.weights.add("roi.reg.bias", {4});
  return p;
}

template <typename T>
template <typename U>
DetectorParams<U> DetectorParams<T>::cast() const {
  DetectorParams<U> out;
  out.config = config;
  out.weights = weights.template cast<U>();
  for (int l = 0; l < 3; ++l) {
    NormStats<U> s(norms[l].channels());
    for (int k = 0; k < 2; ++k) {
      std::transform(norms[l].mean[k].begin(), norms[l].mean[k].end(), s.mean[k].begin(),
                     [](T v) { return static_cast<U>(v); });
      std::transform(norms[l].var[k].begin(), norms[l].var[k].end(), s.var[k].begin(),
                     [](T v) { return static_cast<U>(v); });
    }
    s.updates = norms[l].updates;
    out.norms[l] = std::move(s);
  }
  return out;
}

template <typename T>
void DetectorParams<T>::require_compatible(const DetectorParams& o, const char* what) const {
  weights.require_same_layout(o.weights, what);
  for (int l = 0; l < 3; ++l) {
    if (norms[l].channels() != o.norms[l].channels()) throw ShapeError(std::string(what) + ": norm shapes differ");
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image* const> images, int expected_size) {
  Tensor<T> t(static_cast<int>(images.size()), Image::kChannels, expected_size, expected_size);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = *images[i];
    if (im.height != expected_size || im.width != expected_size) {
      throw ShapeError("image " + std::to_string(im.height) + "x" + std::to_string(im.width) +
                       " does not match configured size " + std::to_string(expected_size));
    }
    std::transform(im.data.begin(), im.data.end(), t.sample(static_cast<int>(i)),
                   [](float v) { return static_cast<T>(v); });
  }
  return t;
}

template <typename T>
Tensor<T> backbone_forward_train(DetectorParams<T>& params, const Tensor<T>& images,
                                 std::span<const Segment> segments, BackboneTape<T>& tape) {
  const auto& cfg = params.config;
  if (images.c != Image::kChannels || images.h != cfg.image_size || images.w != cfg.image_size) {
    throw ShapeError("backbone: input " + images.shape_string() + " does not match configured size");
  }
  const Tensor<T>* x = &images;
  for (int l = 0; l < 3; ++l) {
    const auto s = conv_shape(cfg, l, x->n);
    tape.conv_in[l] = *x;
    Tensor<T> conv(x->n, s.out_channels, s.out_h(), s.out_w());
    kernels::conv2d_forward(s, x->data.data(), params.weights[kConvW[l]].value.data(),
                            params.weights[kConvB[l]].value.data(), conv.data.data());
    Tensor<T> normed;
    norm_forward_train(conv, segments, cfg.norm, cfg.norm_options, params.norms[l], cspan(params.weights, kAlpha[l]),
                       cspan(params.weights, kBeta[l]), normed, &tape.norm[l]);
    for (T& v : normed.data) v = v > T(0) ? v : T(0);
    tape.act[l] = std::move(normed);
    x = &tape.act[l];
  }
  return tape.act[2];
}

template <typename T>
Tensor<T> backbone_forward_infer(const DetectorParams<T>& params, const Tensor<T>& images) {
  const auto& cfg = params.config;
  if (images.c != Image::kChannels || images.h != cfg.image_size || images.w != cfg.image_size) {
    throw ShapeError("backbone: input " + images.shape_string() + " does not match configured size");
  }
  Tensor<T> x = images;
  for (int l = 0; l < 3; ++l) {
    const auto s = conv_shape(cfg, l, x.n);
    Tensor<T> conv(x.n, s.out_channels, s.out_h(), s.out_w());
    kernels::conv2d_forward(s, x.data.data(), params.weights[kConvW[l]].value.data(),
                            params.weights[kConvB[l]].value.data(), conv.data.data());
    Tensor<T> normed;
    norm_forward_infer(conv, cfg.norm, cfg.norm_options, params.norms[l], cspan(params.weights, kAlpha[l]),
                       cspan(params.weights, kBeta[l]), normed);
    for (T& v : normed.data) v = v > T(0) ? v : T(0);
    x = std::move(normed);
  }
  return x;
}

template <typename T>
void backbone_backward(const DetectorParams<T>& params, const BackboneTape<T>& tape,
                       const Tensor<T>& d_features, ParamSet<T>& grads) {
  const auto& cfg = params.config;
  Tensor<T> d = d_features;
  for (int l = 2; l >= 0; --l) {
    const Tensor<T>& act = tape.act[l];
    require_same_shape(act, d, "backbone backward");
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(act.data[i] > T(0))) d.data[i] = T(0);
    }
    Tensor<T> d_conv;
    norm_backward(tape.norm[l], d, cspan(params.weights, kAlpha[l]), d_conv, mspan(grads, kAlpha[l]),
                  mspan(grads, kBeta[l]));
    const auto s = conv_shape(cfg, l, d.n);
    Tensor<T> d_in;
    if (l > 0) d_in = Tensor<T>(s.batch, s.in_channels, s.in_h, s.in_w);
    kernels::conv2d_backward(s, tape.conv_in[l].data.data(), params.weights[kConvW[l]].value.data(),
                             d_conv.data.data(), l > 0 ? d_in.data.data() : nullptr,
                             grads[kConvW[l]].value.data(), grads[kConvB[l]].value.data());
    d = std::move(d_in);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
T RpnOutput<T>::logit(int image, int anchor) const {
  const int a = logits.c;
  const int p = anchor / a;
  return logits.data[(static_cast<std::size_t>(image) * a + anchor % a) * logits.plane() + p];
}

template <typename T>
BoxDelta RpnOutput<T>::delta(int image, int anchor) const {
  const int a = logits.c;
  const int cell = anchor / a;
  const int k = anchor % a;
  const std::size_t plane = deltas.plane();
  const T* base = deltas.sample(image) + static_cast<std::size_t>(4 * k) * plane + cell;
  return {static_cast<double>(base[0]), static_cast<double>(base[plane]), static_cast<double>(base[2 * plane]),
          static_cast<double>(base[3 * plane])};
}

template <typename T>
RpnOutput<T> rpn_forward(const DetectorParams<T>& params, const Tensor<T>& features) {
  const int a = params.config.anchors_per_cell();
  const int c = features.c;
  const int p = features.h * features.w;
  if (c != params.config.channels[2]) throw ShapeError("rpn: feature channels mismatch");
  RpnOutput<T> out{Tensor<T>(features.n, a, features.h, features.w),
                   Tensor<T>(features.n, 4 * a, features.h, features.w)};
  for (int i = 0; i < features.n; ++i) {
    kernels::gemm_nn(a, p, c, params.weights[kRpnClsW].value.data(), features.sample(i), out.logits.sample(i), false);
    kernels::gemm_nn(4 * a, p, c, params.weights[kRpnRegW].value.data(), features.sample(i), out.deltas.sample(i),
                     false);
    for (int k = 0; k < a; ++k) {
      T* row = out.logits.sample(i) + static_cast<std::size_t>(k) * p;
      for (int j = 0; j < p; ++j) row[j] += params.weights[kRpnClsB].value[k];
    }
    for (int k = 0; k < 4 * a; ++k) {
      T* row = out.deltas.sample(i) + static_cast<std::size_t>(k) * p;
      for (int j = 0; j < p; ++j) row[j] += params.weights[kRpnRegB].value[k];
    }
  }
  return out;
}

template <typename T>
void rpn_backward(const DetectorParams<T>& params, const Tensor<T>& features, const Tensor<T>& d_logits,
                  const Tensor<T>& d_deltas, ParamSet<T>& grads, Tensor<T>& d_features) {
  const int a = params.config.anchors_per_cell();
  const int c = features.c;
  const int p = features.h * features.w;
  if (!d_features.same_shape(features)) d_features = Tensor<T>(features.n, features.c, features.h, features.w);
  for (int i = 0; i < features.n; ++i) {
    const T* gl = d_logits.sample(i);
    const T* gd = d_deltas.sample(i);
    kernels::gemm_nt(a, c, p, gl, features.sample(i), grads[kRpnClsW].value.data(), true);
    kernels::gemm_nt(4 * a, c, p, gd, features.sample(i), grads[kRpnRegW].value.data(), true);
    for (int k = 0; k < a; ++k) {
      T sum = T(0);
      for (int j = 0; j < p; ++j) sum += gl[static_cast<std::size_t>(k) * p + j];
      grads[kRpnClsB].value[k] += sum;
    }
    for (int k = 0; k < 4 * a; ++k) {
      T sum = T(0);
      for (int j = 0; j < p; ++j) sum += gd[static_cast<std::size_t>(k) * p + j];
      grads[kRpnRegB].value[k] += sum;
    }
    kernels::gemm_tn(c, p, a, params.weights[kRpnClsW].value.data(), gl, d_features.sample(i), true);
    kernels::gemm_tn(c, p, 4 * a, params.weights[kRpnRegW].value.data(), gd, d_features.sample(i), true);
  }
}

std::vector<BoundingBox> detector_anchors(const DetectorConfig& config) {
  return make_anchors(config.feature_size(), config.feature_size(), DetectorConfig::kStride, config.anchor_sizes);
}

template <typename T>
ProposalSet propose(const RpnOutput<T>& rpn, int image, const DetectorConfig& config,
                    std::span<const BoundingBox> anchors, const ProposalOptions& options) {
  const double size = config.image_size;
  std::vector<BoundingBox> candidates;
  candidates.reserve(anchors.size());
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    BoxDelta d = rpn.delta(image, static_cast<int>(k));
    d.tw = std::min(d.tw, kMaxLogRatio);
    d.th = std::min(d.th, kMaxLogRatio);
    BoundingBox b = clip_box(decode_delta(anchors[k], d), size, size);
    if (!(b.width() >= options.min_size && b.height() >= options.min_size)) continue;
    const double logit = static_cast<double>(rpn.logit(image, static_cast<int>(k)));
    b.score = 1.0 / (1.0 + std::exp(-logit));
    candidates.push_back(b);
  }
  const auto kept = nms(candidates, options.nms_threshold);
  ProposalSet out;
  for (int idx : kept) {
    if (static_cast<int>(out.size()) >= options.top_k) break;
    out.push_back(candidates[idx]);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> roi_features(const Tensor<T>& features, std::span<const RoiRef> rois, int grid) {
  Tensor<T> out(static_cast<int>(rois.size()), features.c, grid, grid);
  const std::size_t plane = features.plane();
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto& roi = rois[r];
    const T* f = features.sample(roi.image);
    T* o = out.sample(static_cast<int>(r));
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const auto [fx, fy] = sample_point(roi.box, gx, gy, grid);
        const auto t = bilinear_tap(fx, fy, features.w, features.h);
        const T w00 = static_cast<T>((1 - t.wx) * (1 - t.wy));
        const T w01 = static_cast<T>(t.wx * (1 - t.wy));
        const T w10 = static_cast<T>((1 - t.wx) * t.wy);
        const T w11 = static_cast<T>(t.wx * t.wy);
        const std::size_t i00 = static_cast<std::size_t>(t.y0) * features.w + t.x0;
        const std::size_t i01 = static_cast<std::size_t>(t.y0) * features.w + t.x1;
        const std::size_t i10 = static_cast<std::size_t>(t.y1) * features.w + t.x0;
        const std::size_t i11 = static_cast<std::size_t>(t.y1) * features.w + t.x1;
        for (int c = 0; c < features.c; ++c) {
          const T* fc = f + c * plane;
          o[(static_cast<std::size_t>(c) * grid + gy) * grid + gx] =
              w00 * fc[i00] + w01 * fc[i01] + w10 * fc[i10] + w11 * fc[i11];
        }
      }
    }
  }
  return out;
}

template <typename T>
void roi_features_backward(const Tensor<T>& d_crops, std::span<const RoiRef> rois, int grid,
                           Tensor<T>& d_features) {
  const std::size_t plane = d_features.plane();
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto& roi = rois[r];
    T* f = d_features.sample(roi.image);
    const T* g = d_crops.sample(static_cast<int>(r));
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const auto [fx, fy] = sample_point(roi.box, gx, gy, grid);
        const auto t = bilinear_tap(fx, fy, d_features.w, d_features.h);
        const T w00 = static_cast<T>((1 - t.wx) * (1 - t.wy));
        const T w01 = static_cast<T>(t.wx * (1 - t.wy));
        const T w10 = static_cast<T>((1 - t.wx) * t.wy);
        const T w11 = static_cast<T>(t.wx * t.wy);
        const std::size_t i00 = static_cast<std::size_t>(t.y0) * d_features.w + t.x0;
        const std::size_t i01 = static_cast<std::size_t>(t.y0) * d_features.w + t.x1;
        const std::size_t i10 = static_cast<std::size_t>(t.y1) * d_features.w + t.x0;
        const std::size_t i11 = static_cast<std::size_t>(t.y1) * d_features.w + t.x1;
        for (int c = 0; c < d_features.c; ++c) {
          const T gv = g[(static_cast<std::size_t>(c) * grid + gy) * grid + gx];
          T* fc = f + c * plane;
          fc[i00] += w00 * gv;
          fc[i01] += w01 * gv;
          fc[i10] += w10 * gv;
          fc[i11] += w11 * gv;
        }
      }
    }
  }
}

template <typename T>
RoiHeadOutput<T> roi_head(const DetectorParams<T>& params, const Tensor<T>& crops, RoiHeadTape<T>* tape) {
  const auto& cfg = params.config;
  const int rows = crops.n;
  const int in = cfg.crop_size();
  if (rows > 0 && static_cast<int>(crops.sample_size()) != in) {
    throw ShapeError("roi head: crop size " + std::to_string(crops.sample_size()) + " != " + std::to_string(in));
  }
  const int k = cfg.num_classes + 1;
  RoiHeadOutput<T> out;
  out.rows = rows;
  out.classes = k;
  out.logits.assign(static_cast<std::size_t>(rows) * k, T(0));
  out.probs.assign(static_cast<std::size_t>(rows) * k, T(0));
  out.deltas.assign(static_cast<std::size_t>(rows) * 4, T(0));
  if (rows == 0) {
    if (tape) *tape = RoiHeadTape<T>{};
    return out;
  }
  std::vector<T> hidden(static_cast<std::size_t>(rows) * cfg.hidden);
  kernels::linear_forward(rows, in, cfg.hidden, crops.data.data(), params.weights[kFcW].value.data(),
                          params.weights[kFcB].value.data(), hidden.data());
  for (T& v : hidden) v = v > T(0) ? v : T(0);
  kernels::linear_forward(rows, cfg.hidden, k, hidden.data(), params.weights[kClsW].value.data(),
                          params.weights[kClsB].value.data(), out.logits.data());
  kernels::linear_forward(rows, cfg.hidden, 4, hidden.data(), params.weights[kRegW].value.data(),
                          params.weights[kRegB].value.data(), out.deltas.data());
  for (int r = 0; r < rows; ++r) softmax_row(out.logits.data() + r * k, out.probs.data() + r * k, k);
  if (tape) {
    tape->rows = rows;
    tape->input = crops.data;
    tape->hidden = std::move(hidden);
  }
  return out;
}

template <typename T>
void roi_head_backward(const DetectorParams<T>& params, const RoiHeadTape<T>& tape,
                       std::span<const T> d_logits, std::span<const T> d_deltas, ParamSet<T>& grads,
                       Tensor<T>& d_crops) {
  const auto& cfg = params.config;
  const int rows = tape.rows;
  const int in = cfg.crop_size();
  const int k = cfg.num_classes + 1;
  d_crops = Tensor<T>(rows, cfg.channels[2], cfg.roi_grid, cfg.roi_grid);
  if (rows == 0) return;
  std::vector<T> d_hidden(static_cast<std::size_t>(rows) * cfg.hidden, T(0));
  std::vector<T> tmp(d_hidden.size());
  kernels::linear_backward(rows, cfg.hidden, k, tape.hidden.data(), params.weights[kClsW].value.data(),
                           d_logits.data(), d_hidden.data(), grads[kClsW].value.data(), grads[kClsB].value.data());
  kernels::linear_backward(rows, cfg.hidden, 4, tape.hidden.data(), params.weights[kRegW].value.data(),
                           d_deltas.data(), tmp.data(), grads[kRegW].value.data(), grads[kRegB].value.data());
  for (std::size_t i = 0; i < d_hidden.size(); ++i) {
    d_hidden[i] = tape.hidden[i] > T(0) ? d_hidden[i] + tmp[i] : T(0);
  }
  kernels::linear_backward(rows, in, cfg.hidden, tape.input.data(), params.weights[kFcW].value.data(),
                           d_hidden.data(), d_crops.data.data(), grads[kFcW].value.data(), grads[kFcB].value.data());
}

BoundingBox decode_roi(const DetectorConfig& config, const BoundingBox& proposal, const double* normalized) {
  BoxDelta d{normalized[0] * config.roi_delta_std[0], normalized[1] * config.roi_delta_std[1],
             normalized[2] * config.roi_delta_std[2], normalized[3] * config.roi_delta_std[3]};
  d.tw = std::min(d.tw, kMaxLogRatio);
  d.th = std::min(d.th, kMaxLogRatio);
  return decode_delta(proposal, d);
}

// ---------------------------------------------------------------------------

template <typename T>
InferenceResult<T> detect(const DetectorParams<T>& params, const Tensor<T>& images, const DetectOptions& options) {
  const auto& cfg = params.config;
  InferenceResult<T> result;
  result.features = backbone_forward_infer(params, images);
  const auto rpn = rpn_forward(params, result.features);
  const auto anchors = detector_anchors(cfg);

  std::vector<RoiRef> rois;
  for (int i = 0; i < images.n; ++i) {
    for (const auto& b : propose(rpn, i, cfg, anchors, options.proposals)) rois.push_back({i, b});
  }
  const auto crops = roi_features(result.features, std::span<const RoiRef>(rois), cfg.roi_grid);
  const auto head = roi_head<T>(params, crops, nullptr);
  const int k = head.classes;
  const double size = cfg.image_size;

  result.detections.assign(static_cast<std::size_t>(images.n), {});
  std::size_t r = 0;
  for (int i = 0; i < images.n; ++i) {
    std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(cfg.num_classes));
    for (; r < rois.size() && rois[r].image == i; ++r) {
      double nd[4];
      for (int j = 0; j < 4; ++j) nd[j] = static_cast<double>(head.deltas[r * 4 + j]);
      BoundingBox box = clip_box(decode_roi(cfg, rois[r].box, nd), size, size);
      if (!(box.width() > 1e-3 && box.height() > 1e-3)) continue;
      std::vector<double> probs(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) probs[j] = static_cast<double>(head.probs[r * k + j]);
      for (int c = 0; c < cfg.num_classes; ++c) {
        if (probs[c] < options.score_threshold) continue;
        Detection d{box, probs};
        d.box.category = c;
        d.box.score = std::clamp(probs[c], 0.0, 1.0);
        per_class[c].push_back(std::move(d));
      }
    }
    std::vector<Detection> merged;
    for (auto& dets : per_class) {
      std::vector<BoundingBox> boxes;
      boxes.reserve(dets.size());
      for (const auto& d : dets) boxes.push_back(d.box);
      for (int idx : nms(boxes, options.nms_threshold)) merged.push_back(dets[idx]);
    }
    std::stable_sort(merged.begin(), merged.end(),
                     [](const Detection& a, const Detection& b) { return *a.box.score > *b.box.score; });
    if (static_cast<int>(merged.size()) > options.max_detections) merged.resize(options.max_detections);
    result.detections[i] = std::move(merged);
  }
  return result;
}

template <typename T>
std::vector<std::vector<double>> classify_boxes(const DetectorParams<T>& params, const Tensor<T>& features,
                                                std::span<const RoiRef> rois) {
  const auto crops = roi_features(features, rois, params.config.roi_grid);
  const auto head = roi_head<T>(params, crops, nullptr);
  std::vector<std::vector<double>> out(rois.size());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    out[r].resize(static_cast<std::size_t>(head.classes));
    for (int j = 0; j < head.classes; ++j) out[r][j] = static_cast<double>(head.probs[r * head.classes + j]);
  }
  return out;
}

#define CTLAB_INSTANTIATE(T)                                                                                  \
  template struct DetectorParams<T>;                                                                         \
  template struct RpnOutput<T>;                                                                              \
  template Tensor<T> images_to_tensor<T>(std::span<const Image* const>, int);                                \
  template Tensor<T> backbone_forward_train<T>(DetectorParams<T>&, const Tensor<T>&, std::span<const Segment>, \
                                               BackboneTape<T>&);                                            \
  template Tensor<T> backbone_forward_infer<T>(const DetectorParams<T>&, const Tensor<T>&);                   \
  template void backbone_backward<T>(const DetectorParams<T>&, const BackboneTape<T>&, const Tensor<T>&,      \
                                     ParamSet<T>&);                                                          \
  template RpnOutput<T> rpn_forward<T>(const DetectorParams<T>&, const Tensor<T>&);                           \
  template void rpn_backward<T>(const DetectorParams<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                const Tensor<T>&, ParamSet<T>&, Tensor<T>&);                                 \
  template ProposalSet propose<T>(const RpnOutput<T>&, int, const DetectorConfig&,                            \
                                  std::span<const BoundingBox>, const ProposalOptions&);                     \
  template Tensor<T> roi_features<T>(const Tensor<T>&, std::span<const RoiRef>, int);                        \
  template void roi_features_backward<T>(const Tensor<T>&, std::span<const RoiRef>, int, Tensor<T>&);        \
  template RoiHeadOutput<T> roi_head<T>(const DetectorParams<T>&, const Tensor<T>&, RoiHeadTape<T>*);         \
  template void roi_head_backward<T>(const DetectorParams<T>&, const RoiHeadTape<T>&, std::span<const T>,    \
                                     std::span<const T>, ParamSet<T>&, Tensor<T>&);                          \
  template InferenceResult<T> detect<T>(const DetectorParams<T>&, const Tensor<T>&, const DetectOptions&);    \
  template std::vector<std::vector<double>> classify_boxes<T>(const DetectorParams<T>&, const Tensor<T>&,     \
                                                              std::span<const RoiRef>);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)
#undef CTLAB_INSTANTIATE

template DetectorParams<double> DetectorParams<float>::cast<double>() const;
template DetectorParams<float> DetectorParams<double>::cast<float>() const;
template DetectorParams<float> DetectorParams<float>::cast<float>() const;
template DetectorParams<double> DetectorParams<double>::cast<double>() const;

}  // namespace ctlab
