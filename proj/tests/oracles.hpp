// SPDX-License-Identifier: Apache-2.0
//
// Independent reference computations, written without the library code they
// check. Shared by the unit tests and the acceptance binary.

#pragma once

#include <algorithm>
#include <random>
#include <utility>
#include <vector>

#include "ctlab/evalkit.hpp"
#include "ctlab/labeling.hpp"
#include "ctlab/tensor.hpp"

namespace ctlab::oracle {

/// Pixel-count IoU for integer boxes inside a 64x64 grid: cells [x1, x2) x [y1, y2).
inline double pixel_iou(int ax1, int ay1, int ax2, int ay2, int bx1, int by1, int bx2, int by2) {
  long inter = 0, ua = 0, ub = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool in_a = x >= ax1 && x < ax2 && y >= ay1 && y < ay2;
      const bool in_b = x >= bx1 && x < bx2 && y >= by1 && y < by2;
      ua += in_a;
      ub += in_b;
      inter += in_a && in_b;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(ua + ub - inter);
}

/// Entrywise flexible rule, brute force.
inline std::pair<std::vector<double>, std::vector<Credibility>> flexible(const std::vector<double>& p, double up,
                                                                         double low) {
  std::vector<double> v;
  std::vector<Credibility> m;
  for (double x : p) {
    if (x > up) {
      v.push_back(1.0);
      m.push_back(Credibility::kPositive);
    } else if (x < low) {
      v.push_back(0.0);
      m.push_back(Credibility::kNegative);
    } else {
      v.push_back(x);
      m.push_back(Credibility::kUncertain);
    }
  }
  return {v, m};
}

/// Dirichlet(alpha) sample with alpha drawn per vector, so both peaked and
/// flat vectors show up.
template <typename Engine>
std::vector<double> random_simplex(Engine& rng, int n) {
  std::uniform_real_distribution<double> a(0.05, 2.0);
  std::gamma_distribution<double> g(a(rng), 1.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& x : p) s += (x = g(rng) + 1e-300);
  for (auto& x : p) x /= s;
  return p;
}

/// Per-channel moments over samples [begin, begin + count), biased variance.
inline std::pair<double, double> channel_moments(const Tensor<double>& t, int ch, int begin, int count) {
  double s = 0.0, sq = 0.0;
  const int hw = t.h * t.w;
  for (int i = begin; i < begin + count; ++i)
    for (int k = 0; k < hw; ++k) s += t.sample(i)[ch * hw + k];
  const double m = s / (count * hw);
  for (int i = begin; i < begin + count; ++i)
    for (int k = 0; k < hw; ++k) {
      const double d = t.sample(i)[ch * hw + k] - m;
      sq += d * d;
    }
  return {m, sq / (count * hw)};
}

/// AP by greedy matching written separately from the library, then the area
/// under the interpolated curve as a sum over each true positive of the max
/// precision at recall >= its recall.
inline double average_precision(std::vector<ImageBox> dets, const std::vector<ImageBox>& truths, double thr) {
  std::stable_sort(dets.begin(), dets.end(), [](const ImageBox& a, const ImageBox& b) {
    return *a.box.score > *b.box.score;
  });
  std::vector<int> owner(truths.size(), -1);
  std::vector<bool> hit(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (owner[t] >= 0 || truths[t].image != dets[d].image) continue;
      const double o = iou(dets[d].box, truths[t].box);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0 && best_iou >= thr) {
      owner[static_cast<std::size_t>(best)] = static_cast<int>(d);
      hit[d] = true;
    }
  }
  std::vector<double> prec;
  int tp = 0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    tp += hit[d];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(d + 1));
  }
  double ap = 0.0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (!hit[d]) continue;
    double best = 0.0;
    for (std::size_t e = d; e < dets.size(); ++e) best = std::max(best, prec[e]);
    ap += best / static_cast<double>(truths.size());
  }
  return ap;
}

}  // namespace ctlab::oracle
