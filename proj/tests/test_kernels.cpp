// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "ctlab/kernels.hpp"

using namespace ctlab::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("gemm variants match an explicit triple loop") {
  std::mt19937 rng(1);
  for (auto [m, n, k] : {std::array{1, 1, 1}, std::array{5, 17, 3}, std::array{13, 33, 29}, std::array{64, 4, 128},
                         std::array{7, 16, 1}}) {
    const auto a = random_vec(static_cast<std::size_t>(m) * k, rng);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, rng);
    std::vector<double> want(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk) want[i * n + j] += a[i * k + kk] * b[kk * n + j];

    std::vector<double> c(want.size(), 0.0);
    gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
    CHECK(max_abs_diff(c, want) < 1e-12);

    std::vector<double> at(a.size());
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) at[kk * m + i] = a[i * k + kk];
    std::vector<double> c2(want.size(), 1.0);
    gemm_tn(m, n, k, at.data(), b.data(), c2.data(), true);
    for (auto& v : c2) v -= 1.0;
    CHECK(max_abs_diff(c2, want) < 1e-12);

    std::vector<double> bt(b.size());
    for (int kk = 0; kk < k; ++kk)
      for (int j = 0; j < n; ++j) bt[j * k + kk] = b[kk * n + j];
    std::vector<double> c3(want.size(), 0.0);
    gemm_nt(m, n, k, a.data(), bt.data(), c3.data(), false);
    CHECK(max_abs_diff(c3, want) < 1e-12);

    std::vector<double> c4(want.size(), 0.0);
    reference::gemm_nn(m, n, k, a.data(), b.data(), c4.data(), false);
    CHECK(max_abs_diff(c4, want) < 1e-12);
  }
}

TEST_CASE("conv2d forward and backward match the serial reference") {
  std::mt19937 rng(2);
  for (const ConvShape s : {ConvShape{3, 3, 16, 16, 8, 3, 2, 1}, ConvShape{2, 4, 9, 7, 5, 3, 1, 1},
                            ConvShape{1, 2, 5, 5, 3, 3, 1, 0}}) {
    const auto in = random_vec(s.in_size(), rng);
    const auto w = random_vec(s.weight_size(), rng);
    const auto bias = random_vec(static_cast<std::size_t>(s.out_channels), rng);
    std::vector<double> out(s.out_size()), out_ref(s.out_size());
    conv2d_forward(s, in.data(), w.data(), bias.data(), out.data());
    reference::conv2d_forward(s, in.data(), w.data(), bias.data(), out_ref.data());
    CHECK(max_abs_diff(out, out_ref) < 1e-11);

    const auto g = random_vec(s.out_size(), rng);
    std::vector<double> din(s.in_size()), din_ref(s.in_size());
    std::vector<double> dw(s.weight_size(), 0.5), dw_ref(s.weight_size(), 0.5);
    std::vector<double> db(static_cast<std::size_t>(s.out_channels), 0.0), db_ref(db);
    conv2d_backward(s, in.data(), w.data(), g.data(), din.data(), dw.data(), db.data());
    reference::conv2d_backward(s, in.data(), w.data(), g.data(), din_ref.data(), dw_ref.data(), db_ref.data());
    CHECK(max_abs_diff(din, din_ref) < 1e-11);
    CHECK(max_abs_diff(dw, dw_ref) < 1e-11);
    CHECK(max_abs_diff(db, db_ref) < 1e-11);
  }
}

TEST_CASE("conv2d backward is the adjoint of forward") {
  // <conv(x), g> == <x, conv^T(g)> for the input gradient.
  std::mt19937 rng(3);
  const ConvShape s{2, 3, 8, 8, 4, 3, 2, 1};
  const auto x = random_vec(s.in_size(), rng);
  const auto w = random_vec(s.weight_size(), rng);
  const auto g = random_vec(s.out_size(), rng);
  std::vector<double> y(s.out_size()), dx(s.in_size()), dw(s.weight_size(), 0.0);
  conv2d_forward<double>(s, x.data(), w.data(), nullptr, y.data());
  conv2d_backward<double>(s, x.data(), w.data(), g.data(), dx.data(), dw.data(), nullptr);
  double lhs = 0.0, rhs = 0.0, rhs_w = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * dx[i];
  for (std::size_t i = 0; i < w.size(); ++i) rhs_w += w[i] * dw[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  CHECK(lhs == doctest::Approx(rhs_w).epsilon(1e-12));
}

TEST_CASE("linear forward and backward match the serial reference") {
  std::mt19937 rng(4);
  const int batch = 37, in = 50, out = 19;
  const auto x = random_vec(static_cast<std::size_t>(batch) * in, rng);
  const auto w = random_vec(static_cast<std::size_t>(out) * in, rng);
  const auto b = random_vec(static_cast<std::size_t>(out), rng);
  std::vector<double> y(static_cast<std::size_t>(batch) * out), y_ref(y.size());
  linear_forward(batch, in, out, x.data(), w.data(), b.data(), y.data());
  reference::linear_forward(batch, in, out, x.data(), w.data(), b.data(), y_ref.data());
  CHECK(max_abs_diff(y, y_ref) < 1e-11);

  const auto g = random_vec(y.size(), rng);
  std::vector<double> dx(x.size()), dx_ref(x.size());
  std::vector<double> dw(w.size(), 0.0), dw_ref(w.size(), 0.0);
  std::vector<double> db(b.size(), 0.0), db_ref(b.size(), 0.0);
  linear_backward(batch, in, out, x.data(), w.data(), g.data(), dx.data(), dw.data(), db.data());
  reference::linear_backward(batch, in, out, x.data(), w.data(), g.data(), dx_ref.data(), dw_ref.data(),
                             db_ref.data());
  CHECK(max_abs_diff(dx, dx_ref) < 1e-11);
  CHECK(max_abs_diff(dw, dw_ref) < 1e-11);
  CHECK(max_abs_diff(db, db_ref) < 1e-11);
}

TEST_CASE("float kernels are bitwise reproducible across calls") {
  std::mt19937 rng(5);
  const ConvShape s{4, 16, 16, 16, 32, 3, 2, 1};
  std::vector<float> in(s.in_size()), w(s.weight_size());
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (auto& v : in) v = g(rng);
  for (auto& v : w) v = g(rng);
  std::vector<float> a(s.out_size()), b(s.out_size());
  conv2d_forward<float>(s, in.data(), w.data(), nullptr, a.data());
  conv2d_forward<float>(s, in.data(), w.data(), nullptr, b.data());
  CHECK(a == b);
}
