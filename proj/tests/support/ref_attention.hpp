#pragma once

// Straightforward double-precision attention references used as oracles.
// Everything is single-head, row-major std::vector<double>.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "test_util.hpp"

namespace testutil {

using Vec = std::vector<double>;

// Dense attention where pair (i, j) takes part only when allowed(i, j).
// bias(i, j) is added to the scaled score.
inline Vec ref_masked_attention(const Vec& q, const Vec& k, const Vec& v, std::int64_t n, std::int64_t d,
                                const std::function<bool(std::int64_t, std::int64_t)>& allowed,
                                const std::function<double(std::int64_t, std::int64_t)>& bias = {}) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Vec out(static_cast<std::size_t>(n * d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    Vec row(static_cast<std::size_t>(n), -INFINITY);
    for (std::int64_t j = 0; j < n; ++j) {
      if (!allowed(i, j)) continue;
      double dot = 0.0;
      for (std::int64_t c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      row[j] = dot * s + (bias ? bias(i, j) : 0.0);
    }
    Vec p = ref_softmax_row(row);
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < d; ++c) out[i * d + c] += p[j] * v[j * d + c];
  }
  return out;
}

inline Vec ref_full_attention(const Vec& q, const Vec& k, const Vec& v, std::int64_t n, std::int64_t d) {
  return ref_masked_attention(q, k, v, n, d, [](std::int64_t, std::int64_t) { return true; });
}

// Sliding window of `radius` per side plus `g` global tokens with separate
// global projections (qg: [g x d], kg/vg: [n x d]).
inline Vec ref_sliding(const Vec& q, const Vec& k, const Vec& v, std::int64_t n, std::int64_t d, std::int64_t radius,
                       std::int64_t g = 0, const Vec& qg = {}, const Vec& kg = {}, const Vec& vg = {}) {
  Vec out = ref_masked_attention(q, k, v, n, d, [&](std::int64_t i, std::int64_t j) {
    return j < g || (i - j <= radius && j - i <= radius);
  });
  if (g > 0) {
    Vec qpad(static_cast<std::size_t>(n * d), 0.0);
    std::copy(qg.begin(), qg.end(), qpad.begin());
    Vec glob = ref_full_attention(qpad, kg, vg, n, d);
    std::copy(glob.begin(), glob.begin() + g * d, out.begin());
  }
  return out;
}

inline Vec ref_matmul_nt(const Vec& a, const Vec& b, std::int64_t m, std::int64_t k, std::int64_t n) {
  Vec c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
  return c;
}

inline Vec ref_softmax_rows(Vec x, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    Vec row(x.begin() + r * cols, x.begin() + (r + 1) * cols);
    row = ref_softmax_row(row);
    std::copy(row.begin(), row.end(), x.begin() + r * cols);
  }
  return x;
}

inline Vec ref_segment_means(const Vec& x, std::int64_t n, std::int64_t d, std::int64_t m) {
  Vec out(static_cast<std::size_t>(m * d), 0.0);
  for (std::int64_t j = 0; j < m; ++j) {
    const std::int64_t lo = j * n / m, hi = (j + 1) * n / m;
    for (std::int64_t i = lo; i < hi; ++i)
      for (std::int64_t c = 0; c < d; ++c) out[j * d + c] += x[i * d + c] / static_cast<double>(hi - lo);
  }
  return out;
}

// Iteration Z <- Z (13I - AZ(15I - AZ(7I - AZ))) / 4 from Z0 = A^T / (max colsum * max rowsum).
inline Vec ref_pinv(const Vec& a, std::int64_t m, int iterations) {
  double max_row = 0.0, max_col = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    double r = 0.0, c = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      r += a[i * m + j];
      c += a[j * m + i];
    }
    max_row = std::max(max_row, r);
    max_col = std::max(max_col, c);
  }
  Vec z(static_cast<std::size_t>(m * m));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j) z[i * m + j] = a[j * m + i] / (max_col * max_row);
  auto shifted = [m](Vec x, double diag) {
    for (double& e : x) e = -e;
    for (std::int64_t i = 0; i < m; ++i) x[i * m + i] += diag;
    return x;
  };
  for (int it = 0; it < iterations; ++it) {
    Vec x = ref_matmul(a, z, m, m, m);
    Vec t = shifted(x, 7.0);
    t = shifted(ref_matmul(x, t, m, m, m), 15.0);
    t = shifted(ref_matmul(x, t, m, m, m), 13.0);
    z = ref_matmul(z, t, m, m, m);
    for (double& e : z) e *= 0.25;
  }
  return z;
}

inline Vec ref_nystrom(const Vec& q, const Vec& k, const Vec& v, std::int64_t n, std::int64_t d, std::int64_t m,
                       int iterations) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Vec ql = ref_segment_means(q, n, d, m), kl = ref_segment_means(k, n, d, m);
  auto scaled = [s](Vec x) {
    for (double& e : x) e *= s;
    return x;
  };
  Vec k1 = ref_softmax_rows(scaled(ref_matmul_nt(q, kl, n, d, m)), n, m);
  Vec k2 = ref_softmax_rows(scaled(ref_matmul_nt(ql, kl, m, d, m)), m, m);
  Vec k3 = ref_softmax_rows(scaled(ref_matmul_nt(ql, k, m, d, n)), m, n);
  Vec z = ref_pinv(k2, m, iterations);
  Vec w = ref_matmul(k3, v, m, n, d);
  Vec u = ref_matmul(z, w, m, m, d);
  return ref_matmul(k1, u, n, m, d);
}

// Central finite-difference gradient of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double eps = 1e-5) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = f(x);
    x[i] = orig - eps;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double inner(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace testutil
