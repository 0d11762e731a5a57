/* Copyright 2026 The Xpert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Independent reference implementations used as test oracles. They work on
// plain std::vector<double> and share no code with the library's numerics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace xpert::oracle {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec gaussian(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec v(dim);
  for (auto& x : v) x = n(rng);
  return v;
}

inline Vec unit(Vec v) {
  const double n = norm(v);
  for (auto& x : v) x /= n;
  return v;
}

// k orthonormal vectors: the Q factor of a Householder QR of a random
// Gaussian matrix, so no Gram-Schmidt is involved.
inline std::vector<Vec> orthonormal(std::mt19937_64& rng, std::size_t dim, std::size_t k) {
  std::vector<Vec> a(k);
  for (auto& col : a) col = gaussian(rng, dim);
  std::vector<Vec> reflectors;
  for (std::size_t j = 0; j < k; ++j) {
    Vec x = a[j];
    for (const auto& u : reflectors) {
      const double d = 2.0 * dot(u, x);
      for (std::size_t i = 0; i < dim; ++i) x[i] -= d * u[i];
    }
    Vec u(dim, 0.0);
    double tail = 0.0;
    for (std::size_t i = j; i < dim; ++i) tail += x[i] * x[i];
    tail = std::sqrt(tail);
    for (std::size_t i = j; i < dim; ++i) u[i] = x[i];
    u[j] += x[j] >= 0 ? tail : -tail;
    reflectors.push_back(unit(u));
  }
  // Q's columns: Q e_j = H_0 H_1 ... H_{k-1} e_j.
  std::vector<Vec> q(k, Vec(dim, 0.0));
  for (std::size_t j = 0; j < k; ++j) {
    Vec e(dim, 0.0);
    e[j] = 1.0;
    for (std::size_t r = reflectors.size(); r-- > 0;) {
      const double d = 2.0 * dot(reflectors[r], e);
      for (std::size_t i = 0; i < dim; ++i) e[i] -= d * reflectors[r][i];
    }
    q[j] = e;
  }
  return q;
}

// Solves A x = b for symmetric positive definite A by Cholesky.
inline Vec cholesky_solve(std::vector<Vec> a, Vec b) {
  const std::size_t n = b.size();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j][j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j][k] * a[j][k];
    a[j][j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i][k] * a[j][k];
      a[i][j] = s / a[j][j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) b[i] -= a[i][k] * b[k];
    b[i] /= a[i][i];
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= a[k][i] * b[k];
    b[i] /= a[i][i];
  }
  return b;
}

// Residual norm of the dense least-squares fit of v onto span(cols).
inline double least_squares_residual(const std::vector<Vec>& cols, const Vec& v) {
  const std::size_t k = cols.size();
  std::vector<Vec> gram(k, Vec(k));
  Vec rhs(k);
  for (std::size_t i = 0; i < k; ++i) {
    rhs[i] = dot(cols[i], v);
    for (std::size_t j = 0; j < k; ++j) gram[i][j] = dot(cols[i], cols[j]);
  }
  const Vec z = cholesky_solve(gram, rhs);
  Vec r = v;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t d = 0; d < v.size(); ++d) r[d] -= z[i] * cols[i][d];
  }
  return norm(r);
}

// Straight-line replay of the sequential common-basis construction.
struct ScriptModel {
  Vec shift;
  std::vector<std::pair<std::string, double>> candidates;  // already ranked
};

struct ScriptResult {
  std::vector<std::string> words;
  std::vector<bool> satisfied;
  std::vector<std::size_t> examined;
};

inline ScriptResult scripted_common_basis(const std::vector<ScriptModel>& models,
                                          const std::function<Vec(const std::string&)>& word_vector,
                                          double ortho_threshold, double epsilon_fraction, std::size_t cap) {
  ScriptResult out;
  std::vector<Vec> dirs;
  auto explained = [&](const Vec& v) {
    const double vn = norm(v);
    if (vn == 0.0) return true;
    Vec r = v;
    for (const auto& d : dirs) {
      const double z = dot(v, d);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] -= z * d[i];
    }
    return norm(r) < epsilon_fraction * vn;
  };
  for (const auto& m : models) {
    bool ok = explained(m.shift);
    std::size_t examined = 0;
    for (const auto& [word, p] : m.candidates) {
      if (ok || examined >= cap) break;
      ++examined;
      if (std::find(out.words.begin(), out.words.end(), word) != out.words.end()) continue;
      const Vec d = unit(word_vector(word));
      bool orthogonal = true;
      for (const auto& other : dirs) {
        if (std::abs(dot(d, other)) > ortho_threshold) orthogonal = false;
      }
      if (!orthogonal) continue;
      out.words.push_back(word);
      dirs.push_back(d);
      ok = explained(m.shift);
    }
    out.satisfied.push_back(ok);
    out.examined.push_back(examined);
  }
  return out;
}

// Distance over dense coordinates.
inline double dense_distance(const Vec& a, const Vec& b, bool l1) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += l1 ? std::abs(d) : d * d;
  }
  return l1 ? s : std::sqrt(s);
}

// Index of the nearest point, ties to the smallest label.
inline std::size_t brute_force_nearest(const std::vector<Vec>& points, const std::vector<std::string>& labels,
                                       const Vec& target, bool l1) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = dense_distance(points[i], target, l1);
    if (d < best_d || (d == best_d && labels[i] < labels[best])) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

// Minimum over alpha in [0, hi]^2 of the distance of a1*z1 + a2*z2 to the
// target: a coarse grid, then two zoomed refinements around the best point.
inline double grid_pair_minimum(const Vec& z1, const Vec& z2, const Vec& target, bool l1, double hi = 4.0) {
  auto f = [&](double a1, double a2) {
    Vec m(z1.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = a1 * z1[i] + a2 * z2[i];
    return dense_distance(m, target, l1);
  };
  double lo1 = 0.0, hi1 = hi, lo2 = 0.0, hi2 = hi;
  double best = std::numeric_limits<double>::infinity();
  double b1 = 0.0, b2 = 0.0;
  for (int level = 0; level < 4; ++level) {
    const int steps = 200;
    const double s1 = (hi1 - lo1) / steps, s2 = (hi2 - lo2) / steps;
    for (int i = 0; i <= steps; ++i) {
      for (int j = 0; j <= steps; ++j) {
        const double a1 = lo1 + i * s1, a2 = lo2 + j * s2;
        const double d = f(a1, a2);
        if (d < best) {
          best = d;
          b1 = a1;
          b2 = a2;
        }
      }
    }
    lo1 = std::max(0.0, b1 - 4 * s1);
    hi1 = b1 + 4 * s1;
    lo2 = std::max(0.0, b2 - 4 * s2);
    hi2 = b2 + 4 * s2;
  }
  return best;
}

}  // namespace xpert::oracle
