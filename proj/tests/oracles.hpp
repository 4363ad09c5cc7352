// SPDX-License-Identifier: Apache-2.0
// Naive reference implementations used as test oracles. They share no code
// with the library: plain loops over std::vector, no Tape, no Tensor ops.
#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t d = 0; d < u.size(); ++d) {
    dot += u[d] * v[d];
    nu += u[d] * u[d];
    nv += v[d] * v[d];
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// -log( e^{s(a,j)/tau} / sum_{k != a} e^{s(a,k)/tau} ), every term computed directly.
inline double pair_term(const Mat& reps, std::size_t a, std::size_t j, double tau) {
  double denom = 0.0;
  for (std::size_t k = 0; k < reps.size(); ++k) {
    if (k == a) continue;
    denom += std::exp(cosine(reps[a], reps[k]) / tau);
  }
  return -std::log(std::exp(cosine(reps[a], reps[j]) / tau) / denom);
}

inline double l_c(const Mat& clean, const Mat& asr, double tau) {
  const std::size_t n = clean.size();
  Mat pool = clean;
  pool.insert(pool.end(), asr.begin(), asr.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += pair_term(pool, i, n + i, tau);
    total += pair_term(pool, n + i, i, tau);
  }
  return total / static_cast<double>(2 * n);
}

inline double l_hard(const Mat& reps, const std::vector<int>& y, double tau) {
  const std::size_t n = reps.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && y[i] == y[j]) total += pair_term(reps, i, j, tau);
  return total / static_cast<double>(n);
}

inline double l_soft(const Mat& reps, const Mat& p, double tau) {
  const std::size_t n = reps.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double w = 0.0;
      for (std::size_t c = 0; c < p[i].size(); ++c) w += p[i][c] * p[j][c];
      total += w * pair_term(reps, i, j, tau);
    }
  return total / static_cast<double>(n);
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) s += e[c] = std::exp(z[c] / tau);
  for (double& v : e) v /= s;
  return e;
}

inline double l_d(const Mat& logits, const Mat& prev, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto q = softmax(logits[i], tau);
    for (std::size_t c = 0; c < q.size(); ++c)
      if (prev[i][c] > 0.0) total += prev[i][c] * std::log(prev[i][c] / q[c]);
  }
  return total / static_cast<double>(logits.size());
}

inline double cross_entropy_mean(const Mat& logits, const std::vector<int>& y) {
  if (logits.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += -std::log(softmax(logits[i], 1.0)[y[i]]);
  return total / static_cast<double>(logits.size());
}

// Plain recursive Levenshtein distance, deliberately without memoization.
inline std::size_t levenshtein(const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                               std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = levenshtein(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  const std::size_t del = levenshtein(a, i + 1, b, j) + 1;
  const std::size_t ins = levenshtein(a, i, b, j + 1) + 1;
  return std::min(sub, std::min(del, ins));
}

inline Mat random_mat(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Mat m(rows, std::vector<double>(cols));
  for (auto& r : m)
    for (double& v : r) v = nd(rng);
  return m;
}

inline Mat random_probs(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat m(rows, std::vector<double>(cols));
  for (auto& r : m) {
    double s = 0.0;
    for (double& v : r) s += v = u(rng) + 1e-3;
    for (double& v : r) v /= s;
  }
  return m;
}

}  // namespace oracle
