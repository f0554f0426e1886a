#pragma once

// Independent reference implementations used as test oracles. They are
// deliberately naive and share no code with the library paths they check.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace ref {

using Matrix = std::vector<std::vector<double>>;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// 1-based rank of gallery item g: items scoring strictly higher, or equal
// with a smaller index, come first.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t g) {
  std::size_t r = 1;
  for (std::size_t h = 0; h < scores.size(); ++h)
    if (scores[h] > scores[g] || (scores[h] == scores[g] && h < g)) ++r;
  return r;
}

inline double recall_at_k(const Matrix& s, const std::vector<int>& query_ids,
                          const std::vector<int>& gallery_ids, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t q = 0; q < s.size(); ++q) {
    bool hit = false;
    for (std::size_t g = 0; g < gallery_ids.size(); ++g)
      if (gallery_ids[g] == query_ids[q] && rank_of(s[q], g) <= k) hit = true;
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(s.size());
}

// AP = mean over relevant items g of (relevant items ranked at or above g) / rank(g).
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& gallery_ids,
                                int query_id) {
  long double total = 0.0L;
  std::size_t relevant = 0;
  for (std::size_t g = 0; g < scores.size(); ++g) {
    if (gallery_ids[g] != query_id) continue;
    ++relevant;
    const std::size_t rg = rank_of(scores, g);
    std::size_t above = 0;
    for (std::size_t h = 0; h < scores.size(); ++h)
      if (gallery_ids[h] == query_id && rank_of(scores, h) <= rg) ++above;
    total += static_cast<long double>(above) / static_cast<long double>(rg);
  }
  return static_cast<double>(total / static_cast<long double>(relevant));
}

inline double mean_ap(const Matrix& s, const std::vector<int>& query_ids, const std::vector<int>& gallery_ids) {
  double total = 0.0;
  for (std::size_t q = 0; q < s.size(); ++q) total += average_precision(s[q], gallery_ids, query_ids[q]);
  return total / static_cast<double>(s.size());
}

// Row-wise KL(p || q + eps) averaged over rows, straight from the definition.
inline double sdm_direction(const Matrix& s, const Matrix& y, double tau, double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double z = 0.0, ysum = 0.0;
    for (std::size_t j = 0; j < s[i].size(); ++j) {
      z += std::exp(s[i][j] / tau);
      ysum += y[i][j];
    }
    for (std::size_t j = 0; j < s[i].size(); ++j) {
      const double p = std::exp(s[i][j] / tau) / z;
      total += p * std::log(p / (y[i][j] / ysum + eps));
    }
  }
  return total / static_cast<double>(s.size());
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> x, std::size_t i, double h = 1e-5) {
  const double saved = x[i];
  x[i] = saved + h;
  const double plus = f(x);
  x[i] = saved - h;
  const double minus = f(x);
  return (plus - minus) / (2.0 * h);
}

}  // namespace ref
