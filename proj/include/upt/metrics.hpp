#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "upt/tensor.hpp"

namespace upt {

// Gallery indices ordered by descending similarity; ties keep ascending index.
inline std::vector<std::size_t> rank_gallery(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

namespace detail {

inline void check_eval_inputs(const Tensor& similarity, const std::vector<int>& query_ids,
                              const std::vector<int>& gallery_ids) {
  if (similarity.rows() != query_ids.size() || similarity.cols() != gallery_ids.size()) {
    throw ShapeError("similarity " + shape_str(similarity.shape()) + " does not match " +
                     std::to_string(query_ids.size()) + " queries x " +
                     std::to_string(gallery_ids.size()) + " gallery items");
  }
}

// 1-based rank of the first relevant item, per query.
inline std::vector<std::size_t> first_hit_ranks(const Tensor& similarity,
                                                const std::vector<int>& query_ids,
                                                const std::vector<int>& gallery_ids) {
  check_eval_inputs(similarity, query_ids, gallery_ids);
  std::vector<std::size_t> ranks(query_ids.size());
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto order = rank_gallery(similarity.row(q));
    auto hit = std::find_if(order.begin(), order.end(),
                            [&](std::size_t g) { return gallery_ids[g] == query_ids[q]; });
    if (hit == order.end()) {
      throw EvaluationError("query " + std::to_string(q) + " has no relevant gallery item");
    }
    ranks[q] = static_cast<std::size_t>(hit - order.begin()) + 1;
  }
  return ranks;
}

}  // namespace detail

// Fraction of queries with a relevant item among the top k.
inline double rank_k(const Tensor& similarity, const std::vector<int>& query_ids,
                     const std::vector<int>& gallery_ids, std::size_t k) {
  const auto ranks = detail::first_hit_ranks(similarity, query_ids, gallery_ids);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

// Non-interpolated AP: mean over relevant items of (relevant so far / rank).
inline double average_precision(std::span<const double> scores, const std::vector<int>& gallery_ids,
                                int query_id) {
  const auto order = rank_gallery(scores);
  // Extended precision keeps the sum correctly rounded, so results do not
  // depend on summation order (5/6 comes out as the double nearest 5/6).
  long double hits = 0.0L, total = 0.0L;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (gallery_ids[order[r]] != query_id) continue;
    hits += 1.0L;
    total += hits / static_cast<long double>(r + 1);
  }
  if (hits == 0.0L) throw EvaluationError("query has no relevant gallery item");
  return static_cast<double>(total / hits);
}

inline double mean_ap(const Tensor& similarity, const std::vector<int>& query_ids,
                      const std::vector<int>& gallery_ids) {
  detail::check_eval_inputs(similarity, query_ids, gallery_ids);
  double total = 0.0;
  for (std::size_t q = 0; q < query_ids.size(); ++q)
    total += average_precision(similarity.row(q), gallery_ids, query_ids[q]);
  return total / static_cast<double>(query_ids.size());
}

struct RetrievalResult {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  double map = 0.0;
  std::vector<std::size_t> ranks;  // first-hit rank per query
};

inline RetrievalResult evaluate_retrieval(const Tensor& similarity, const std::vector<int>& query_ids,
                                          const std::vector<int>& gallery_ids) {
  RetrievalResult r;
  r.ranks = detail::first_hit_ranks(similarity, query_ids, gallery_ids);
  auto frac = [&](std::size_t k) {
    const auto hits = std::count_if(r.ranks.begin(), r.ranks.end(),
                                    [&](std::size_t rank) { return rank <= k; });
    return static_cast<double>(hits) / static_cast<double>(r.ranks.size());
  };
  r.r1 = frac(1);
  r.r5 = frac(5);
  r.r10 = frac(10);
  r.map = mean_ap(similarity, query_ids, gallery_ids);
  return r;
}

}  // namespace upt
