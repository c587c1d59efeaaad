#pragma once

#include "dpmm_rul/common.hpp"

#include <map>
#include <vector>

namespace dpmm_rul {

/// Normalized mutual information between two partitions, natural log,
/// normalized by the arithmetic mean of the entropies. Returns 0 when
/// either partition has a single class (0/0 convention).
inline double nmi(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("nmi: label vectors differ in length");
  if (truth.empty()) throw std::invalid_argument("nmi: empty labels");

  const double n = static_cast<double>(truth.size());
  std::map<int, double> cu, cv;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    cu[truth[i]] += 1.0;
    cv[pred[i]] += 1.0;
    joint[{truth[i], pred[i]}] += 1.0;
  }

  double hu = 0.0, hv = 0.0;
  for (const auto& [_, c] : cu) hu -= (c / n) * std::log(c / n);
  for (const auto& [_, c] : cv) hv -= (c / n) * std::log(c / n);
  if (hu <= 0.0 || hv <= 0.0) return 0.0;

  double mi = 0.0;
  for (const auto& [uv, c] : joint) {
    const double pij = c / n;
    mi += pij * std::log(pij * n * n / (cu[uv.first] * cv[uv.second]));
  }
  return mi / (0.5 * (hu + hv));
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("rmse: length mismatch");
  if (pred.empty()) throw std::invalid_argument("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine_similarity: dimension mismatch");
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0)
    throw std::invalid_argument("cosine_similarity: zero vector");
  return u.dot(v) / (nu * nv);
}

/// Mean cosine similarity over all unordered pairs.
inline double avg_pairwise_similarity(const std::vector<Vector>& vectors) {
  if (vectors.size() < 2)
    throw std::invalid_argument("avg_pairwise_similarity: need >= 2 vectors");
  double acc = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = i + 1; j < vectors.size(); ++j) {
      acc += cosine_similarity(vectors[i], vectors[j]);
      ++pairs;
    }
  return acc / pairs;
}

}  // namespace dpmm_rul
