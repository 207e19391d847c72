#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "mgn/eval.hpp"

namespace mgn {

namespace {

using SparseRow = std::vector<std::pair<int, double>>;  // (column, value), ascending column

/// Rows of the k nearest items of every row (self included), ties by index.
std::vector<std::vector<int>> nearest(const Eigen::MatrixXd& dist, int k) {
  const int n = static_cast<int>(dist.rows());
  std::vector<std::vector<int>> ranks(static_cast<std::size_t>(n));
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      const double da = dist(i, a);
      const double db = dist(i, b);
      return da < db || (da == db && a < b);
    });
    ranks[static_cast<std::size_t>(i)].assign(idx.begin(), idx.begin() + k);
  }
  return ranks;
}

/// Members of the first `k` neighbours of `item` that also have `item` among
/// their own first `k` neighbours.
std::vector<int> k_reciprocal(const std::vector<std::vector<int>>& ranks, int item, int k) {
  std::vector<int> out;
  const auto& forward = ranks[static_cast<std::size_t>(item)];
  for (int f = 0; f < k; ++f) {
    const int candidate = forward[static_cast<std::size_t>(f)];
    const auto& backward = ranks[static_cast<std::size_t>(candidate)];
    if (std::find(backward.begin(), backward.begin() + k, item) != backward.begin() + k) out.push_back(candidate);
  }
  return out;
}

}  // namespace

Eigen::MatrixXd rerank(const Eigen::MatrixXd& dist_qg, const Eigen::MatrixXd& dist_qq, const Eigen::MatrixXd& dist_gg,
                       const RerankParams& params) {
  const int q = static_cast<int>(dist_qg.rows());
  const int g = static_cast<int>(dist_qg.cols());
  if (dist_qq.rows() != q || dist_qq.cols() != q || dist_gg.rows() != g || dist_gg.cols() != g) {
    throw ShapeError("rerank: inconsistent distance matrix sizes");
  }
  if (params.k1 < 1 || params.k2 < 1) throw InputError("rerank: k1 and k2 must be >= 1");
  if (params.k1 > g || params.k2 > g) {
    throw InputError("rerank: k1=" + std::to_string(params.k1) + ", k2=" + std::to_string(params.k2) +
                     " exceed gallery size " + std::to_string(g));
  }
  if (params.lambda < 0.0 || params.lambda > 1.0) throw InputError("rerank: lambda must lie in [0, 1]");

  const int n = q + g;
  Eigen::MatrixXd all(n, n);
  all << dist_qq, dist_qg, dist_qg.transpose(), dist_gg;
  all = all.array().square().matrix();
  // Column-wise max normalization followed by a transpose.
  Eigen::RowVectorXd col_max = all.colwise().maxCoeff();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (col_max(j) <= 0.0) col_max(j) = 1.0;
  }
  const Eigen::MatrixXd normalized = (all.array().rowwise() / col_max.array()).matrix().transpose();

  const int k1 = params.k1;
  const int k1_half = static_cast<int>(std::nearbyint(static_cast<double>(k1) / 2.0));
  const int depth = std::max(k1 + 1, params.k2);
  const auto ranks = nearest(normalized, std::min(depth, n));

  std::vector<SparseRow> encoded(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::vector<int> reciprocal = k_reciprocal(ranks, i, std::min(k1 + 1, n));
    std::vector<int> expansion = reciprocal;
    for (int candidate : reciprocal) {
      const std::vector<int> cand_set = k_reciprocal(ranks, candidate, std::min(k1_half + 1, n));
      std::vector<int> sorted_cand = cand_set;
      std::sort(sorted_cand.begin(), sorted_cand.end());
      sorted_cand.erase(std::unique(sorted_cand.begin(), sorted_cand.end()), sorted_cand.end());
      std::vector<int> sorted_rec = reciprocal;
      std::sort(sorted_rec.begin(), sorted_rec.end());
      std::vector<int> common;
      std::set_intersection(sorted_cand.begin(), sorted_cand.end(), sorted_rec.begin(), sorted_rec.end(),
                            std::back_inserter(common));
      if (static_cast<double>(common.size()) > 2.0 / 3.0 * static_cast<double>(cand_set.size())) {
        expansion.insert(expansion.end(), cand_set.begin(), cand_set.end());
      }
    }
    std::sort(expansion.begin(), expansion.end());
    expansion.erase(std::unique(expansion.begin(), expansion.end()), expansion.end());
    double total = 0;
    SparseRow row;
    for (int j : expansion) {
      const double w = std::exp(-normalized(i, j));
      row.emplace_back(j, w);
      total += w;
    }
    for (auto& [_, w] : row) w /= total;
    encoded[static_cast<std::size_t>(i)] = std::move(row);
  }

  if (params.k2 != 1) {
    std::vector<SparseRow> expanded(static_cast<std::size_t>(n));
    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int r = 0; r < params.k2; ++r) {
        for (const auto& [j, w] : encoded[static_cast<std::size_t>(ranks[static_cast<std::size_t>(i)][static_cast<std::size_t>(r)])]) {
          acc[static_cast<std::size_t>(j)] += w;
        }
      }
      for (int j = 0; j < n; ++j) {
        if (acc[static_cast<std::size_t>(j)] != 0.0) {
          expanded[static_cast<std::size_t>(i)].emplace_back(j, acc[static_cast<std::size_t>(j)] / params.k2);
        }
      }
    }
    encoded = std::move(expanded);
  }

  std::vector<SparseRow> inverted(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (const auto& [j, w] : encoded[static_cast<std::size_t>(i)]) inverted[static_cast<std::size_t>(j)].emplace_back(i, w);
  }

  Eigen::MatrixXd result(q, g);
  std::vector<double> overlap(static_cast<std::size_t>(n));
  for (int i = 0; i < q; ++i) {
    std::fill(overlap.begin(), overlap.end(), 0.0);
    for (const auto& [j, w] : encoded[static_cast<std::size_t>(i)]) {
      for (const auto& [r, v] : inverted[static_cast<std::size_t>(j)]) overlap[static_cast<std::size_t>(r)] += std::min(w, v);
    }
    for (int c = 0; c < g; ++c) {
      const double m = overlap[static_cast<std::size_t>(q + c)];
      const double jaccard = 1.0 - m / (2.0 - m);
      result(i, c) = jaccard * (1.0 - params.lambda) + normalized(i, q + c) * params.lambda;
    }
  }
  return result;
}

}  // namespace mgn
