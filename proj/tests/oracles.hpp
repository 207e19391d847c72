// Independent reference implementations used only by the tests. They follow the
// textbook definitions with plain loops and share no code with the library.
#ifndef MGN_TESTS_ORACLES_HPP
#define MGN_TESTS_ORACLES_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

inline double softmax_loss(const Eigen::MatrixXd& f, const std::vector<int>& y, const Eigen::MatrixXd& w) {
  double total = 0;
  for (int i = 0; i < f.rows(); ++i) {
    std::vector<double> logits(static_cast<std::size_t>(w.rows()));
    for (int c = 0; c < w.rows(); ++c) {
      double s = 0;
      for (int k = 0; k < f.cols(); ++k) s += w(c, k) * f(i, k);
      logits[static_cast<std::size_t>(c)] = s;
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - m);
    total += -(logits[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] - m - std::log(z));
  }
  return total / static_cast<double>(f.rows());
}

inline double euclid(const Eigen::MatrixXd& f, int a, int b) {
  double s = 0;
  for (int k = 0; k < f.cols(); ++k) s += (f(a, k) - f(b, k)) * (f(a, k) - f(b, k));
  return std::sqrt(s);
}

inline double batch_hard_triplet(const Eigen::MatrixXd& f, const std::vector<int>& y, double margin) {
  double total = 0;
  const int n = static_cast<int>(f.rows());
  for (int a = 0; a < n; ++a) {
    double hardest_pos = -1;
    double hardest_neg = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = euclid(f, a, j);
      if (y[static_cast<std::size_t>(j)] == y[static_cast<std::size_t>(a)]) {
        hardest_pos = std::max(hardest_pos, d);
      } else {
        hardest_neg = std::min(hardest_neg, d);
      }
    }
    total += std::max(0.0, margin + hardest_pos - hardest_neg);
  }
  return total;
}

inline Eigen::MatrixXd distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd d(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.rows(); ++j) {
      double s = 0;
      for (int k = 0; k < a.cols(); ++k) s += (a(i, k) - b(j, k)) * (a(i, k) - b(j, k));
      d(i, j) = std::sqrt(s);
    }
  }
  return d;
}

struct Item {
  int identity;
  int camera;
};

struct Ranking {
  double mean_ap = 0;
  std::vector<double> cmc;  // cmc[r] = rate of queries whose first match is at rank <= r + 1
  int evaluated = 0;
};

/// Per-definition retrieval metrics. For each query, a gallery item's rank is one
/// plus the number of valid items strictly closer (ties: lower index first);
/// precision at a match is matches-so-far over rank; AP averages it over matches.
inline Ranking retrieval(const Eigen::MatrixXd& dist, const std::vector<Item>& q, const std::vector<Item>& g,
                         int junk) {
  Ranking out;
  const int ng = static_cast<int>(g.size());
  std::vector<int> first_rank_counts(static_cast<std::size_t>(ng) + 1, 0);
  double ap_sum = 0;
  for (int i = 0; i < static_cast<int>(q.size()); ++i) {
    auto valid = [&](int j) {
      return g[static_cast<std::size_t>(j)].identity != junk &&
             !(g[static_cast<std::size_t>(j)].identity == q[static_cast<std::size_t>(i)].identity &&
               g[static_cast<std::size_t>(j)].camera == q[static_cast<std::size_t>(i)].camera);
    };
    auto rank_of = [&](int j) {
      int r = 1;
      for (int k = 0; k < ng; ++k) {
        if (k == j || !valid(k)) continue;
        if (dist(i, k) < dist(i, j) || (dist(i, k) == dist(i, j) && k < j)) ++r;
      }
      return r;
    };
    std::vector<int> match_ranks;
    for (int j = 0; j < ng; ++j) {
      if (valid(j) && g[static_cast<std::size_t>(j)].identity == q[static_cast<std::size_t>(i)].identity) {
        match_ranks.push_back(rank_of(j));
      }
    }
    if (match_ranks.empty() || q[static_cast<std::size_t>(i)].identity == junk) continue;
    std::sort(match_ranks.begin(), match_ranks.end());
    double precision_sum = 0;
    for (std::size_t m = 0; m < match_ranks.size(); ++m) {
      precision_sum += static_cast<double>(m + 1) / static_cast<double>(match_ranks[m]);
    }
    ap_sum += precision_sum / static_cast<double>(match_ranks.size());
    ++first_rank_counts[static_cast<std::size_t>(match_ranks.front())];
    ++out.evaluated;
  }
  out.cmc.assign(static_cast<std::size_t>(ng), 0.0);
  if (out.evaluated == 0) return out;
  int cumulative = 0;
  for (int r = 1; r <= ng; ++r) {
    cumulative += first_rank_counts[static_cast<std::size_t>(r)];
    out.cmc[static_cast<std::size_t>(r - 1)] = static_cast<double>(cumulative) / out.evaluated;
  }
  out.mean_ap = ap_sum / out.evaluated;
  return out;
}

/// Central differences of `fn` with respect to every entry of `x`.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& fn, Eigen::MatrixXd x,
                                        double h = 1e-6) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x(i);
    x(i) = saved + h;
    const double up = fn(x);
    x(i) = saved - h;
    const double down = fn(x);
    x(i) = saved;
    g(i) = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

}  // namespace oracle

#endif  // MGN_TESTS_ORACLES_HPP
