#ifndef MGN_EVAL_HPP
#define MGN_EVAL_HPP

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "mgn/data.hpp"
#include "mgn/error.hpp"

namespace mgn {

/// Euclidean distances between the rows of `a` [Q x D] and `b` [G x D], via
/// |a|^2 + |b|^2 - 2 a.b clamped at zero before the square root.
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> pairwise_distances(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  using Result = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (a.cols() != b.cols()) {
    throw ShapeError("pairwise_distances: feature dims differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()) + ")");
  }
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> a_sq = a.rowwise().squaredNorm();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> b_sq = b.rowwise().squaredNorm().transpose();
  Result d = Scalar(-2) * (a * b.transpose());
  d.colwise() += a_sq;
  d.rowwise() += b_sq;
  return d.cwiseMax(Scalar(0)).cwiseSqrt();
}

/// Identity and camera of one query or gallery item.
struct RetrievalMeta {
  int identity = kJunkIdentity;
  int camera = 0;
};

std::vector<RetrievalMeta> retrieval_meta(const std::vector<ImageRecord>& records);

enum class PoolMode { kAvg, kMax };

std::string to_string(PoolMode mode);
PoolMode parse_pool_mode(const std::string& text);

struct Protocol {
  std::string dataset = "unspecified";
  bool multi_query = false;
  PoolMode pool = PoolMode::kAvg;
  bool reranked = false;

  /// "SQ" / "MQ(avg)" / "SQ+RK" ...
  std::string label() const;
};

struct RankingReport {
  std::map<int, double> cmc;       // rank -> rate, ranks 1, 5, 10
  std::vector<double> cmc_curve;   // full curve, index r = rank r+1
  double mean_ap = 0;
  std::vector<double> average_precision;  // per evaluated query
  std::vector<int> evaluated_queries;     // query row of each AP entry
  int skipped_queries = 0;                // queries without a valid positive
  Protocol protocol;
};

/// Standard person re-identification protocol. For each query, gallery entries
/// sharing both identity and camera with it, and junk entries, are removed; the
/// remaining list is ranked by ascending distance with ties broken by gallery
/// index. AP is the mean of precision at each correct match. Queries without any
/// valid positive are excluded from both CMC and mAP.
RankingReport evaluate(const Eigen::MatrixXd& dist, const std::vector<RetrievalMeta>& query,
                       const std::vector<RetrievalMeta>& gallery, const Protocol& protocol = {});

/// Element-wise mean or max over the rows of `features`.
Eigen::RowVectorXf pool_multi_query(const Eigen::Ref<const Eigen::MatrixXf>& features, PoolMode mode);

/// Queries grouped by (identity, camera) in order of first appearance.
struct QueryGroups {
  std::vector<std::vector<int>> members;
  std::vector<RetrievalMeta> meta;
};

QueryGroups group_queries(const std::vector<RetrievalMeta>& query);

/// One pooled feature per (identity, camera) group: rows follow `groups.members`.
Eigen::MatrixXf pool_query_groups(const Eigen::MatrixXf& features, const QueryGroups& groups, PoolMode mode);

struct RerankParams {
  int k1 = 20;
  int k2 = 6;
  double lambda = 0.3;
};

/// k-reciprocal re-ranking. Distances are squared and normalized per row, each
/// item's k-reciprocal neighbour set is expanded with the sets of its
/// k1/2-reciprocal neighbours, encoded as Gaussian-weighted sparse vectors,
/// smoothed over the k2 nearest neighbours, and compared with a Jaccard distance.
/// Output [Q x G] = lambda * normalized original + (1 - lambda) * Jaccard.
Eigen::MatrixXd rerank(const Eigen::MatrixXd& dist_qg, const Eigen::MatrixXd& dist_qq, const Eigen::MatrixXd& dist_gg,
                       const RerankParams& params = {});

/// Fixed-width table: protocol, Rank-1, Rank-5, Rank-10, mAP (percent).
std::string format_report_table(const std::vector<RankingReport>& reports);

}  // namespace mgn

#endif  // MGN_EVAL_HPP
