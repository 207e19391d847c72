#include "mgn/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace mgn {

std::vector<RetrievalMeta> retrieval_meta(const std::vector<ImageRecord>& records) {
  std::vector<RetrievalMeta> meta;
  meta.reserve(records.size());
  for (const auto& r : records) meta.push_back({r.identity, r.camera});
  return meta;
}

std::string to_string(PoolMode mode) { return mode == PoolMode::kAvg ? "avg" : "max"; }

PoolMode parse_pool_mode(const std::string& text) {
  if (text == "avg") return PoolMode::kAvg;
  if (text == "max") return PoolMode::kMax;
  throw ConfigError("unknown pooling mode '" + text + "' (expected avg or max)");
}

std::string Protocol::label() const {
  std::string s = multi_query ? "MQ(" + to_string(pool) + ")" : "SQ";
  if (reranked) s += "+RK";
  return s;
}

RankingReport evaluate(const Eigen::MatrixXd& dist, const std::vector<RetrievalMeta>& query,
                       const std::vector<RetrievalMeta>& gallery, const Protocol& protocol) {
  if (dist.rows() != static_cast<Eigen::Index>(query.size()) ||
      dist.cols() != static_cast<Eigen::Index>(gallery.size())) {
    throw ShapeError("evaluate: distance matrix is " + std::to_string(dist.rows()) + "x" +
                     std::to_string(dist.cols()) + " but metadata has " + std::to_string(query.size()) +
                     " queries and " + std::to_string(gallery.size()) + " gallery items");
  }
  if (!dist.allFinite()) throw InputError("evaluate: distance matrix has non-finite entries");

  RankingReport report;
  report.protocol = protocol;
  const std::size_t g = gallery.size();
  std::vector<double> matches_at(g, 0.0);
  std::vector<int> order(g);
  int evaluated = 0;
  double ap_sum = 0;
  for (std::size_t q = 0; q < query.size(); ++q) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dist(static_cast<Eigen::Index>(q), a) < dist(static_cast<Eigen::Index>(q), b); });
    int valid_rank = 0;
    int hits = 0;
    int first_hit = -1;
    double precision_sum = 0;
    for (int idx : order) {
      const RetrievalMeta& item = gallery[static_cast<std::size_t>(idx)];
      if (item.identity == kJunkIdentity) continue;
      if (item.identity == query[q].identity && item.camera == query[q].camera) continue;
      ++valid_rank;
      if (item.identity == query[q].identity) {
        ++hits;
        if (first_hit < 0) first_hit = valid_rank - 1;
        precision_sum += static_cast<double>(hits) / static_cast<double>(valid_rank);
      }
    }
    if (hits == 0 || query[q].identity == kJunkIdentity) {
      ++report.skipped_queries;
      continue;
    }
    const double ap = precision_sum / static_cast<double>(hits);
    report.average_precision.push_back(ap);
    report.evaluated_queries.push_back(static_cast<int>(q));
    ap_sum += ap;
    matches_at[static_cast<std::size_t>(first_hit)] += 1.0;
    ++evaluated;
  }
  report.cmc_curve.assign(g, 0.0);
  if (evaluated > 0) {
    double cumulative = 0;
    for (std::size_t r = 0; r < g; ++r) {
      cumulative += matches_at[r];
      report.cmc_curve[r] = cumulative / static_cast<double>(evaluated);
    }
    report.mean_ap = ap_sum / static_cast<double>(evaluated);
  }
  for (int rank : {1, 5, 10}) {
    double rate = 0;
    if (!report.cmc_curve.empty()) rate = report.cmc_curve[std::min<std::size_t>(static_cast<std::size_t>(rank), g) - 1];
    report.cmc[rank] = rate;
  }
  return report;
}

Eigen::RowVectorXf pool_multi_query(const Eigen::Ref<const Eigen::MatrixXf>& features, PoolMode mode) {
  if (features.rows() == 0) throw InputError("pool_multi_query: empty feature set");
  if (mode == PoolMode::kAvg) return features.colwise().mean();
  return features.colwise().maxCoeff();
}

QueryGroups group_queries(const std::vector<RetrievalMeta>& query) {
  QueryGroups groups;
  std::map<std::pair<int, int>, std::size_t> index;
  for (std::size_t i = 0; i < query.size(); ++i) {
    const auto key = std::make_pair(query[i].identity, query[i].camera);
    auto [it, inserted] = index.emplace(key, groups.members.size());
    if (inserted) {
      groups.members.emplace_back();
      groups.meta.push_back(query[i]);
    }
    groups.members[it->second].push_back(static_cast<int>(i));
  }
  return groups;
}

Eigen::MatrixXf pool_query_groups(const Eigen::MatrixXf& features, const QueryGroups& groups, PoolMode mode) {
  Eigen::MatrixXf pooled(static_cast<Eigen::Index>(groups.members.size()), features.cols());
  for (std::size_t gi = 0; gi < groups.members.size(); ++gi) {
    const auto& rows = groups.members[gi];
    Eigen::MatrixXf subset(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) subset.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    pooled.row(static_cast<Eigen::Index>(gi)) = pool_multi_query(subset, mode);
  }
  return pooled;
}

std::string format_report_table(const std::vector<RankingReport>& reports) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %-12s %8s %8s %8s %8s\n", "Dataset", "Protocol", "Rank-1", "Rank-5",
                "Rank-10", "mAP");
  out += line;
  out += std::string(73, '-') + "\n";
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-24s %-12s %8.1f %8.1f %8.1f %8.1f\n", r.protocol.dataset.c_str(),
                  r.protocol.label().c_str(), 100.0 * r.cmc.at(1), 100.0 * r.cmc.at(5), 100.0 * r.cmc.at(10),
                  100.0 * r.mean_ap);
    out += line;
  }
  return out;
}

}  // namespace mgn
