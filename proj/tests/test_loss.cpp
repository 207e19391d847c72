#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mgn/loss.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mgn;

namespace {

Eigen::MatrixXd random_matrix(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = d(rng);
  return m;
}

std::vector<int> pk_labels(int p, int k) {
  std::vector<int> y;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < k; ++j) y.push_back(i);
  }
  return y;
}

}  // namespace

TEST_CASE("softmax of zero features is log C") {
  const Eigen::MatrixXd f = Eigen::MatrixXd::Zero(4, 6);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Random(7, 6);
  const std::vector<int> y{0, 3, 6, 2};
  CHECK(softmax_loss<double>(f, y, w) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
}

TEST_CASE("softmax with a single class is zero") {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd f = random_matrix(5, 4, rng);
  const Eigen::MatrixXd w = random_matrix(1, 4, rng);
  const std::vector<int> y(5, 0);
  CHECK(softmax_loss<double>(f, y, w) == doctest::Approx(0.0));
}

TEST_CASE("softmax matches the scalar oracle") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd f = random_matrix(4, 6, rng, 2.0);
    const Eigen::MatrixXd w = random_matrix(5, 6, rng, 2.0);
    std::uniform_int_distribution<int> cls(0, 4);
    std::vector<int> y(4);
    for (int& v : y) v = cls(rng);
    CHECK(std::abs(softmax_loss<double>(f, y, w) - oracle::softmax_loss(f, y, w)) < 1e-10);
  }
}

TEST_CASE("softmax is stable for huge logits") {
  Eigen::MatrixXd f(1, 1);
  f << 1000.0;
  Eigen::MatrixXd w(2, 1);
  w << 1.0, -1.0;
  const std::vector<int> y{0};
  const double loss = softmax_loss<double>(f, y, w);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(0.0));
}

TEST_CASE("softmax rejects out-of-range labels") {
  const Eigen::MatrixXd f = Eigen::MatrixXd::Zero(2, 3);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Zero(4, 3);
  const std::vector<int> bad{0, 4};
  CHECK_THROWS_AS(softmax_loss<double>(f, bad, w), InputError);
  const std::vector<int> negative{-1, 0};
  CHECK_THROWS_AS(softmax_loss<double>(f, negative, w), InputError);
}

TEST_CASE("softmax is invariant to a per-sample logit shift") {
  // Appending a constant feature whose weight is equal for every class adds the
  // same value to all logits of that sample.
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd f = random_matrix(3, 4, rng);
  const Eigen::MatrixXd w = random_matrix(6, 4, rng);
  const std::vector<int> y{1, 5, 2};
  Eigen::MatrixXd f2(3, 5);
  f2 << f, Eigen::VectorXd::LinSpaced(3, -4.0, 7.0);
  Eigen::MatrixXd w2(6, 5);
  w2 << w, Eigen::VectorXd::Constant(6, 1.5);
  CHECK(softmax_loss<double>(f2, y, w2) == doctest::Approx(softmax_loss<double>(f, y, w)).epsilon(1e-12));
}

TEST_CASE("softmax gradients match finite differences") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 10; ++t) {
    const Eigen::MatrixXd f = random_matrix(6, 5, rng);
    const Eigen::MatrixXd w = random_matrix(4, 5, rng);
    std::uniform_int_distribution<int> cls(0, 3);
    std::vector<int> y(6);
    for (int& v : y) v = cls(rng);
    Eigen::MatrixXd gf;
    Eigen::MatrixXd gw;
    softmax_loss<double>(f, y, w, &gf, &gw);
    const Eigen::MatrixXd nf =
        oracle::numeric_gradient([&](const Eigen::MatrixXd& x) { return oracle::softmax_loss(x, y, w); }, f);
    const Eigen::MatrixXd nw =
        oracle::numeric_gradient([&](const Eigen::MatrixXd& x) { return oracle::softmax_loss(f, y, x); }, w);
    CHECK(oracle::relative_error(gf, nf) < 1e-6);
    CHECK(oracle::relative_error(gw, nw) < 1e-6);
  }
}

TEST_CASE("triplet of identical features is K*P*margin") {
  const Eigen::MatrixXd f = Eigen::MatrixXd::Ones(4, 3);
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(batch_hard_triplet<double>(f, y, 1.2) == 4.8);
}

TEST_CASE("triplet vanishes for well-separated identities") {
  Eigen::MatrixXd f(4, 2);
  f << 0, 0, 0.1, 0, 10, 0, 10.1, 0;
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(batch_hard_triplet<double>(f, y, 1.2) == 0.0);
}

TEST_CASE("triplet matches the exhaustive oracle") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd f = random_matrix(6, 8, rng, 0.3);
    const auto y = pk_labels(3, 2);
    CHECK(std::abs(batch_hard_triplet<double>(f, y, 1.2) - oracle::batch_hard_triplet(f, y, 1.2)) < 1e-10);
  }
}

TEST_CASE("triplet requires positives and negatives") {
  const Eigen::MatrixXd f = Eigen::MatrixXd::Random(3, 2);
  CHECK_THROWS_AS(batch_hard_triplet<double>(f, std::vector<int>{0, 0, 0}, 1.2), InputError);
  CHECK_THROWS_AS(batch_hard_triplet<double>(f, std::vector<int>{0, 1, 1}, 1.2), InputError);
}

TEST_CASE("triplet is permutation and translation invariant") {
  std::mt19937_64 rng(41);
  const Eigen::MatrixXd f = random_matrix(8, 5, rng);
  const auto y = pk_labels(4, 2);
  const double base = batch_hard_triplet<double>(f, y, 1.2);

  std::vector<int> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd fp(8, 5);
  std::vector<int> yp(8);
  for (int i = 0; i < 8; ++i) {
    fp.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
    yp[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  CHECK(batch_hard_triplet<double>(fp, yp, 1.2) == doctest::Approx(base).epsilon(1e-12));

  const Eigen::RowVectorXd shift = random_matrix(1, 5, rng, 3.0);
  const Eigen::MatrixXd ft = f.rowwise() + shift;
  CHECK(batch_hard_triplet<double>(ft, y, 1.2) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("triplet gradients match finite differences") {
  std::mt19937_64 rng(51);
  int checked = 0;
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd f = random_matrix(8, 6, rng, 0.5);
    const auto y = pk_labels(4, 2);
    Eigen::MatrixXd g;
    batch_hard_triplet<double>(f, y, 1.2, &g);
    const Eigen::MatrixXd n =
        oracle::numeric_gradient([&](const Eigen::MatrixXd& x) { return oracle::batch_hard_triplet(x, y, 1.2); }, f);
    CHECK(oracle::relative_error(g, n) < 1e-6);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("mining picks the farthest positive and closest negative") {
  Eigen::MatrixXd f(4, 1);
  f << 0, 1, 5, 1.5;
  const std::vector<int> y{0, 0, 1, 1};
  TripletMining m;
  batch_hard_triplet<double>(f, y, 1.0, nullptr, &m);
  CHECK(m.hardest_positive[0] == 1);
  CHECK(m.hardest_negative[0] == 3);
  CHECK(m.hardest_negative[2] == 1);
}

TEST_CASE("canonical routing has 8 softmax and 3 triplet targets") {
  const auto targets = loss_targets(ModelConfig::canonical(10), LossConfig{});
  std::vector<std::string> softmax;
  std::vector<std::string> triplet;
  for (const auto& t : targets) (t.kind == LossKind::kSoftmax ? softmax : triplet).push_back(t.feature);
  CHECK(softmax == std::vector<std::string>{"z_g@global", "z_g@part2", "f_p1@part2", "f_p2@part2", "z_g@part3",
                                            "f_p1@part3", "f_p2@part3", "f_p3@part3"});
  CHECK(triplet == std::vector<std::string>{"f_g@global", "f_g@part2", "f_g@part3"});
}

TEST_CASE("routing without the triplet loss moves softmax to reduced features") {
  LossConfig loss;
  loss.enable_triplet = false;
  const auto targets = loss_targets(ModelConfig::canonical(10), loss);
  CHECK(targets.size() == 8);
  for (const auto& t : targets) {
    CHECK(t.kind == LossKind::kSoftmax);
    CHECK(t.feature.rfind("z_g", 0) != 0);
  }

  ModelConfig global_only = ModelConfig::canonical(10);
  global_only.branches = {BranchConfig::global()};
  CHECK(loss_targets(global_only, loss).size() == 1);
}

TEST_CASE("route_losses totals the weighted terms and flags missing heads") {
  ModelConfig config = testing::tiny_config(4);
  Model model(config, 3);
  const Tensor4f images = testing::random_images(8, 96, 32, 9);
  const EmbeddingBundle bundle = model.forward(images, Mode::kTrain);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  LossConfig loss;
  loss.softmax_weight = 0.5;
  loss.triplet_weight = 2.0;
  LossGradients grads;
  const LossReport report = route_losses(bundle, labels, model.heads(), config, loss, &grads);
  CHECK(report.terms.size() == 11);
  CHECK(report.count(LossKind::kSoftmax) == 8);
  CHECK(report.count(LossKind::kTriplet) == 3);
  double total = 0;
  for (const auto& t : report.terms) total += t.weight * t.value;
  CHECK(report.total == doctest::Approx(total).epsilon(1e-12));
  CHECK(report.keys().front() == "softmax:z_g@global");
  CHECK(grads.heads.size() == 8);

  const LossReport again = route_losses(bundle, labels, model.heads(), config, loss);
  CHECK(again.total == report.total);

  std::map<std::string, ClassifierHead> missing = model.heads();
  missing.erase("f_p2@part3");
  CHECK_THROWS_AS(route_losses(bundle, labels, missing, config, loss), ConfigError);
}
