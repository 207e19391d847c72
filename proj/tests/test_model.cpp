#include <doctest.h>

#include <set>

#include "mgn/loss.hpp"
#include "mgn/model.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mgn;

TEST_CASE("tiny canonical model at full input size has the canonical feature layout") {
  const Model model(testing::tiny_config(5, 384, 128), 1);
  const Tensor4f images = testing::random_images(2, 384, 128, 2);
  CHECK(model.branch_map(images, "global").height() == 12);
  CHECK(model.branch_map(images, "global").width() == 4);
  CHECK(model.branch_map(images, "part2").height() == 24);
  CHECK(model.branch_map(images, "part3").width() == 8);
  const EmbeddingBundle b = model.infer(images);
  CHECK(b.reduced_count() == 8);
  CHECK(b.concatenated().rows() == 2);
  CHECK(b.concatenated().cols() == 2048);
  CHECK(model.feature_dim() == 2048);
  CHECK(b.reduced_feature_names() ==
        std::vector<std::string>{"f_g@global", "f_g@part2", "f_p1@part2", "f_p2@part2", "f_g@part3", "f_p1@part3",
                                 "f_p2@part3", "f_p3@part3"});
  CHECK_THROWS_AS(model.branch_map(images, "part7"), ConfigError);
}

TEST_CASE("config validation") {
  ModelConfig c = testing::tiny_config(4);
  CHECK_NOTHROW(validate(c));
  ModelConfig bad = c;
  bad.branches.clear();
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.branches.push_back(BranchConfig::part(4));  // 6-row map does not split into 4
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.branches[1].name = "global";
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.split_after = "res6_1";
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = c;
  bad.input_height = 100;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  CHECK(parse_split_landmark("res4_1", BackboneSpec::resnet50()).stage == 4);
  CHECK(parse_split_landmark("res4_1", BackboneSpec::resnet50()).blocks == 1);
  CHECK(parse_split_landmark("res3", BackboneSpec::resnet50()).blocks == 4);
}

TEST_CASE("stride-1 branches agree at initialization") {
  const Model model(testing::tiny_config(4), 7);
  const EmbeddingBundle b = model.infer(testing::random_images(3, 96, 32, 1));
  const Eigen::MatrixXf& p2 = b.feature("z_g@part2");
  const Eigen::MatrixXf& p3 = b.feature("z_g@part3");
  CHECK((p2 - p3).cwiseAbs().maxCoeff() == 0.0F);
  CHECK((p2 - b.feature("z_g@global")).cwiseAbs().maxCoeff() > 0.0F);
}

TEST_CASE("branch backbones are independent copies") {
  Model model(testing::tiny_config(4), 7);
  const Tensor4f images = testing::random_images(2, 96, 32, 3);
  const EmbeddingBundle before = model.infer(images);

  model.visit_parameters([](const std::string& name, Parameter& p) {
    if (name.rfind("branches.part3.res5.", 0) == 0 && p.kind == ParamKind::kWeight) p.value *= 1.5F;
  });
  const EmbeddingBundle after = model.infer(images);
  CHECK((after.feature("z_g@part2") - before.feature("z_g@part2")).cwiseAbs().maxCoeff() == 0.0F);
  CHECK((after.feature("z_g@global") - before.feature("z_g@global")).cwiseAbs().maxCoeff() == 0.0F);
  CHECK((after.feature("z_g@part3") - before.feature("z_g@part3")).cwiseAbs().maxCoeff() > 0.0F);

  // A loss on one branch only reaches that branch and the shared trunk.
  Model fresh(testing::tiny_config(4), 7);
  fresh.zero_grad();
  EmbeddingBundle out = fresh.forward(images, Mode::kTrain);
  EmbeddingBundle grad = EmbeddingBundle::zeros_like(out);
  grad.feature("f_g@part2").setOnes();
  fresh.backward(grad);
  fresh.visit_parameters([](const std::string& name, const Parameter& p) {
    const float g = p.grad.size() > 0 ? p.grad.cwiseAbs().maxCoeff() : 0.0F;
    if (name.rfind("branches.global.", 0) == 0 || name.rfind("branches.part3.", 0) == 0 ||
        name.rfind("heads.", 0) == 0) {
      CHECK_MESSAGE(g == 0.0F, name);
    }
  });
  float trunk = 0;
  fresh.visit_parameters([&](const std::string& name, const Parameter& p) {
    if (name.rfind("stem.", 0) == 0 && p.grad.size() > 0) trunk = std::max(trunk, p.grad.cwiseAbs().maxCoeff());
  });
  CHECK(trunk > 0.0F);
}

TEST_CASE("classifier heads exist per softmax target and do not share weights") {
  const Model model(testing::tiny_config(6), 1);
  CHECK(model.heads().size() == 8);
  CHECK(model.head("z_g@global").num_classes() == 6);
  CHECK(model.head("z_g@global").weight().cols() == 128);  // tiny stage-5 width
  CHECK(model.head("f_p1@part2").weight().cols() == 256);
  CHECK((model.head("f_p1@part2").weight() - model.head("f_p2@part2").weight()).cwiseAbs().maxCoeff() > 0.0F);
  const Eigen::VectorXf f = Eigen::VectorXf::Ones(256);
  CHECK(classifier_logits(model.head("f_p1@part2"), f).size() == 6);
  CHECK_THROWS_AS(classifier_logits(model.head("f_p1@part2"), Eigen::VectorXf::Ones(10)), ShapeError);
}

TEST_CASE("inference is batch independent and deterministic") {
  const Model model(testing::tiny_config(4), 2);
  const Tensor4f images = testing::random_images(4, 96, 32, 5);
  const Eigen::MatrixXf all = model.infer(images).concatenated();
  Tensor4f one(1, 3, 96, 32);
  std::copy(images.sample_data(3), images.sample_data(3) + images.sample_size(), one.data());
  const Eigen::MatrixXf single = model.infer(one).concatenated();
  CHECK((all.row(3) - single.row(0)).cwiseAbs().maxCoeff() == 0.0F);
  CHECK((model.infer(images).concatenated() - all).cwiseAbs().maxCoeff() == 0.0F);
  CHECK(all.minCoeff() >= 0.0F);  // reduced features end in a rectifier
}

TEST_CASE("model backward agrees with finite differences") {
  Model model(testing::tiny_config(3), 4);
  const Tensor4f images = testing::random_images(4, 96, 32, 6);
  const std::vector<int> labels{0, 0, 1, 1};
  LossConfig loss;

  auto total_loss = [&]() {
    EmbeddingBundle b = model.forward(images, Mode::kTrain);
    return route_losses(b, labels, model.heads(), model.config(), loss).total;
  };

  model.zero_grad();
  EmbeddingBundle b = model.forward(images, Mode::kTrain);
  LossGradients grads;
  route_losses(b, labels, model.heads(), model.config(), loss, &grads);
  for (const auto& [name, g] : grads.heads) model.head(name).weight_grad() += g;
  model.backward(grads.features);

  // Float32 through the whole network: compare the derivative along each probe
  // tensor's own gradient direction (which must equal its norm) and keep the best
  // of a few step sizes, since small steps drown in rounding and large ones in curvature.
  const std::set<std::string> probes{"stem.conv.weight", "res3.0.conv2.weight", "branches.global.res5.0.conv3.weight",
                                     "branches.part2.reduce_p1.conv.weight", "heads.z_g@part3.weight",
                                     "branches.part3.res4.1.bn2.weight"};
  std::map<std::string, Eigen::VectorXf> analytic;
  model.visit_parameters([&](const std::string& name, const Parameter& p) {
    if (probes.count(name)) analytic[name] = p.grad;
  });
  REQUIRE(analytic.size() == probes.size());

  for (const auto& [name, grad] : analytic) {
    Parameter* param = nullptr;
    model.visit_parameters([&](const std::string& pn, Parameter& p) {
      if (pn == name) param = &p;
    });
    const Eigen::VectorXf saved = param->value;
    const double norm = grad.cast<double>().norm();
    REQUIRE(norm > 0.0);
    const Eigen::VectorXf dir = (grad.cast<double>() / norm).cast<float>();
    double best = 1.0;
    for (const float t : {1e-2F, 3e-3F, 1e-3F, 3e-4F, 1e-4F}) {
      param->value = saved + t * dir;
      const double up = total_loss();
      param->value = saved - t * dir;
      const double down = total_loss();
      param->value = saved;
      best = std::min(best, std::abs((up - down) / (2.0 * t) - norm) / norm);
    }
    CHECK_MESSAGE(best < 2e-2, name << " best relative error " << best);
  }
}

TEST_CASE("backbone tensor names strip the branch prefix") {
  CHECK(backbone_tensor_name("branches.part2.res5.0.conv1.weight") == "res5.0.conv1.weight");
  CHECK(backbone_tensor_name("res4.0.bn1.bias") == "res4.0.bn1.bias");
  CHECK(backbone_tensor_name("stem.conv.weight") == "stem.conv.weight");
}

TEST_CASE("parameter names are unique and stable") {
  const Model model(testing::tiny_config(4), 0);
  std::set<std::string> names;
  std::size_t count = 0;
  model.visit_parameters([&](const std::string& name, const Parameter&) {
    names.insert(name);
    ++count;
  });
  CHECK(names.size() == count);
  CHECK(names.count("stem.conv.weight") == 1);
  CHECK(names.count("res4.0.downsample.conv.weight") == 1);
  CHECK(names.count("branches.part3.res5.0.downsample.bn.running_var") == 1);
  CHECK(names.count("branches.global.reduce_g.conv.weight") == 1);
  CHECK(names.count("heads.f_p3@part3.weight") == 1);
}

TEST_CASE("backward needs a matching training forward pass") {
  Model model(testing::tiny_config(4), 0);
  const Tensor4f images = testing::random_images(2, 96, 32, 1);
  const EmbeddingBundle eval = model.forward(images, Mode::kEval);
  CHECK_THROWS_AS(model.backward(EmbeddingBundle::zeros_like(eval)), InputError);
  model.forward(testing::random_images(3, 96, 32, 1), Mode::kTrain);
  CHECK_THROWS_AS(model.backward(EmbeddingBundle::zeros_like(eval)), ShapeError);
}
