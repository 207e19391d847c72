#ifndef MGN_TESTS_SUPPORT_HPP
#define MGN_TESTS_SUPPORT_HPP

#include <filesystem>
#include <random>
#include <string>

#include "mgn/data.hpp"
#include "mgn/eval.hpp"
#include "mgn/model.hpp"
#include "mgn/tensor.hpp"

namespace testing {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mgn_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline mgn::Tensor4f random_images(int n, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0F, 1.0F);
  mgn::Tensor4f t(n, 3, h, w);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

/// Tiny backbone at a reduced input size, canonical branch layout.
inline mgn::ModelConfig tiny_config(int num_classes, int height = 96, int width = 32) {
  mgn::ModelConfig c = mgn::ModelConfig::canonical(num_classes);
  c.backbone = mgn::BackboneDepth::kTiny;
  c.input_height = height;
  c.input_width = width;
  return c;
}

struct RetrievalCase {
  Eigen::MatrixXd dist;
  std::vector<mgn::RetrievalMeta> query;
  std::vector<mgn::RetrievalMeta> gallery;
};

/// Random retrieval problem with Q <= 20, G <= 100, three cameras and junk
/// entries; `quantize` produces many exact distance ties.
inline RetrievalCase random_retrieval_case(std::mt19937_64& rng, bool quantize) {
  std::uniform_int_distribution<int> qn(1, 20);
  std::uniform_int_distribution<int> gn(1, 100);
  std::uniform_int_distribution<int> ids(0, 6);
  std::uniform_int_distribution<int> cams(1, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RetrievalCase c;
  c.query.resize(static_cast<std::size_t>(qn(rng)));
  c.gallery.resize(static_cast<std::size_t>(gn(rng)));
  for (auto& m : c.query) m = {ids(rng) == 0 ? mgn::kJunkIdentity : ids(rng), cams(rng)};
  for (auto& m : c.gallery) m = {ids(rng) == 0 ? mgn::kJunkIdentity : ids(rng), cams(rng)};
  c.dist.resize(static_cast<Eigen::Index>(c.query.size()), static_cast<Eigen::Index>(c.gallery.size()));
  for (Eigen::Index i = 0; i < c.dist.size(); ++i) c.dist(i) = quantize ? std::floor(u(rng) * 8) : u(rng);
  return c;
}

}  // namespace testing

#endif  // MGN_TESTS_SUPPORT_HPP
