#ifndef MGN_INFER_HPP
#define MGN_INFER_HPP

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

#include "mgn/data.hpp"
#include "mgn/model.hpp"

namespace mgn {

/// Retrieval features of a list of images. Row i belongs to records[i].
struct FeatureMatrix {
  RowMatrixXf features;
  std::vector<ImageRecord> records;
  std::vector<std::string> feature_order;
  std::string config_hash;

  Eigen::Index rows() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

struct ExtractOptions {
  int height = 384;
  int width = 128;
  Normalization normalization;
  int batch_size = 32;
};

/// Embeds a normalized image batch: rows are (f(x) + f(flip(x))) / 2 with f the
/// concatenation of all reduced features in persisted order.
RowMatrixXf embed_flip_averaged(const Model& model, const Tensor4f& images);

/// Loads, embeds and stacks every record. An empty record list yields a 0 x D matrix.
FeatureMatrix extract(const Model& model, const std::vector<ImageRecord>& records, const ExtractOptions& options);

/// Writes `<prefix>.feat.bin` (row-major little-endian float32) and `<prefix>.feat.json`.
void save_features(const FeatureMatrix& features, const std::filesystem::path& prefix);
FeatureMatrix load_features(const std::filesystem::path& prefix);

/// Resolves "out/query" or "out/query.feat.json" to the common prefix "out/query".
std::filesystem::path feature_prefix(const std::filesystem::path& path);

struct ResponseMap {
  std::string branch;
  RowMatrixXf intensity;  // [Hm x Wm], L2 norm of the feature vector at each location
};

/// Response map of sample 0 of `image` ([1, 3, H, W], normalized).
ResponseMap response_map(const Model& model, const Tensor4f& image, const std::string& branch);

}  // namespace mgn

#endif  // MGN_INFER_HPP
