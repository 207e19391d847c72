#include "mgn/infer.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "mgn/config.hpp"
#include "mgn/error.hpp"
#include "mgn/ops.hpp"

namespace fs = std::filesystem;

namespace mgn {

RowMatrixXf embed_flip_averaged(const Model& model, const Tensor4f& images) {
  const Eigen::MatrixXf plain = model.infer(images).concatenated();
  const Eigen::MatrixXf flipped = model.infer(hflip(images)).concatenated();
  return RowMatrixXf((plain + flipped) * 0.5F);
}

FeatureMatrix extract(const Model& model, const std::vector<ImageRecord>& records, const ExtractOptions& options) {
  if (options.batch_size < 1) throw ConfigError("extract: batch_size must be >= 1");
  FeatureMatrix out;
  out.records = records;
  out.config_hash = config_hash(model.config());
  out.features.resize(static_cast<Eigen::Index>(records.size()), model.feature_dim());
  {
    EmbeddingBundle probe;
    for (const auto& b : model.config().branches) {
      BranchEmbedding e;
      e.branch = b.name;
      if (b.num_parts > 1) e.parts.resize(static_cast<std::size_t>(b.num_parts));
      probe.branches.push_back(std::move(e));
    }
    out.feature_order = probe.reduced_feature_names();
  }
  for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(options.batch_size)) {
    const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(options.batch_size));
    std::vector<fs::path> paths;
    for (std::size_t i = start; i < end; ++i) paths.emplace_back(records[i].image_path);
    const Tensor4f images = load_image_batch(paths, options.height, options.width, options.normalization);
    out.features.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        embed_flip_averaged(model, images);
  }
  return out;
}

fs::path feature_prefix(const fs::path& path) {
  std::string s = path.string();
  for (const std::string suffix : {".feat.json", ".feat.bin"}) {
    if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return s.substr(0, s.size() - suffix.size());
    }
  }
  return path;
}

void save_features(const FeatureMatrix& features, const fs::path& prefix) {
  const fs::path bin = prefix.string() + ".feat.bin";
  const fs::path meta = prefix.string() + ".feat.json";
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  {
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + bin.string() + "'");
    out.write(reinterpret_cast<const char*>(features.features.data()),
              static_cast<std::streamsize>(features.features.size() * sizeof(float)));
    if (!out) throw DataError("failed writing '" + bin.string() + "'");
  }
  nlohmann::json j;
  j["format"] = "mgn-features";
  j["version"] = 1;
  j["rows"] = features.rows();
  j["dim"] = features.dim();
  j["dtype"] = "float32";
  j["config_hash"] = features.config_hash;
  j["feature_order"] = features.feature_order;
  j["records"] = nlohmann::json::array();
  for (const auto& r : features.records) {
    j["records"].push_back({{"path", r.image_path}, {"identity", r.identity}, {"camera", r.camera},
                            {"split", to_string(r.split)}});
  }
  std::ofstream out(meta, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + meta.string() + "'");
  out << j.dump(1) << '\n';
}

FeatureMatrix load_features(const fs::path& path) {
  const fs::path prefix = feature_prefix(path);
  const fs::path bin = prefix.string() + ".feat.bin";
  const fs::path meta = prefix.string() + ".feat.json";
  std::ifstream meta_in(meta);
  if (!meta_in) throw DataError("cannot open feature index '" + meta.string() + "'");
  FeatureMatrix out;
  Eigen::Index rows = 0;
  Eigen::Index dim = 0;
  try {
    nlohmann::json j;
    meta_in >> j;
    if (j.at("format").get<std::string>() != "mgn-features" || j.at("dtype").get<std::string>() != "float32") {
      throw DataError("'" + meta.string() + "' is not a float32 feature index");
    }
    rows = j.at("rows").get<Eigen::Index>();
    dim = j.at("dim").get<Eigen::Index>();
    out.config_hash = j.at("config_hash").get<std::string>();
    out.feature_order = j.at("feature_order").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
      const std::string split = r.at("split").get<std::string>();
      const Split s = split == "train" ? Split::kTrain : split == "query" ? Split::kQuery : Split::kGallery;
      out.records.push_back({r.at("path").get<std::string>(), r.at("identity").get<int>(), r.at("camera").get<int>(), s});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed feature index '" + meta.string() + "': " + e.what());
  }
  if (static_cast<Eigen::Index>(out.records.size()) != rows) {
    throw DataError("feature index '" + meta.string() + "' lists " + std::to_string(out.records.size()) +
                    " records for " + std::to_string(rows) + " rows");
  }
  out.features.resize(rows, dim);
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw DataError("cannot open feature file '" + bin.string() + "'");
  in.read(reinterpret_cast<char*>(out.features.data()), static_cast<std::streamsize>(out.features.size() * sizeof(float)));
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw DataError("feature file '" + bin.string() + "' does not hold " + std::to_string(rows) + "x" +
                    std::to_string(dim) + " float32 values");
  }
  return out;
}

ResponseMap response_map(const Model& model, const Tensor4f& image, const std::string& branch) {
  if (image.batch() < 1) throw InputError("response_map: empty image batch");
  const Tensor4f map = model.branch_map(image, branch);
  return {branch, channel_norm_map(map, 0)};
}

}  // namespace mgn
