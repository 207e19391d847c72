#ifndef MGN_ARCHIVE_HPP
#define MGN_ARCHIVE_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mgn/model.hpp"

namespace mgn {

struct NamedTensor {
  std::vector<int> shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

/// Named float32 tensors in a flat little-endian file:
///   "MGNTENS1" | u64 count | count x (u32 name_len | name | u32 ndim | i64 dims[ndim] | f32 data[prod(dims)])
/// Entries are written in name order.
class TensorArchive {
 public:
  std::map<std::string, NamedTensor>& tensors() { return tensors_; }
  const std::map<std::string, NamedTensor>& tensors() const { return tensors_; }

  void put(const std::string& name, NamedTensor tensor) { tensors_[name] = std::move(tensor); }
  const NamedTensor* find(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, NamedTensor> tensors_;
};

/// All model parameters and buffers under their model names.
TensorArchive export_weights(const Model& model);

/// Loads every model parameter from the archive. Missing tensors raise DataError
/// and shape mismatches raise ShapeError, both naming the tensor.
void import_weights(Model& model, const TensorArchive& archive);

/// Rewrites external (e.g. torchvision) tensor names to backbone names: the first
/// matching prefix rule applies, then every infix rule.
struct WeightMapping {
  struct Rule {
    std::string from;
    std::string to;
  };
  std::vector<Rule> prefix_rules;
  std::vector<Rule> infix_rules;

  std::string apply(const std::string& archive_name) const;
  static WeightMapping load(const std::filesystem::path& json_path);
};

/// Initializes the trunk and every branch's backbone copy from a pretrained
/// archive. Reduction layers and classifier heads are left untouched. Returns the
/// number of model tensors written.
std::size_t load_pretrained(Model& model, const TensorArchive& archive, const WeightMapping& mapping);

}  // namespace mgn

#endif  // MGN_ARCHIVE_HPP
