#include "mgn/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mgn/error.hpp"

namespace fs = std::filesystem;

namespace mgn {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'G', 'N', 'T', 'E', 'N', 'S', '1'};

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const fs::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("truncated tensor archive '" + path.string() + "'");
  return value;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

void copy_into(const std::string& name, const NamedTensor& src, Parameter& dst) {
  if (src.shape != dst.shape) {
    throw ShapeError("tensor '" + name + "': archive shape " + shape_str(src.shape) + " vs model shape " +
                     shape_str(dst.shape));
  }
  dst.value = Eigen::Map<const Eigen::VectorXf>(src.data.data(), static_cast<Eigen::Index>(src.data.size()));
}

}  // namespace

const NamedTensor* TensorArchive::find(const std::string& name) const {
  auto it = tensors_.find(name);
  return it == tensors_.end() ? nullptr : &it->second;
}

void TensorArchive::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(out, tensors_.size());
  for (const auto& [name, t] : tensors_) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<std::int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

TensorArchive TensorArchive::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor archive '" + path.string() + "'");
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("'" + path.string() + "' is not a tensor archive");
  }
  TensorArchive archive;
  const auto count = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto ndim = read_pod<std::uint32_t>(in, path);
    NamedTensor t;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto extent = read_pod<std::int64_t>(in, path);
      if (extent < 0) throw DataError("negative extent in tensor '" + name + "'");
      t.shape.push_back(static_cast<int>(extent));
      numel *= static_cast<std::size_t>(extent);
    }
    t.data.resize(numel);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw DataError("truncated tensor '" + name + "' in '" + path.string() + "'");
    archive.tensors_.emplace(std::move(name), std::move(t));
  }
  return archive;
}

TensorArchive export_weights(const Model& model) {
  TensorArchive archive;
  model.visit_parameters([&](const std::string& name, const Parameter& p) {
    archive.put(name, NamedTensor{p.shape, std::vector<float>(p.value.data(), p.value.data() + p.value.size())});
  });
  return archive;
}

void import_weights(Model& model, const TensorArchive& archive) {
  model.visit_parameters([&](const std::string& name, Parameter& p) {
    const NamedTensor* t = archive.find(name);
    if (t == nullptr) throw DataError("weight archive is missing tensor '" + name + "'");
    copy_into(name, *t, p);
  });
}

std::string WeightMapping::apply(const std::string& archive_name) const {
  std::string name = archive_name;
  for (const auto& rule : prefix_rules) {
    if (name.compare(0, rule.from.size(), rule.from) == 0) {
      name = rule.to + name.substr(rule.from.size());
      break;
    }
  }
  for (const auto& rule : infix_rules) {
    if (rule.from.empty()) continue;
    for (auto pos = name.find(rule.from); pos != std::string::npos; pos = name.find(rule.from, pos + rule.to.size())) {
      name.replace(pos, rule.from.size(), rule.to);
    }
  }
  return name;
}

WeightMapping WeightMapping::load(const fs::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw ConfigError("cannot open weight mapping '" + json_path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("weight mapping '" + json_path.string() + "': " + e.what());
  }
  WeightMapping mapping;
  auto read_rules = [&](const char* key, std::vector<Rule>& out) {
    if (!j.contains(key)) return;
    for (const auto& r : j.at(key)) out.push_back({r.at("from").get<std::string>(), r.at("to").get<std::string>()});
  };
  try {
    for (const auto& [key, _] : j.items()) {
      if (key != "prefix_rules" && key != "infix_rules") throw ConfigError("weight mapping: unknown key '" + key + "'");
    }
    read_rules("prefix_rules", mapping.prefix_rules);
    read_rules("infix_rules", mapping.infix_rules);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("weight mapping '" + json_path.string() + "': " + e.what());
  }
  return mapping;
}

std::size_t load_pretrained(Model& model, const TensorArchive& archive, const WeightMapping& mapping) {
  std::map<std::string, const NamedTensor*> by_backbone_name;
  for (const auto& [name, t] : archive.tensors()) by_backbone_name[mapping.apply(name)] = &t;
  std::size_t loaded = 0;
  model.visit_parameters([&](const std::string& name, Parameter& p) {
    const std::string backbone = backbone_tensor_name(name);
    const bool is_backbone = backbone.rfind("stem.", 0) == 0 || backbone.rfind("res", 0) == 0;
    if (!is_backbone) return;
    auto it = by_backbone_name.find(backbone);
    if (it == by_backbone_name.end()) throw DataError("pretrained archive has no tensor for '" + backbone + "'");
    copy_into(name, *it->second, p);
    ++loaded;
  });
  return loaded;
}

}  // namespace mgn
