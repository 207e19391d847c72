#include "mgn/data.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#include "mgn/error.hpp"
#include "mgn/ops.hpp"

namespace fs = std::filesystem;

namespace mgn {

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kQuery:
      return "query";
    case Split::kGallery:
      return "gallery";
  }
  return {};
}

int DatasetMeta::label_of(int identity) const {
  auto it = identity_to_index.find(identity);
  if (it == identity_to_index.end()) throw InputError("identity " + std::to_string(identity) + " is not a training class");
  return it->second;
}

std::vector<ImageRecord> Dataset::split(Split which) const {
  std::vector<ImageRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [which](const ImageRecord& r) { return r.split == which; });
  return out;
}

std::vector<ImageRecord> Dataset::trainable() const {
  std::vector<ImageRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [](const ImageRecord& r) { return r.split == Split::kTrain && !r.is_junk(); });
  return out;
}

std::optional<ParsedFilename> parse_market_filename(const std::string& filename) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+).*$)");
  std::smatch m;
  if (!std::regex_match(filename, m, pattern)) return std::nullopt;
  ParsedFilename parsed;
  const std::string id = m[1].str();
  const std::string cam = m[2].str();
  int raw = 0;
  if (std::from_chars(id.data(), id.data() + id.size(), raw).ec != std::errc()) return std::nullopt;
  if (std::from_chars(cam.data(), cam.data() + cam.size(), parsed.camera).ec != std::errc()) return std::nullopt;
  if (raw < -1) return std::nullopt;
  parsed.identity = raw <= 0 ? kJunkIdentity : raw;
  return parsed;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

}  // namespace

Dataset load_market_layout(const fs::path& root) {
  if (!fs::is_directory(root)) throw ConfigError("dataset root '" + root.string() + "' is not a directory");
  Dataset dataset;
  std::vector<std::string> bad;
  const std::array<Split, 3> splits{Split::kTrain, Split::kQuery, Split::kGallery};
  for (std::size_t s = 0; s < splits.size(); ++s) {
    const fs::path folder = root / kSplitFolders[s];
    if (!fs::is_directory(folder)) {
      throw ConfigError("dataset root '" + root.string() + "' is missing subfolder '" + kSplitFolders[s] + "'");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(folder)) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const auto parsed = parse_market_filename(file.filename().string());
      if (!parsed) {
        bad.push_back(file.string());
        continue;
      }
      dataset.records.push_back({file.string(), parsed->identity, parsed->camera, splits[s]});
      ++dataset.meta.split_counts[s];
    }
  }
  if (!bad.empty()) {
    std::string msg = "unparsable image filenames (expected <id>_c<cam>...):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw DataError(msg);
  }
  std::set<int> train_ids;
  for (const auto& r : dataset.records) {
    if (r.split == Split::kTrain && !r.is_junk()) train_ids.insert(r.identity);
  }
  int index = 0;
  for (int id : train_ids) dataset.meta.identity_to_index[id] = index++;
  dataset.meta.num_identities = index;
  return dataset;
}

void flip_sample(Tensor4f& images, int n) {
  const int w = images.width();
  for (int c = 0; c < images.channels(); ++c) {
    for (int y = 0; y < images.height(); ++y) {
      float* row = images.sample_data(n) + (static_cast<std::size_t>(c) * images.height() + y) * w;
      std::reverse(row, row + w);
    }
  }
}

bool augment_train(Tensor4f& images, int n, std::mt19937_64& rng, double flip_probability) {
  std::bernoulli_distribution coin(flip_probability);
  const bool flip = coin(rng);
  if (flip) flip_sample(images, n);
  return flip;
}

// --- PkSampler -------------------------------------------------------------

PkSampler::PkSampler(const std::vector<ImageRecord>& records, const DatasetMeta& meta, SamplerConfig config)
    : config_(config), rng_(config.seed) {
  if (config_.p < 2 || config_.k < 2) throw ConfigError("sampler: P and K must both be >= 2");
  by_label_.resize(static_cast<std::size_t>(meta.num_identities));
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].is_junk()) continue;
    by_label_[static_cast<std::size_t>(meta.label_of(records[i].identity))].push_back(i);
  }
  std::erase_if(by_label_, [](const auto& v) { return v.empty(); });
  if (by_label_.empty()) throw ConfigError("sampler: training split has no trainable images");
  if (static_cast<int>(by_label_.size()) < config_.p) {
    throw ConfigError("sampler: dataset has " + std::to_string(by_label_.size()) + " identities, fewer than P=" +
                      std::to_string(config_.p));
  }
  // Labels are dense, so by_label_ index equals label once empty classes are ruled out.
  if (static_cast<int>(by_label_.size()) != meta.num_identities) {
    throw ConfigError("sampler: some training identities have no images");
  }
  position_ = 0;
  order_.clear();
}

int PkSampler::batches_per_epoch() const {
  const int c = static_cast<int>(by_label_.size());
  return (c + config_.p - 1) / config_.p;
}

void PkSampler::start_epoch() {
  order_.resize(by_label_.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
  position_ = 0;
  ++epoch_;
}

BatchIndices PkSampler::next() {
  if (position_ >= order_.size()) start_epoch();
  const std::size_t p = static_cast<std::size_t>(config_.p);
  const std::size_t end = std::min(order_.size(), position_ + p);
  std::vector<int> chosen(order_.begin() + static_cast<std::ptrdiff_t>(position_),
                          order_.begin() + static_cast<std::ptrdiff_t>(end));
  position_ = end;
  if (chosen.size() < p) {
    std::vector<int> rest;
    for (int label = 0; label < static_cast<int>(by_label_.size()); ++label) {
      if (std::find(chosen.begin(), chosen.end(), label) == chosen.end()) rest.push_back(label);
    }
    std::shuffle(rest.begin(), rest.end(), rng_);
    chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(p - chosen.size()));
  }

  BatchIndices batch;
  const std::size_t k = static_cast<std::size_t>(config_.k);
  for (int label : chosen) {
    auto pool = by_label_[static_cast<std::size_t>(label)];
    if (pool.size() >= k) {
      for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng_)]);
        batch.records.push_back(pool[i]);
        batch.labels.push_back(label);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (std::size_t i = 0; i < k; ++i) {
        batch.records.push_back(pool[pick(rng_)]);
        batch.labels.push_back(label);
      }
    }
  }
  return batch;
}

std::string PkSampler::state() const {
  std::ostringstream out;
  out << epoch_ << ' ' << position_ << ' ' << order_.size();
  for (int label : order_) out << ' ' << label;
  out << ' ' << rng_;
  return out.str();
}

void PkSampler::restore(const std::string& state) {
  std::istringstream in(state);
  std::size_t count = 0;
  in >> epoch_ >> position_ >> count;
  order_.assign(count, 0);
  for (auto& label : order_) in >> label;
  in >> rng_;
  if (!in) throw DataError("sampler: corrupt state string");
}

Batch assemble_batch(const std::vector<ImageRecord>& records, const DatasetMeta& meta, const BatchIndices& indices,
                     const LoaderConfig& loader, std::mt19937_64& rng) {
  std::vector<fs::path> paths;
  Batch batch;
  for (std::size_t i : indices.records) {
    const ImageRecord& r = records.at(i);
    if (r.is_junk()) throw InputError("junk record '" + r.image_path + "' cannot enter a training batch");
    paths.emplace_back(r.image_path);
    batch.labels.push_back(meta.label_of(r.identity));
    batch.identities.push_back(r.identity);
    batch.cameras.push_back(r.camera);
  }
  batch.images = load_image_batch(paths, loader.height, loader.width, loader.normalization);
  for (int n = 0; n < batch.images.batch(); ++n) augment_train(batch.images, n, rng, loader.flip_probability);
  return batch;
}

}  // namespace mgn
