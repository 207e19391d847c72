#ifndef MGN_DATA_HPP
#define MGN_DATA_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mgn/image.hpp"
#include "mgn/tensor.hpp"

namespace mgn {

enum class Split { kTrain, kQuery, kGallery };

std::string to_string(Split split);

/// Identity of distractor/ignored images (filename ids -1 and 0000).
inline constexpr int kJunkIdentity = -1;

struct ImageRecord {
  std::string image_path;
  int identity = kJunkIdentity;
  int camera = 0;
  Split split = Split::kTrain;

  bool is_junk() const { return identity == kJunkIdentity; }
  bool operator==(const ImageRecord&) const = default;
};

struct DatasetMeta {
  int num_identities = 0;
  /// Raw training identity -> dense class index 0..C-1 (ascending raw id order).
  std::map<int, int> identity_to_index;
  std::array<std::size_t, 3> split_counts{0, 0, 0};

  /// Dense label of a raw identity; throws InputError for unknown identities.
  int label_of(int identity) const;
  std::size_t count(Split split) const { return split_counts[static_cast<std::size_t>(split)]; }
};

struct Dataset {
  std::vector<ImageRecord> records;
  DatasetMeta meta;

  std::vector<ImageRecord> split(Split which) const;
  /// Training records that carry a trainable identity.
  std::vector<ImageRecord> trainable() const;
};

struct ParsedFilename {
  int identity = kJunkIdentity;
  int camera = 0;
};

/// Parses "<id>_c<cam>..." (e.g. "0002_c1s1_000451_03.jpg", "-1_c3s2_0001.jpg").
std::optional<ParsedFilename> parse_market_filename(const std::string& filename);

/// Subfolder names of the Market-style layout.
inline constexpr std::array<const char*, 3> kSplitFolders{"bounding_box_train", "query", "bounding_box_test"};

/// Reads a Market-1501 style directory. Missing subfolders raise ConfigError;
/// image files whose names do not follow the convention raise DataError listing them.
Dataset load_market_layout(const std::filesystem::path& root);

struct SyntheticSpec {
  int num_ids = 8;
  int images_per_id = 16;
  int height = 384;
  int width = 128;
  std::uint64_t seed = 1;
  int query_per_id = 2;
  int gallery_per_id = 4;
  int junk_images = 4;
  int cameras = 6;
};

struct SyntheticSummary {
  std::size_t train = 0;
  std::size_t query = 0;
  std::size_t gallery = 0;
};

/// Writes a deterministic Market-style dataset: every identity has its own garment
/// colors and stripe texture, every image adds noise, a random background and a
/// random translation. Query and gallery images are fresh renders of the same
/// identities on disjoint cameras, and the gallery also holds junk images.
SyntheticSummary generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root);

/// Renders a single image of identity `identity_index` (0-based) from `rng`.
Image render_synthetic_person(int identity_index, int num_ids, int height, int width, std::mt19937_64& rng);

/// Mirrors sample `n` of `images` left-right in place.
void flip_sample(Tensor4f& images, int n);

/// Random horizontal flip of sample `n` with the given probability; returns
/// whether the sample was flipped.
bool augment_train(Tensor4f& images, int n, std::mt19937_64& rng, double flip_probability = 0.5);

struct SamplerConfig {
  int p = 16;
  int k = 4;
  std::uint64_t seed = 0;

  bool operator==(const SamplerConfig&) const = default;
};

/// Record indices (into the sampler's record list) and dense labels of one PK batch.
struct BatchIndices {
  std::vector<std::size_t> records;
  std::vector<int> labels;
};

struct Batch {
  Tensor4f images;
  std::vector<int> labels;
  std::vector<int> identities;
  std::vector<int> cameras;
};

/// Identity-balanced sampler: P identities, K images each. Identities are drawn
/// without replacement within an epoch of ceil(C / P) batches; the final batch of
/// an epoch is topped up with other identities. Identities with fewer than K
/// images are sampled with replacement.
class PkSampler {
 public:
  PkSampler(const std::vector<ImageRecord>& records, const DatasetMeta& meta, SamplerConfig config);

  BatchIndices next();
  int batches_per_epoch() const;
  int epoch() const { return epoch_; }

  /// Serialized RNG and epoch position, for checkpoints.
  std::string state() const;
  void restore(const std::string& state);

 private:
  void start_epoch();

  SamplerConfig config_;
  std::vector<std::vector<std::size_t>> by_label_;
  std::vector<int> order_;
  std::size_t position_ = 0;
  int epoch_ = 0;
  std::mt19937_64 rng_;
};

struct LoaderConfig {
  int height = 384;
  int width = 128;
  Normalization normalization;
  double flip_probability = 0.5;

  bool operator==(const LoaderConfig&) const = default;
};

/// Loads the images of a sampled batch, applying independent per-sample flips.
Batch assemble_batch(const std::vector<ImageRecord>& records, const DatasetMeta& meta, const BatchIndices& indices,
                     const LoaderConfig& loader, std::mt19937_64& rng);

}  // namespace mgn

#endif  // MGN_DATA_HPP
