#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "mgn/data.hpp"
#include "mgn/error.hpp"

namespace fs = std::filesystem;

namespace mgn {

namespace {

using Rgb = std::array<float, 3>;

Rgb hsv_to_rgb(float h, float s, float v) {
  h = h - std::floor(h);
  const float c = v * s;
  const float hp = h * 6.0F;
  const float x = c * (1.0F - std::fabs(std::fmod(hp, 2.0F) - 1.0F));
  Rgb rgb{0, 0, 0};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const float m = v - c;
  return {(rgb[0] + m) * 255.0F, (rgb[1] + m) * 255.0F, (rgb[2] + m) * 255.0F};
}

struct Signature {
  Rgb upper;
  Rgb lower;
  int stripe_period;
  float stripe_contrast;
};

Signature signature_of(int index, int num_ids) {
  const float step = 1.0F / static_cast<float>(num_ids);
  Signature s;
  s.upper = hsv_to_rgb(step * static_cast<float>(index), 0.85F, 0.9F);
  // Lower garment hue walks the wheel with a stride coprime-ish to num_ids.
  s.lower = hsv_to_rgb(0.5F + step * static_cast<float>((index * 3 + 1) % num_ids), 0.6F, 0.35F + 0.1F * (index % 4));
  s.stripe_period = 6 + 4 * (index % 4);
  s.stripe_contrast = index % 2 == 0 ? 0.35F : 0.0F;
  return s;
}

std::uint8_t clamp_byte(float v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::string frame_name(int identity, int camera, int frame, bool four_digit_id) {
  char buf[64];
  if (four_digit_id) {
    std::snprintf(buf, sizeof(buf), "%04d_c%ds1_%06d_00.png", identity, camera, frame);
  } else {
    std::snprintf(buf, sizeof(buf), "%d_c%ds1_%06d_00.png", identity, camera, frame);
  }
  return buf;
}

std::uint64_t image_seed(std::uint64_t seed, int split, int identity, int frame) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ULL;
  h ^= static_cast<std::uint64_t>(split + 1) * 0xBF58476D1CE4E5B9ULL;
  h ^= static_cast<std::uint64_t>(identity + 7) * 0x94D049BB133111EBULL;
  h ^= static_cast<std::uint64_t>(frame + 13) * 0xD6E8FEB86659FD93ULL;
  return h;
}

}  // namespace

Image render_synthetic_person(int identity_index, int num_ids, int height, int width, std::mt19937_64& rng) {
  const Signature sig = signature_of(identity_index, num_ids);
  std::uniform_int_distribution<int> shift_y(-height / 24, height / 24);
  std::uniform_int_distribution<int> shift_x(-width / 16, width / 16);
  std::uniform_real_distribution<float> bg_level(60.0F, 200.0F);
  std::normal_distribution<float> noise(0.0F, 12.0F);
  const int dy = shift_y(rng);
  const int dx = shift_x(rng);
  const float bg = bg_level(rng);

  const int head_top = height * 4 / 100;
  const int torso_top = height * 18 / 100;
  const int legs_top = height * 52 / 100;
  const int feet_top = height * 94 / 100;
  const int body_left = width * 22 / 100;
  const int body_right = width * 78 / 100;
  const int head_left = width * 38 / 100;
  const int head_right = width * 62 / 100;
  const Rgb skin{205.0F, 170.0F, 140.0F};

  Image image(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int sy = y - dy;
      const int sx = x - dx;
      Rgb color{bg, bg, bg};
      if (sy >= head_top && sy < torso_top && sx >= head_left && sx < head_right) {
        color = skin;
      } else if (sy >= torso_top && sy < legs_top && sx >= body_left && sx < body_right) {
        const bool dark = ((sy - torso_top) / sig.stripe_period) % 2 == 1;
        const float f = dark ? 1.0F - sig.stripe_contrast : 1.0F;
        color = {sig.upper[0] * f, sig.upper[1] * f, sig.upper[2] * f};
      } else if (sy >= legs_top && sy < feet_top && sx >= body_left + width / 16 && sx < body_right - width / 16) {
        color = sig.lower;
      }
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = clamp_byte(color[c] + noise(rng));
    }
  }
  return image;
}

SyntheticSummary generate_synthetic(const SyntheticSpec& spec, const fs::path& root) {
  if (spec.num_ids < 2) throw InputError("generate_synthetic: num_ids must be >= 2");
  if (spec.images_per_id < 1) throw InputError("generate_synthetic: images_per_id must be >= 1");
  if (spec.cameras < 2 || spec.query_per_id + spec.gallery_per_id > spec.cameras * 8) {
    throw InputError("generate_synthetic: camera layout cannot host the requested query/gallery counts");
  }
  const fs::path train_dir = root / kSplitFolders[0];
  const fs::path query_dir = root / kSplitFolders[1];
  const fs::path gallery_dir = root / kSplitFolders[2];
  for (const auto& d : {train_dir, query_dir, gallery_dir}) {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw DataError("cannot create '" + d.string() + "': " + ec.message());
  }

  SyntheticSummary summary;
  for (int i = 0; i < spec.num_ids; ++i) {
    const int identity = i + 1;
    for (int f = 0; f < spec.images_per_id; ++f) {
      std::mt19937_64 rng(image_seed(spec.seed, 0, identity, f));
      const int camera = f % spec.cameras + 1;
      write_image(train_dir / frame_name(identity, camera, f, true),
                  render_synthetic_person(i, spec.num_ids, spec.height, spec.width, rng));
      ++summary.train;
    }
    for (int q = 0; q < spec.query_per_id; ++q) {
      std::mt19937_64 rng(image_seed(spec.seed, 1, identity, q));
      const int camera = q % spec.cameras + 1;
      write_image(query_dir / frame_name(identity, camera, q, true),
                  render_synthetic_person(i, spec.num_ids, spec.height, spec.width, rng));
      ++summary.query;
    }
    for (int g = 0; g < spec.gallery_per_id; ++g) {
      std::mt19937_64 rng(image_seed(spec.seed, 2, identity, g));
      const int camera = (spec.query_per_id + g) % spec.cameras + 1;
      write_image(gallery_dir / frame_name(identity, camera, g, true),
                  render_synthetic_person(i, spec.num_ids, spec.height, spec.width, rng));
      ++summary.gallery;
    }
  }
  for (int j = 0; j < spec.junk_images; ++j) {
    std::mt19937_64 rng(image_seed(spec.seed, 3, 0, j));
    const int camera = j % spec.cameras + 1;
    const bool minus_one = j % 2 == 0;
    const int style = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.num_ids));
    write_image(gallery_dir / frame_name(minus_one ? -1 : 0, camera, j, !minus_one),
                render_synthetic_person(style, spec.num_ids, spec.height, spec.width, rng));
    ++summary.gallery;
  }
  return summary;
}

}  // namespace mgn
