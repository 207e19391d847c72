#ifndef MGN_IMAGE_HPP
#define MGN_IMAGE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mgn/tensor.hpp"

namespace mgn {

/// 8-bit interleaved RGB image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Per-channel normalization applied after scaling pixels to [0, 1] (RGB order).
struct Normalization {
  std::array<float, 3> mean{0.485F, 0.456F, 0.406F};
  std::array<float, 3> stddev{0.229F, 0.224F, 0.225F};

  bool operator==(const Normalization&) const = default;
};

/// Decodes any format OpenCV understands. Throws DataError on failure.
Image read_image(const std::filesystem::path& path);
/// Encodes by extension (.png is lossless). Throws DataError on failure.
void write_image(const std::filesystem::path& path, const Image& image);

Image resize_bilinear(const Image& image, int height, int width);

/// Writes one normalized [3, H, W] sample into slot `n` of `batch`.
void image_to_tensor(const Image& image, const Normalization& norm, Tensor4f& batch, int n);

/// Reads, resizes (bilinear) and normalizes a list of files into [N, 3, H, W].
Tensor4f load_image_batch(const std::vector<std::filesystem::path>& paths, int height, int width,
                          const Normalization& norm);

/// Blends a non-negative intensity grid (any resolution) over `image` with a
/// jet colormap after bilinear upsampling. A constant grid renders uniformly.
Image render_heatmap(const Image& image, const RowMatrixXf& intensity, float alpha = 0.5F);

}  // namespace mgn

#endif  // MGN_IMAGE_HPP
