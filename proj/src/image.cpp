#include "mgn/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mgn/error.hpp"

namespace mgn {

namespace {

cv::Mat to_bgr_mat(const Image& image) {
  cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.rgb.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

Image from_bgr_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image image(rgb.rows, rgb.cols);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<std::uint8_t>(y);
    std::copy(row, row + static_cast<std::size_t>(rgb.cols) * 3,
              image.rgb.begin() + static_cast<std::ptrdiff_t>(y) * rgb.cols * 3);
  }
  return image;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot decode image '" + path.string() + "'");
  return from_bgr_mat(bgr);
}

void write_image(const std::filesystem::path& path, const Image& image) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), to_bgr_mat(image));
  } catch (const cv::Exception& e) {
    throw DataError("cannot write image '" + path.string() + "': " + e.what());
  }
  if (!ok) throw DataError("cannot write image '" + path.string() + "'");
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  cv::Mat src(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.rgb.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  Image out(height, width);
  for (int y = 0; y < height; ++y) {
    const auto* row = dst.ptr<std::uint8_t>(y);
    std::copy(row, row + static_cast<std::size_t>(width) * 3, out.rgb.begin() + static_cast<std::ptrdiff_t>(y) * width * 3);
  }
  return out;
}

void image_to_tensor(const Image& image, const Normalization& norm, Tensor4f& batch, int n) {
  if (batch.channels() != 3 || batch.height() != image.height || batch.width() != image.width) {
    throw ShapeError("image_to_tensor: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " does not fit batch " + batch.shape().str());
  }
  for (int c = 0; c < 3; ++c) {
    const float scale = 1.0F / (255.0F * norm.stddev[c]);
    const float shift = norm.mean[c] / norm.stddev[c];
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) batch(n, c, y, x) = static_cast<float>(image.at(y, x, c)) * scale - shift;
    }
  }
}

Tensor4f load_image_batch(const std::vector<std::filesystem::path>& paths, int height, int width,
                          const Normalization& norm) {
  Tensor4f batch(static_cast<int>(paths.size()), 3, height, width);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    image_to_tensor(resize_bilinear(read_image(paths[i]), height, width), norm, batch, static_cast<int>(i));
  }
  return batch;
}

Image render_heatmap(const Image& image, const RowMatrixXf& intensity, float alpha) {
  if (intensity.size() == 0) throw InputError("render_heatmap: empty intensity grid");
  const float lo = intensity.minCoeff();
  const float hi = intensity.maxCoeff();
  cv::Mat grid(static_cast<int>(intensity.rows()), static_cast<int>(intensity.cols()), CV_32F);
  for (int y = 0; y < grid.rows; ++y) {
    for (int x = 0; x < grid.cols; ++x) {
      grid.at<float>(y, x) = hi > lo ? (intensity(y, x) - lo) / (hi - lo) : 0.0F;
    }
  }
  cv::Mat up;
  cv::resize(grid, up, cv::Size(image.width, image.height), 0, 0, cv::INTER_LINEAR);
  cv::Mat gray;
  up.convertTo(gray, CV_8U, 255.0);
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_JET);
  cv::Mat blended;
  cv::addWeighted(to_bgr_mat(image), 1.0 - alpha, colored, alpha, 0.0, blended);
  return from_bgr_mat(blended);
}

}  // namespace mgn
