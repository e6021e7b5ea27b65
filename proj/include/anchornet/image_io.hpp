#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "anchornet/rf.hpp"
#include "anchornet/tensor.hpp"

namespace anchornet {

/// 8-bit image stored planar (channel, row, column).
struct ImageU8 {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int c, int h, int w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::uint8_t& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  ImageSize size() const { return {height, width}; }
  bool operator==(const ImageU8&) const = default;
};

/// Binary PPM (P6, 3 channels) or PGM (P5, 1 channel) with maxval 255.
ImageU8 read_pnm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ImageU8& image);
void write_pgm(const std::filesystem::path& path, const ImageU8& image);

/// 1xCxHxW tensor with values byte / 255.
Tensor<float> to_tensor(const ImageU8& image);
/// Inverse of to_tensor with rounding and clamping to [0, 255].
ImageU8 from_tensor(const Tensor<float>& tensor);

ImageU8 crop(const ImageU8& image, const PatchBox& box);

/// Min-max normalized grayscale rendering of a row-major map, each cell
/// drawn as a `scale` x `scale` block.
ImageU8 heatmap(const std::vector<double>& values, int rows, int cols, int scale = 1);

/// Draws a one-pixel rectangle outline in place.
void draw_box(ImageU8& image, const PatchBox& box, std::uint8_t r, std::uint8_t g,
              std::uint8_t b);

}  // namespace anchornet
