#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "floodseg/tensor.hpp"

namespace floodseg {

/// 8-bit image, rows top to bottom, channels interleaved (1 = gray, 3 = RGB).
struct Image8 {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image8&) const = default;
};

/// Decodes PNG or JPEG (detected from the file signature). Gray sources decode
/// to 1 channel, colour sources to 3; alpha is dropped. Throws IoError.
Image8 read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image8& image);
void write_png(const std::filesystem::path& path, const Image8& image);

/// [C,H,W] tensor with values in [0,1] -> 8-bit image (round to nearest).
Image8 to_image8(const Tensor& chw);
/// 8-bit image -> [C,H,W] tensor of raw 0..255 values.
Tensor to_tensor(const Image8& image);

}  // namespace floodseg
