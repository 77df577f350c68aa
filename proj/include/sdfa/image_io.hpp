#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sdfa {

/// 8-bit image as read from / written to PNG. Pixels are interleaved.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

/// Reads gray, gray+alpha, RGB or RGBA (alpha dropped); 16-bit is reduced to 8.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace sdfa
