#pragma once

// 8-bit PNG reading/writing through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sola/error.hpp"

namespace sola {

/// Interleaved 8-bit image (height x width x channels), channels 1 or 3.
struct ImageU8 {
  int height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const ImageU8&) const = default;
};

inline ImageU8 read_png(const std::string& path, int channels = 3) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw LoadError("cannot read PNG '" + path + "': " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 out(static_cast<int>(img.height), static_cast<int>(img.width), channels);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw LoadError("cannot decode PNG '" + path + "': " + img.message);
  }
  return out;
}

inline void write_png(const std::string& path, const ImageU8& image) {
  if (image.channels != 1 && image.channels != 3)
    throw ParameterError("write_png: unsupported channel count " + std::to_string(image.channels));
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw LoadError("cannot write PNG '" + path + "': " + img.message);
}

/// Maps values in [0, 1] to a grayscale image (values outside are clamped).
inline ImageU8 to_gray_u8(const std::vector<double>& values, int height, int width) {
  ImageU8 out(height, width, 1);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double v = values[i] < 0 ? 0 : (values[i] > 1 ? 1 : values[i]);
    out.pixels[i] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
  }
  return out;
}

}  // namespace sola
