#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "srm/serialize.hpp"
#include "srm/tensor.hpp"

namespace srm {

/// Reads an 8-bit PNG as RGB [3, H, W] in [0, 1].
inline Tensor read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw IoError(path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError(path.string() + ": " + img.message);
  }
  const std::size_t H = img.height, W = img.width;
  std::vector<double> v(3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) v[(c * H + y) * W + x] = buf[(y * W + x) * 3 + c] / 255.0;
  return Tensor({3, H, W}, std::move(v));
}

/// Writes [3, H, W] values (clamped to [0, 1], rounded to 8 bits) as PNG.
inline void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_png: expected [3, H, W]");
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::vector<png_byte> buf(3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        buf[(y * W + x) * 3 + c] =
            static_cast<png_byte>(std::lround(std::clamp(image[(c * H + y) * W + x], 0.0, 1.0) * 255.0));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(W);
  img.height = static_cast<png_uint_32>(H);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError(path.string() + ": " + img.message);
}

inline std::string frame_name(std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06zu.png", index);
  return name;
}

/// Reads dir/000000.png, 000001.png, ... into [N, 3, H, W].
inline Tensor read_frame_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) throw IoError(dir.string() + ": not a directory");
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError(dir.string() + ": no PNG frames");
  std::vector<Tensor> frames;
  for (const auto& f : files) frames.push_back(read_png(f));
  const Shape s = frames[0].shape();
  std::vector<double> v;
  v.reserve(frames.size() * frames[0].numel());
  for (const auto& f : frames) {
    if (f.shape() != s) throw IoError(dir.string() + ": frames differ in size");
    v.insert(v.end(), f.values().begin(), f.values().end());
  }
  return Tensor({frames.size(), s[0], s[1], s[2]}, std::move(v));
}

inline void write_frame_dir(const std::filesystem::path& dir, const Tensor& frames) {
  std::filesystem::create_directories(dir);
  const std::size_t n = frames.dim(0);
  for (std::size_t i = 0; i < n; ++i) write_png(dir / frame_name(i), reshape(slice(frames, 0, i, 1), {3, frames.dim(2), frames.dim(3)}));
}

}  // namespace srm
