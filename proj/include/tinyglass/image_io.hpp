// SPDX-License-Identifier: Apache-2.0
//
// Image decoding and encoding: PNG through libpng's simplified API, plus
// binary PGM (P5) and PPM (P6). Pixel values map to [0,1].
#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

namespace fs = std::filesystem;

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;  // channels is 1 or 3
  std::vector<std::uint8_t> pixels;                  // interleaved, row-major
};

namespace detail {

inline std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

inline Image8 read_png(const fs::path& path, std::size_t channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out{img.width, img.height, channels, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const fs::path& path, const Image8& im) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

// Netpbm header token, skipping whitespace and comments.
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

inline Image8 read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string magic = pnm_token(in);
  if (magic != "P5" && magic != "P6") throw IoError("not a binary PGM/PPM: " + path.string());
  Image8 im;
  try {
    im.width = std::stoul(pnm_token(in));
    im.height = std::stoul(pnm_token(in));
    const unsigned long maxval = std::stoul(pnm_token(in));
    if (maxval != 255) throw IoError("only maxval 255 is supported: " + path.string());
  } catch (const std::logic_error&) {
    throw IoError("malformed netpbm header: " + path.string());
  }
  im.channels = magic == "P5" ? 1 : 3;
  im.pixels.resize(im.width * im.height * im.channels);
  in.read(reinterpret_cast<char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(im.pixels.size())) {
    throw IoError("truncated netpbm payload: " + path.string());
  }
  return im;
}

inline void write_pnm(const fs::path& path, const Image8& im) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (im.channels == 1 ? "P5" : "P6") << "\n" << im.width << " " << im.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Image8 read_any(const fs::path& path, std::size_t channels) {
  const std::string e = lower_ext(path);
  if (e == ".png") return read_png(path, channels);
  if (e == ".pgm" || e == ".ppm" || e == ".pnm") return read_pnm(path);
  throw IoError("unsupported image format: " + path.string());
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline bool is_image_file(const fs::path& p) {
  const std::string e = detail::lower_ext(p);
  return e == ".png" || e == ".pgm" || e == ".ppm" || e == ".pnm";
}

/// RGB image as (1,3,H,W); grayscale files are replicated across channels.
inline Tensor4 read_image(const fs::path& path) {
  const Image8 im = detail::read_any(path, 3);
  Tensor4 t(Shape4{1, 3, im.height, im.width});
  const std::size_t plane = im.width * im.height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t v = im.channels == 1 ? im.pixels[i] : im.pixels[i * 3 + c];
      t[c * plane + i] = static_cast<double>(v) / 255.0;
    }
  }
  return t;
}

/// Binary mask as (1,1,H,W); any nonzero pixel is foreground.
inline Tensor4 read_mask(const fs::path& path) {
  const Image8 im = detail::read_any(path, 1);
  Tensor4 t(Shape4{1, 1, im.height, im.width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::size_t any = 0;
    for (std::size_t c = 0; c < im.channels; ++c) any |= im.pixels[i * im.channels + c];
    t[i] = any ? 1.0 : 0.0;
  }
  return t;
}

/// Writes a (1,1,H,W) or (1,3,H,W) tensor in [0,1]; format from extension.
inline void write_image(const fs::path& path, const Tensor4& t) {
  detail::require(t.n() == 1 && (t.c() == 1 || t.c() == 3), "write_image expects (1,1|3,H,W), got " + t.shape().str());
  Image8 im{t.w(), t.h(), t.c(), std::vector<std::uint8_t>(t.size())};
  const std::size_t plane = t.h() * t.w();
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < t.c(); ++c) im.pixels[i * t.c() + c] = detail::to_byte(t[c * plane + i]);
  const std::string e = detail::lower_ext(path);
  if (e == ".png") {
    detail::write_png(path, im);
  } else if (e == ".pgm" || e == ".ppm" || e == ".pnm") {
    detail::require((e == ".pgm") == (t.c() == 1) || e == ".pnm", "netpbm extension does not match channel count");
    detail::write_pnm(path, im);
  } else {
    throw IoError("unsupported image format: " + path.string());
  }
}

}  // namespace tinyglass
