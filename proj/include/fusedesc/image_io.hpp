#pragma once

// Grayscale image reading/writing for patch mosaics. BMP is handled natively;
// PNG support is compiled in when FUSEDESC_WITH_PNG is defined (links libpng).

#include <cstdint>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "fusedesc/binary_io.hpp"
#include "fusedesc/errors.hpp"

#ifdef FUSEDESC_WITH_PNG
#include <png.h>
#endif

namespace fusedesc {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, top row first
  bool was_color = false;

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

// Uncompressed 8-bit paletted, 24-bit or 32-bit BMP. Color inputs keep their
// first stored channel.
inline GrayImage decode_bmp(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_magic("BM");
  r.u32("file size");
  r.u32("reserved");
  const std::uint32_t data_offset = r.u32("data offset");
  const auto header_at = r.offset();
  const std::uint32_t header_size = r.u32("header size");
  if (header_size < 40) throw FormatError("unsupported BMP header", header_at);
  const auto width = static_cast<std::int32_t>(r.u32("width"));
  const auto height = static_cast<std::int32_t>(r.u32("height"));
  r.u16("planes");
  const auto bpp_at = r.offset();
  const std::uint16_t bpp = r.u16("bit depth");
  const auto comp_at = r.offset();
  const std::uint32_t compression = r.u32("compression");
  r.u32("image size");
  r.u32("x resolution");
  r.u32("y resolution");
  std::uint32_t colors = r.u32("palette size");
  r.u32("important colors");
  if (compression != 0 && !(compression == 3 && bpp == 32)) {
    throw FormatError("compressed BMP not supported", comp_at);
  }
  if (bpp != 8 && bpp != 24 && bpp != 32) {
    throw FormatError("unsupported BMP bit depth " + std::to_string(bpp), bpp_at);
  }
  if (width <= 0 || height == 0) throw FormatError("bad BMP dimensions", header_at);

  GrayImage img;
  img.width = static_cast<std::size_t>(width);
  img.height = static_cast<std::size_t>(height < 0 ? -height : height);
  const bool bottom_up = height > 0;

  auto skip_to = [&r](std::uint64_t target, const char* what) {
    if (target < r.offset()) throw FormatError(std::string("bad BMP ") + what, r.offset());
    std::vector<std::uint8_t> pad(target - r.offset());
    r.raw(pad.data(), pad.size(), what);
  };
  skip_to(14 + std::uint64_t{header_size}, "header length");

  std::vector<std::uint8_t> palette;
  if (bpp == 8) {
    if (colors == 0 || colors > 256) colors = 256;
    std::vector<std::uint8_t> raw(colors * 4);
    r.raw(raw.data(), raw.size(), "palette");
    palette.resize(colors);
    for (std::uint32_t i = 0; i < colors; ++i) {
      const std::uint8_t b = raw[i * 4], g = raw[i * 4 + 1], rr = raw[i * 4 + 2];
      palette[i] = b;  // first stored channel
      if (b != g || g != rr) img.was_color = true;
    }
  } else {
    img.was_color = true;
  }

  const std::size_t bytes_pp = bpp / 8;
  const std::size_t stride = (img.width * bytes_pp + 3) & ~std::size_t{3};
  skip_to(data_offset, "data offset");
  std::vector<std::uint8_t> row(stride);
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    r.raw(row.data(), stride, "pixel rows");
    const std::size_t dst_y = bottom_up ? img.height - 1 - y : y;
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint8_t v = row[x * bytes_pp];
      if (bpp == 8) {
        if (v >= palette.size()) throw FormatError("palette index out of range", r.offset());
        img.pixels[dst_y * img.width + x] = palette[v];
      } else {
        img.pixels[dst_y * img.width + x] = v;
      }
    }
  }
  return img;
}

// 8-bit grayscale-palette BMP, bottom-up rows.
inline std::vector<std::uint8_t> encode_bmp(const GrayImage& img) {
  const std::size_t stride = (img.width + 3) & ~std::size_t{3};
  const std::uint32_t data_offset = 14 + 40 + 256 * 4;
  io::ByteWriter w;
  w.magic("BM");
  w.u32(static_cast<std::uint32_t>(data_offset + stride * img.height));
  w.u32(0);
  w.u32(data_offset);
  w.u32(40);
  w.u32(static_cast<std::uint32_t>(img.width));
  w.u32(static_cast<std::uint32_t>(img.height));
  w.u16(1);
  w.u16(8);
  w.u32(0);
  w.u32(static_cast<std::uint32_t>(stride * img.height));
  w.u32(2835);
  w.u32(2835);
  w.u32(256);
  w.u32(0);
  for (std::uint32_t i = 0; i < 256; ++i) {
    const auto v = static_cast<std::uint8_t>(i);
    w.u8(v);
    w.u8(v);
    w.u8(v);
    w.u8(0);
  }
  std::vector<std::uint8_t> row(stride, 0);
  for (std::size_t y = img.height; y-- > 0;) {
    std::copy_n(img.pixels.begin() + y * img.width, img.width, row.begin());
    w.raw(row.data(), row.size());
  }
  return w.bytes();
}

#ifdef FUSEDESC_WITH_PNG
inline GrayImage decode_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw FormatError(path.string() + ": " + image.message, 0);
  }
  GrayImage img;
  img.was_color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  // Keep the first channel of color images rather than mixing luminance.
  image.format = img.was_color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t channels = img.was_color ? 3 : 1;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    throw FormatError(path.string() + ": " + image.message, 0);
  }
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = buffer[i * channels];
  return img;
}

inline void write_png(const GrayImage& img, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0,
                               nullptr)) {
    throw Error("cannot write " + path.string() + ": " + image.message);
  }
}
#endif

inline GrayImage load_gray_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  GrayImage img;
  if (ext == ".bmp") {
    try {
      img = decode_bmp(io::read_file(path));
    } catch (const FormatError& e) {
      throw FormatError(path.filename().string() + ": " + e.what(), e.offset());
    }
  } else if (ext == ".png") {
#ifdef FUSEDESC_WITH_PNG
    img = decode_png(path);
#else
    throw FormatError(path.string() + ": PNG support not compiled in", 0);
#endif
  } else {
    throw FormatError(path.string() + ": unsupported image type", 0);
  }
  if (img.was_color) {
    std::cerr << "warning: " << path.string()
              << " is not grayscale; using its first channel\n";
  }
  return img;
}

inline void save_bmp(const GrayImage& img, const std::filesystem::path& path) {
  io::write_file(path, encode_bmp(img));
}

}  // namespace fusedesc
