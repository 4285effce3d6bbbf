#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdlib>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "cloakbench/tensor.hpp"

namespace cloakbench {

/// RGB image, HWC layout, real-valued pixels nominally in [0,255].
struct Image {
  static constexpr std::size_t channels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w * channels, fill) {}

  std::size_t size() const { return pixels.size(); }
  bool empty() const { return pixels.empty(); }
  bool is_square() const { return height == width; }

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  Shape shape() const { return {height, width, channels}; }
  Tensor to_tensor() const { return Tensor(shape(), pixels); }

  friend bool operator==(const Image&, const Image&) = default;
};

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(what) + ": image shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) + " differ");
  }
}

inline double max_abs_diff(const Image& a, const Image& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a.pixels[i]) - double(b.pixels[i])));
  return m;
}

inline double mean_abs_diff(const Image& a, const Image& b) {
  require_same_shape(a, b, "mean_abs_diff");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += std::abs(double(a.pixels[i]) - double(b.pixels[i]));
  return s / double(a.size());
}

inline std::uint8_t to_u8(float v) {
  const double r = std::round(double(v));  // half away from zero
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.pixels.begin(), img.pixels.end(), out.begin(), to_u8);
  return out;
}

inline Image from_bytes(std::size_t h, std::size_t w, const std::uint8_t* data) {
  Image img(h, w);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = data[i];
  return img;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB, lossless)

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(img.width);
  info.height = static_cast<png_uint_32>(img.height);
  info.format = PNG_FORMAT_RGB;
  const auto bytes = to_bytes(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&info, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw CodecError(std::string("png encode: ") + info.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&info, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw CodecError(std::string("png encode: ") + info.message);
  }
  out.resize(size);
  return out;
}

inline Image decode_png(const std::vector<std::uint8_t>& data) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&info, data.data(), data.size())) {
    throw CodecError(std::string("png decode: ") + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(info));
  if (!png_image_finish_read(&info, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&info);
    throw CodecError(std::string("png decode: ") + info.message);
  }
  return from_bytes(info.height, info.width, buf.data());
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  write_file(path, bytes.data(), bytes.size());
}

inline Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

// ---------------------------------------------------------------------------
// Baseline JPEG through libjpeg. Errors longjmp out of the codec and are
// rethrown as CodecError once the codec state is released.

namespace detail {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline void jpeg_silent(j_common_ptr, int) {}

}  // namespace detail

/// Baseline JPEG, 4:2:0 chroma subsampling, integer DCT.
inline std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality) {
  if (quality < 1 || quality > 100) {
    throw std::invalid_argument("jpeg quality must be in [1,100], got " +
                                std::to_string(quality));
  }
  const auto bytes = to_bytes(img);
  jpeg_compress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  err.mgr.emit_message = detail::jpeg_silent;
  unsigned char* out = nullptr;
  unsigned long out_size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(out);
    throw CodecError(std::string("jpeg encode: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &out, &out_size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  cinfo.comp_info[0].h_samp_factor = 2;
  cinfo.comp_info[0].v_samp_factor = 2;
  for (int c = 1; c < 3; ++c) {
    cinfo.comp_info[c].h_samp_factor = 1;
    cinfo.comp_info[c].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = img.width * Image::channels;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(&bytes[cinfo.next_scanline * stride]);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<std::uint8_t> result(out, out + out_size);
  std::free(out);
  return result;
}

inline Image decode_jpeg(const std::vector<std::uint8_t>& data) {
  jpeg_decompress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  err.mgr.emit_message = detail::jpeg_silent;
  std::vector<std::uint8_t> buf;
  std::size_t h = 0, w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw CodecError(std::string("jpeg decode: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_decompress(&cinfo);
  h = cinfo.output_height;
  w = cinfo.output_width;
  buf.resize(h * w * Image::channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = &buf[cinfo.output_scanline * w * Image::channels];
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_bytes(h, w, buf.data());
}

}  // namespace cloakbench
