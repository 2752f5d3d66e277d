#include "facecycle/image_io.hpp"
#include "facecycle/core_types.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <csetjmp>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>

namespace facecycle {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open " + path.string());
  return f;
}

Image convert_channels(Image in, int channels) {
  if (in.channels == channels) return in;
  Image out{in.width, in.height, channels, {}};
  out.pixels.resize(static_cast<size_t>(in.width) * in.height * channels);
  for (size_t p = 0; p < static_cast<size_t>(in.width) * in.height; ++p) {
    const uint8_t* src = &in.pixels[p * in.channels];
    uint8_t* dst = &out.pixels[p * channels];
    if (channels == 1) {
      if (in.channels >= 3) {
        dst[0] = static_cast<uint8_t>(std::lround(0.299 * src[0] + 0.587 * src[1] + 0.114 * src[2]));
      } else {
        dst[0] = src[0];
      }
    } else {
      for (int c = 0; c < 3; ++c) dst[c] = in.channels >= 3 ? src[c] : src[0];
    }
  }
  return out;
}

Image read_png(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialisation failed");
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("cannot decode PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = &img.pixels[static_cast<size_t>(y) * img.width * img.channels];
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image read_jpeg(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  jpeg_start_decompress(&cinfo);
  Image img;
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.channels = cinfo.output_components;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * img.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = &img.pixels[static_cast<size_t>(cinfo.output_scanline) * img.width * img.channels];
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
std::ofstream& log_file() {
  static std::ofstream f;
  return f;
}
bool& log_quiet() {
  static bool q = false;
  return q;
}

}  // namespace

Image read_image(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw Error("read_image: channels must be 1 or 3");
  unsigned char sig[8] = {0};
  {
    auto f = open_file(path, "rb");
    if (std::fread(sig, 1, 8, f.get()) < 3) throw Error("cannot decode " + path.string() + ": file too short");
  }
  Image img;
  if (png_sig_cmp(sig, 0, 8) == 0) {
    img = read_png(path);
  } else if (sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) {
    img = read_jpeg(path);
  } else {
    throw Error("cannot decode " + path.string() + ": not PNG or JPEG");
  }
  return convert_channels(std::move(img), channels);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw Error("write_png: channels must be 1 or 3");
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw Error("libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("cannot write PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, image.width, image.height, 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    auto row = const_cast<png_bytep>(&image.pixels[static_cast<size_t>(y) * image.width * image.channels]);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor image_to_tensor(const Image& image) {
  auto t = torch::from_blob(const_cast<uint8_t*>(image.pixels.data()), {image.height, image.width, image.channels},
                            torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0).contiguous();
}

Image tensor_to_image(const torch::Tensor& chw) {
  auto t = chw.detach().to(torch::kCPU).to(torch::kFloat).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
  t = t.permute({1, 2, 0}).contiguous();
  Image img{static_cast<int>(t.size(1)), static_cast<int>(t.size(0)), static_cast<int>(t.size(2)), {}};
  img.pixels.assign(t.data_ptr<uint8_t>(), t.data_ptr<uint8_t>() + t.numel());
  return img;
}

bool is_image_file(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") return false;
  auto name = path.filename().string();
  return name.find(".mask.") == std::string::npos;
}

void log_event(LogLevel level, const std::string& message) {
  const char* tag = level == LogLevel::Info ? "INFO" : level == LogLevel::Warning ? "WARN" : "ERROR";
  std::lock_guard lock(log_mutex());
  if (!log_quiet() || level != LogLevel::Info) std::cerr << "[" << tag << "] " << message << "\n";
  if (log_file().is_open()) log_file() << "[" << tag << "] " << message << "\n" << std::flush;
}

void set_event_log_file(const std::filesystem::path& path) {
  std::lock_guard lock(log_mutex());
  if (log_file().is_open()) log_file().close();
  log_file().open(path, std::ios::out | std::ios::trunc);
}

void close_event_log_file() {
  std::lock_guard lock(log_mutex());
  if (log_file().is_open()) log_file().close();
}

void set_event_log_quiet(bool quiet) {
  std::lock_guard lock(log_mutex());
  log_quiet() = quiet;
}

}  // namespace facecycle
