#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace facecycle {

/// 8-bit interleaved pixels (HWC).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;
};

/// Decodes PNG or JPEG (detected from the file signature). Grey and alpha
/// inputs are expanded/stripped to the requested channel count (1 or 3).
Image read_image(const std::filesystem::path& path, int channels = 3);

/// Writes 1- or 3-channel PNG.
void write_png(const std::filesystem::path& path, const Image& image);

/// [C, H, W] float tensor in [0, 1].
torch::Tensor image_to_tensor(const Image& image);

/// [C, H, W] tensor in [0, 1] to 8-bit with rounding and clamping.
Image tensor_to_image(const torch::Tensor& chw);

bool is_image_file(const std::filesystem::path& path);

/// Minimal event log: lines go to stderr and, when set, to a file.
enum class LogLevel { Info, Warning, Error };
void log_event(LogLevel level, const std::string& message);
void set_event_log_file(const std::filesystem::path& path);
void close_event_log_file();
/// Quiets stderr output (file output is unaffected).
void set_event_log_quiet(bool quiet);

}  // namespace facecycle
