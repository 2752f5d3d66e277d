#include "facecycle/core_types.hpp"

#include <ATen/autocast_mode.h>

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace facecycle {

std::string_view to_string(Domain d) { return d == Domain::X ? "X" : "Y"; }

std::string_view to_string(Direction d) { return d == Direction::XtoY ? "X2Y" : "Y2X"; }

Direction parse_direction(std::string_view text) {
  if (text == "X2Y" || text == "x2y" || text == "X->Y") return Direction::XtoY;
  if (text == "Y2X" || text == "y2x" || text == "Y->X") return Direction::YtoX;
  throw ConfigError("unknown direction '" + std::string(text) + "' (expected X2Y or Y2X)");
}

Domain source_domain(Direction d) { return d == Direction::XtoY ? Domain::X : Domain::Y; }
Domain target_domain(Direction d) { return d == Direction::XtoY ? Domain::Y : Domain::X; }

ImageBatch::ImageBatch(torch::Tensor data, Domain domain) : data_(std::move(data)), domain_(domain) {
  if (data_.dim() != 4 || data_.size(1) != 3) {
    throw Error("ImageBatch expects [N, 3, H, W], got " + std::to_string(data_.dim()) + "-d tensor");
  }
  if (data_.size(2) != data_.size(3) || !is_supported_resolution(data_.size(3))) {
    throw Error("ImageBatch resolution must be square 64, 128 or 256; got " +
                std::to_string(data_.size(2)) + "x" + std::to_string(data_.size(3)));
  }
  if (data_.numel() > 0) {
    auto lo = data_.min().item<double>();
    auto hi = data_.max().item<double>();
    if (!(lo >= -1.0 && hi <= 1.0)) {
      throw Error("ImageBatch values must lie in [-1, 1]; got [" + std::to_string(lo) + ", " +
                  std::to_string(hi) + "]");
    }
  }
}

void LandmarkSet::validate(int64_t width, int64_t height) const {
  if (points.size(-1) != 2) throw Error("landmarks must have shape [..., K, 2]");
  auto xs = points.select(-1, 0);
  auto ys = points.select(-1, 1);
  bool ok = (xs >= 0).all().item<bool>() && (xs < width).all().item<bool>() &&
            (ys >= 0).all().item<bool>() && (ys < height).all().item<bool>();
  if (!ok) throw Error("landmark coordinates outside image bounds");
}

void ParsingMask::validate() const {
  if (weights.numel() == 0) return;
  if (weights.min().item<double>() < 0.0 || weights.max().item<double>() > 1.0) {
    throw Error("parsing mask weights must lie in [0, 1]");
  }
}

double LossReport::at(const std::string& name) const {
  auto it = components.find(name);
  if (it == components.end()) throw Error("loss component '" + name + "' not in report");
  return it->second;
}

bool LossReport::all_finite() const {
  for (const auto& [_, v] : components) {
    if (!std::isfinite(v)) return false;
  }
  return std::isfinite(total);
}

torch::Tensor to_unit_range(const torch::Tensor& x) { return (x + 1.0) / 2.0; }

torch::Tensor from_unit_range(const torch::Tensor& x) { return x * 2.0 - 1.0; }

double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v) {
  auto a = u.to(torch::kDouble).flatten();
  auto b = v.to(torch::kDouble).flatten();
  if (a.numel() != b.numel()) throw Error("cosine_similarity: length mismatch");
  double na = a.norm().item<double>();
  double nb = b.norm().item<double>();
  if (na == 0.0 || nb == 0.0) throw NumericError("degenerate embedding: zero-norm vector");
  double c = a.dot(b).item<double>() / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

AutocastScope::AutocastScope(bool enabled) : previous_(at::autocast::is_autocast_enabled(at::kCPU)) {
  if (enabled) at::autocast::set_autocast_dtype(at::kCPU, at::kBFloat16);
  at::autocast::set_autocast_enabled(at::kCPU, enabled);
}

AutocastScope::~AutocastScope() {
  at::autocast::set_autocast_enabled(at::kCPU, previous_);
  if (!previous_) at::autocast::clear_cache();
}

}  // namespace facecycle
