#pragma once

#include "facecycle/core_types.hpp"

#include <array>
#include <random>

namespace facecycle::toy {

// Geometry in units of the image side; the renderer scales to pixels.
struct FaceParams {
  double cx = 0.5, cy = 0.5;  // head centre
  double rx = 0.35, ry = 0.42;
  double eye_dx = 0.145, eye_dy = 0.11;  // eye centres at (cx -/+ dx, cy - dy)
  double eye_rx = 0.05, eye_ry = 0.03;
  double nose_dy = 0.045, nose_r = 0.025;
  double mouth_dy = 0.22, mouth_hw = 0.115;  // corners at (cx -/+ hw, cy + dy)
  double mouth_sag = 0.01;                   // mid-point offset below the corners
  double skin_shift = 0.0;                   // per-identity skin tone offset
  double brightness = 0.0;                   // per-image exposure offset
};

struct Palette {
  std::array<float, 3> background;
  std::array<float, 3> skin;
  std::array<float, 3> feature;
  std::array<float, 3> mouth;
  double stroke_px_at_64;  // mouth stroke width at 64 px
};

Palette palette(Domain domain);

inline constexpr int kLandmarkCount = 5;
inline constexpr std::array<int, 2> kEyeIndices{0, 1};

// Parsing-mask weights per region.
inline constexpr float kMaskFeature = 1.0f;
inline constexpr float kMaskSkin = 0.6f;

FaceParams sample_identity(std::mt19937_64& rng);
FaceParams jitter(const FaceParams& base, std::mt19937_64& rng);

/// Landmarks (left eye, right eye, nose, mouth left, mouth right) in pixel
/// coordinates at `resolution`; pixel (i, j) covers [j, j+1) x [i, i+1).
torch::Tensor landmarks(const FaceParams& p, int resolution);

struct Render {
  torch::Tensor image;      // [3, R, R] in [0, 1]
  torch::Tensor mask;       // [R, R] in [0, 1]
  torch::Tensor landmarks;  // [5, 2]
};

/// Anti-aliased rendering (4x4 supersampling).
Render render(const FaceParams& p, Domain domain, int resolution);

// Search windows of the analytic landmark estimator, in units of the image side:
// {x0, x1, y0, y1}. Sampling ranges in sample_identity/jitter keep every
// feature inside its window.
struct Window {
  double x0, x1, y0, y1;
};
inline constexpr Window kLeftEyeWindow{0.20, 0.50, 0.26, 0.475};
inline constexpr Window kRightEyeWindow{0.50, 0.80, 0.26, 0.475};
inline constexpr Window kNoseWindow{0.40, 0.60, 0.475, 0.62};
inline constexpr Window kMouthWindow{0.28, 0.72, 0.62, 0.86};

}  // namespace facecycle::toy
