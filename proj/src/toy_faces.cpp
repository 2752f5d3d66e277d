#include "facecycle/toy_faces.hpp"

#include <algorithm>
#include <cmath>

namespace facecycle::toy {
namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// Distance from (px, py) to the mouth curve y = my + sag * (1 - t^2), t in [-1, 1].
double mouth_distance(const FaceParams& p, double px, double py, double scale) {
  const double cx = p.cx * scale, my = (p.cy + p.mouth_dy) * scale;
  const double hw = p.mouth_hw * scale, sag = p.mouth_sag * scale;
  constexpr int kSegments = 24;
  double best = 1e30;
  double ax = cx - hw, ay = my;
  for (int s = 1; s <= kSegments; ++s) {
    double t = -1.0 + 2.0 * s / kSegments;
    double bx = cx + t * hw, by = my + sag * (1.0 - t * t);
    double dx = bx - ax, dy = by - ay;
    double len2 = dx * dx + dy * dy;
    double u = len2 > 0 ? clampd(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    double qx = ax + u * dx - px, qy = ay + u * dy - py;
    best = std::min(best, qx * qx + qy * qy);
    ax = bx;
    ay = by;
  }
  return std::sqrt(best);
}

bool inside_ellipse(double px, double py, double cx, double cy, double rx, double ry) {
  double dx = (px - cx) / rx, dy = (py - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

}  // namespace

Palette palette(Domain domain) {
  if (domain == Domain::X) {
    return {{0.86f, 0.88f, 0.92f}, {0.93f, 0.76f, 0.62f}, {0.25f, 0.13f, 0.08f}, {0.62f, 0.10f, 0.16f}, 1.5};
  }
  return {{0.55f, 0.76f, 0.56f}, {0.76f, 0.85f, 0.96f}, {0.10f, 0.10f, 0.36f}, {0.36f, 0.05f, 0.46f}, 3.0};
}

FaceParams sample_identity(std::mt19937_64& rng) {
  FaceParams p;
  p.rx = uniform(rng, 0.33, 0.37);
  p.ry = uniform(rng, 0.41, 0.44);
  p.eye_dx = uniform(rng, 0.125, 0.165);
  p.eye_dy = uniform(rng, 0.095, 0.125);
  p.eye_rx = uniform(rng, 0.045, 0.058);
  p.eye_ry = uniform(rng, 0.025, 0.033);
  p.nose_dy = uniform(rng, 0.035, 0.055);
  p.nose_r = uniform(rng, 0.02, 0.025);
  p.mouth_dy = uniform(rng, 0.205, 0.235);
  p.mouth_hw = uniform(rng, 0.095, 0.135);
  p.mouth_sag = uniform(rng, -0.015, 0.035);
  p.skin_shift = uniform(rng, -0.05, 0.05);
  return p;
}

FaceParams jitter(const FaceParams& base, std::mt19937_64& rng) {
  FaceParams p = base;
  p.cx = 0.5 + uniform(rng, -0.02, 0.02);
  p.cy = 0.5 + uniform(rng, -0.02, 0.02);
  p.eye_dx = clampd(base.eye_dx + uniform(rng, -0.004, 0.004), 0.12, 0.17);
  p.eye_dy = clampd(base.eye_dy + uniform(rng, -0.004, 0.004), 0.09, 0.13);
  p.nose_dy = clampd(base.nose_dy + uniform(rng, -0.004, 0.004), 0.03, 0.06);
  p.mouth_dy = clampd(base.mouth_dy + uniform(rng, -0.004, 0.004), 0.20, 0.24);
  p.mouth_hw = clampd(base.mouth_hw + uniform(rng, -0.005, 0.005), 0.09, 0.14);
  p.mouth_sag = clampd(base.mouth_sag + uniform(rng, -0.01, 0.01), -0.02, 0.04);
  p.brightness = uniform(rng, -0.04, 0.04);
  return p;
}

torch::Tensor landmarks(const FaceParams& p, int resolution) {
  const double s = resolution;
  auto out = torch::empty({kLandmarkCount, 2}, torch::kDouble);
  auto a = out.accessor<double, 2>();
  a[0][0] = (p.cx - p.eye_dx) * s;
  a[0][1] = (p.cy - p.eye_dy) * s;
  a[1][0] = (p.cx + p.eye_dx) * s;
  a[1][1] = (p.cy - p.eye_dy) * s;
  a[2][0] = p.cx * s;
  a[2][1] = (p.cy + p.nose_dy) * s;
  a[3][0] = (p.cx - p.mouth_hw) * s;
  a[3][1] = (p.cy + p.mouth_dy) * s;
  a[4][0] = (p.cx + p.mouth_hw) * s;
  a[4][1] = (p.cy + p.mouth_dy) * s;
  return out.to(torch::kFloat);
}

Render render(const FaceParams& p, Domain domain, int resolution) {
  const auto pal = palette(domain);
  const double s = resolution;
  const double stroke = pal.stroke_px_at_64 * s / 64.0;
  constexpr int kSub = 4;

  std::array<float, 3> skin = pal.skin;
  for (auto& c : skin) c = static_cast<float>(clampd(c + p.skin_shift, 0.0, 1.0));

  auto image = torch::empty({3, resolution, resolution}, torch::kFloat);
  auto mask = torch::empty({resolution, resolution}, torch::kFloat);
  auto img = image.accessor<float, 3>();
  auto msk = mask.accessor<float, 2>();

  const double mouth_x0 = (p.cx - p.mouth_hw) * s - stroke, mouth_x1 = (p.cx + p.mouth_hw) * s + stroke;
  const double my = (p.cy + p.mouth_dy) * s;
  const double mouth_y0 = my + std::min(0.0, p.mouth_sag * s) - stroke;
  const double mouth_y1 = my + std::max(0.0, p.mouth_sag * s) + stroke;

  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      std::array<double, 3> acc{0, 0, 0};
      double m = 0.0;
      for (int si = 0; si < kSub; ++si) {
        for (int sj = 0; sj < kSub; ++sj) {
          const double px = j + (sj + 0.5) / kSub, py = i + (si + 0.5) / kSub;
          const std::array<float, 3>* color = &pal.background;
          double w = 0.0;
          if (inside_ellipse(px, py, p.cx * s, p.cy * s, p.rx * s, p.ry * s)) {
            color = &skin;
            w = kMaskSkin;
            bool feature =
                inside_ellipse(px, py, (p.cx - p.eye_dx) * s, (p.cy - p.eye_dy) * s, p.eye_rx * s, p.eye_ry * s) ||
                inside_ellipse(px, py, (p.cx + p.eye_dx) * s, (p.cy - p.eye_dy) * s, p.eye_rx * s, p.eye_ry * s) ||
                inside_ellipse(px, py, p.cx * s, (p.cy + p.nose_dy) * s, p.nose_r * s, p.nose_r * s);
            if (feature) {
              color = &pal.feature;
              w = kMaskFeature;
            } else if (px >= mouth_x0 && px <= mouth_x1 && py >= mouth_y0 && py <= mouth_y1 &&
                       mouth_distance(p, px, py, s) <= stroke / 2.0) {
              color = &pal.mouth;
              w = kMaskFeature;
            }
          }
          for (int c = 0; c < 3; ++c) acc[c] += (*color)[c];
          m += w;
        }
      }
      for (int c = 0; c < 3; ++c) {
        img[c][i][j] = static_cast<float>(clampd(acc[c] / (kSub * kSub) + p.brightness, 0.0, 1.0));
      }
      msk[i][j] = static_cast<float>(m / (kSub * kSub));
    }
  }
  return {image, mask, landmarks(p, resolution)};
}

}  // namespace facecycle::toy
