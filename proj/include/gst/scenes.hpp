#pragma once

// Procedural scenes of spheres and boxes, a look-at camera sampler with a
// deliberately non-uniform elevation prior, and a Lambertian raycaster.

#include "gst/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace gst::scenes {

using geometry::CameraPose;
using geometry::Intrinsics;
using geometry::Vec3;

enum class PrimitiveKind { Sphere, Box };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center = Vec3::Zero();
  double size = 0.3;  // sphere radius or box half-extent
  Vec3 albedo = Vec3(0.5, 0.5, 0.5);
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  Vec3 background = Vec3(0.1, 0.1, 0.1);
  std::uint64_t seed = 0;

  Vec3 centroid() const {
    if (primitives.empty()) return Vec3::Zero();
    Vec3 c = Vec3::Zero();
    for (const auto& p : primitives) c += p.center;
    return c / double(primitives.size());
  }
};

struct CameraSampler {
  double radius_min = 1.8;
  double radius_max = 3.2;
  double elevation_min_deg = -10.0;
  double elevation_max_deg = 70.0;
  double look_at_jitter = 0.05;

  /// Elevation density rises linearly toward elevation_max (inverse-CDF of sqrt(u)).
  double elevation_from_uniform(double u) const {
    return elevation_min_deg + (elevation_max_deg - elevation_min_deg) * std::sqrt(u);
  }

  /// CDF of the elevation prior, for distribution comparisons.
  double elevation_cdf(double deg) const {
    const double t = std::clamp((deg - elevation_min_deg) / (elevation_max_deg - elevation_min_deg), 0.0, 1.0);
    return t * t;
  }
};

inline constexpr double kMinPrimitiveSpacing = 0.1;
inline constexpr int kSpacingRetries = 100;

inline SceneSpec sample_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(1, 5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  std::uniform_real_distribution<double> size_dist(0.15, 0.5);
  SceneSpec spec;
  spec.seed = seed;
  const int count = count_dist(rng);
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = unit(rng) < 0.5 ? PrimitiveKind::Sphere : PrimitiveKind::Box;
    for (int attempt = 0;; ++attempt) {
      p.center = Vec3(coord(rng), coord(rng), coord(rng));
      const bool clear = std::none_of(spec.primitives.begin(), spec.primitives.end(), [&](const Primitive& q) {
        return (q.center - p.center).norm() < kMinPrimitiveSpacing;
      });
      if (clear || attempt >= kSpacingRetries) break;
    }
    p.size = size_dist(rng);
    p.albedo = Vec3(unit(rng), unit(rng), unit(rng)) * 0.8 + Vec3::Constant(0.2);
    spec.primitives.push_back(p);
  }
  spec.background = Vec3(unit(rng), unit(rng), unit(rng)) * 0.3;
  return spec;
}

/// Explicit spherical placement around `target`; azimuth 0 is +Z.
inline CameraPose orbit_camera(const Vec3& target, double radius, double elevation_deg, double azimuth_deg,
                               const Vec3& look_offset = Vec3::Zero()) {
  const double el = elevation_deg * geometry::kPi / 180.0;
  const double az = azimuth_deg * geometry::kPi / 180.0;
  const Vec3 eye = target + radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
  CameraPose pose;
  pose.center = eye;
  pose.rotation = geometry::look_at_rotation(eye, target + look_offset);
  return pose;
}

inline CameraPose sample_camera(const SceneSpec& spec, const CameraSampler& sampler, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, sampler.look_at_jitter);
  const double radius = sampler.radius_min + (sampler.radius_max - sampler.radius_min) * unit(rng);
  const double elevation = sampler.elevation_from_uniform(unit(rng));
  const double azimuth = 360.0 * unit(rng);
  const Vec3 offset(jitter(rng), jitter(rng), jitter(rng));
  return orbit_camera(spec.centroid(), radius, elevation, azimuth, offset);
}

/// Channel-last H×W×3 image in [-1, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(std::size_t(h) * w * 3, 0.0f) {}
  float* pixel(int v, int u) { return data.data() + (std::size_t(v) * width + u) * 3; }
  const float* pixel(int v, int u) const { return data.data() + (std::size_t(v) * width + u) * 3; }
  bool operator==(const Image&) const = default;
};

inline const Vec3 kLightDirection = Vec3(1, 1, 1).normalized();
inline constexpr double kAmbient = 0.2;

struct Hit {
  double t = 0.0;
  Vec3 normal = Vec3::Zero();
};

inline bool intersect_sphere(const Primitive& p, const Vec3& o, const Vec3& d, Hit& hit) {
  const Vec3 oc = o - p.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - p.size * p.size;
  const double disc = b * b - c;
  if (disc < 0) return false;
  const double s = std::sqrt(disc);
  double t = -b - s;
  if (t <= 1e-9) t = -b + s;
  if (t <= 1e-9) return false;
  hit.t = t;
  hit.normal = (o + t * d - p.center).normalized();
  return true;
}

inline bool intersect_box(const Primitive& p, const Vec3& o, const Vec3& d, Hit& hit) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = 0, far_axis = 0;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.size, hi = p.center[a] + p.size;
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return false;
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      near_axis = a;
    }
    if (t1 < t_far) {
      t_far = t1;
      far_axis = a;
    }
    if (t_near > t_far) return false;
  }
  int axis = near_axis;
  double t = t_near;
  if (t <= 1e-9) {
    t = t_far;
    axis = far_axis;
  }
  if (t <= 1e-9) return false;
  hit.t = t;
  hit.normal = Vec3::Zero();
  const Vec3 point = o + t * d;
  hit.normal[axis] = point[axis] > p.center[axis] ? 1.0 : -1.0;
  return true;
}

/// Shaded color in [0, 1] of the nearest hit along a ray, or the background.
inline Vec3 shade_ray(const SceneSpec& spec, const Vec3& origin, const Vec3& dir) {
  Hit best;
  best.t = std::numeric_limits<double>::infinity();
  const Primitive* hit_prim = nullptr;
  for (const auto& p : spec.primitives) {
    Hit h;
    const bool ok = p.kind == PrimitiveKind::Sphere ? intersect_sphere(p, origin, dir, h) : intersect_box(p, origin, dir, h);
    if (ok && h.t < best.t) {
      best = h;
      hit_prim = &p;
    }
  }
  if (!hit_prim) return spec.background;
  const double lambert = std::max(0.0, best.normal.dot(kLightDirection));
  return (hit_prim->albedo * std::min(1.0, kAmbient + lambert)).cwiseMin(1.0);
}

inline Image render(const SceneSpec& spec, const CameraPose& pose, const Intrinsics& k) {
  const geometry::RayMap rays = geometry::pose_to_raymap(pose, k);
  Image img(k.height, k.width);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) {
      const Vec3 c = shade_ray(spec, pose.center, rays.at(v, u).direction);
      float* px = img.pixel(v, u);
      for (int ch = 0; ch < 3; ++ch) px[ch] = float(2.0 * c[ch] - 1.0);
    }
  return img;
}

/// 8-bit quantization used for storage: round((x + 1) / 2 · 255).
inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = std::clamp(double(img.data[i]), -1.0, 1.0);
    out[i] = std::uint8_t(std::lround((x + 1.0) * 0.5 * 255.0));
  }
  return out;
}

inline Image from_bytes(std::span<const std::uint8_t> bytes, int height, int width) {
  Image img(height, width);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(double(bytes[i]) / 255.0 * 2.0 - 1.0);
  return img;
}

/// Quantizes an image to the values it would have after an 8-bit round trip.
inline Image quantize_8bit(const Image& img) {
  const auto bytes = to_bytes(img);
  return from_bytes(bytes, img.height, img.width);
}

}  // namespace gst::scenes
