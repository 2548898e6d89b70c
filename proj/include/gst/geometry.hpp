#pragma once

// Camera conventions, Plücker ray maps and dataset normalization.
//
// Poses are stored camera-to-world in the RUB convention: rotation columns are
// the camera's right, up and back axes expressed in world coordinates, and the
// camera looks along its local -Z axis.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

class SingularGeometry : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateDirection : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateDataset : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// fx = fy = width, principal point at (width/2, height/2).
  static Intrinsics fixed_default(int width, int height) {
    return Intrinsics{static_cast<double>(width), static_cast<double>(width),
                      width / 2.0, height / 2.0, width, height};
  }

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 &&
           cx < width && cy >= 0 && cy < height;
  }

  void check() const {
    if (!valid()) throw std::invalid_argument("invalid intrinsics");
  }

  bool operator==(const Intrinsics&) const = default;
};

struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();

  bool valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && center.allFinite();
  }

  Vec3 right() const { return rotation.col(0); }
  Vec3 up() const { return rotation.col(1); }
  Vec3 back() const { return rotation.col(2); }
  Vec3 view_direction() const { return -rotation.col(2); }

  /// World-to-camera rotation and translation (x_cam = R x_world + t).
  Mat3 world_to_camera_rotation() const { return rotation.transpose(); }
  Vec3 world_to_camera_translation() const { return -rotation.transpose() * center; }

  static CameraPose from_world_to_camera(const Mat3& r, const Vec3& t) {
    return CameraPose{r.transpose(), -r.transpose() * t};
  }

  /// This pose expressed in the camera frame of `reference`.
  CameraPose relative_to(const CameraPose& reference) const {
    return CameraPose{reference.rotation.transpose() * rotation,
                      reference.rotation.transpose() * (center - reference.center)};
  }

  /// Inverse of relative_to: maps a pose given in `reference`'s frame back to world.
  CameraPose compose_onto(const CameraPose& reference) const {
    return CameraPose{reference.rotation * rotation,
                      reference.center + reference.rotation * center};
  }
};

struct PluckerRay {
  Vec3 moment = Vec3::Zero();
  Vec3 direction = Vec3(0, 0, -1);
};

class RayMap {
 public:
  RayMap() = default;
  RayMap(int height, int width) : height_(height), width_(width), rays_(std::size_t(height) * width) {}

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return rays_.size(); }

  PluckerRay& at(int v, int u) { return rays_[std::size_t(v) * width_ + u]; }
  const PluckerRay& at(int v, int u) const { return rays_[std::size_t(v) * width_ + u]; }
  std::span<PluckerRay> rays() { return rays_; }
  std::span<const PluckerRay> rays() const { return rays_; }

  /// Largest deviation from |d| = 1 and m·d = 0 over all cells.
  double max_constraint_violation() const {
    double worst = 0.0;
    for (const auto& r : rays_) {
      worst = std::max(worst, std::abs(r.direction.norm() - 1.0));
      worst = std::max(worst, std::abs(r.moment.dot(r.direction)));
    }
    return worst;
  }

  /// Channel-last H×W×6 grid, moment then direction.
  std::vector<double> to_channels() const {
    std::vector<double> out(rays_.size() * 6);
    for (std::size_t i = 0; i < rays_.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        out[i * 6 + k] = rays_[i].moment[k];
        out[i * 6 + 3 + k] = rays_[i].direction[k];
      }
    }
    return out;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<PluckerRay> rays_;
};

struct SceneNormalization {
  double scale = 1.0;
  double distance_threshold = 5.0;

  bool valid() const { return scale > 0 && distance_threshold > 0; }
};

enum class Convention { RUB, RDF, LUF };

inline std::string to_string(Convention c) {
  switch (c) {
    case Convention::RUB: return "RUB";
    case Convention::RDF: return "RDF";
    case Convention::LUF: return "LUF";
  }
  return "?";
}

inline Convention convention_from_string(const std::string& s) {
  if (s == "RUB") return Convention::RUB;
  if (s == "RDF") return Convention::RDF;
  if (s == "LUF") return Convention::LUF;
  throw std::invalid_argument("unknown camera convention: " + s);
}

/// Unit camera-frame direction through integer pixel (u, v).
inline Vec3 pixel_direction(const Intrinsics& k, int u, int v) {
  return Vec3((u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0).normalized();
}

/// Row-major H×W grid of camera-frame directions.
inline std::vector<Vec3> pixel_directions(const Intrinsics& k) {
  k.check();
  std::vector<Vec3> out;
  out.reserve(std::size_t(k.width) * k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) out.push_back(pixel_direction(k, u, v));
  return out;
}

inline RayMap pose_to_raymap(const CameraPose& pose, const Intrinsics& k) {
  const auto dirs = pixel_directions(k);
  RayMap map(k.height, k.width);
  auto rays = map.rays();
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    Vec3 d = (pose.rotation * dirs[i]).normalized();
    rays[i].direction = d;
    rays[i].moment = pose.center.cross(d);
  }
  return map;
}

/// Least-squares point closest to all rays: Σ(I - ddᵀ) c = Σ d × m.
inline Vec3 closest_point_to_rays(std::span<const PluckerRay> rays) {
  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (const auto& r : rays) {
    a += Mat3::Identity() - r.direction * r.direction.transpose();
    b += r.direction.cross(r.moment);
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(a);
  const double smallest = eig.eigenvalues()(0);
  if (!(smallest > 1e-8 * a.trace()))
    throw SingularGeometry("ray bundle is degenerate: smallest eigenvalue " + std::to_string(smallest));
  return a.ldlt().solve(b);
}

/// Rotation R minimizing Σ |R a_i - b_i|² (orthogonal Procrustes with det fix).
inline Mat3 procrustes_rotation(std::span<const Vec3> from, std::span<const Vec3> to) {
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) h += to[i] * from[i].transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 fix = Mat3::Identity();
  fix(2, 2) = (u * v.transpose()).determinant() < 0 ? -1.0 : 1.0;
  return u * fix * v.transpose();
}

inline CameraPose raymap_to_pose(const RayMap& map, const Intrinsics& k) {
  if (map.height() != k.height || map.width() != k.width)
    throw std::invalid_argument("ray map resolution does not match intrinsics");
  CameraPose pose;
  pose.center = closest_point_to_rays(map.rays());
  const auto cam = pixel_directions(k);
  std::vector<Vec3> world;
  world.reserve(map.size());
  for (const auto& r : map.rays()) world.push_back(r.direction.normalized());
  pose.rotation = procrustes_rotation(cam, world);
  return pose;
}

/// Project a raw H×W×6 grid (moment, direction per cell) onto valid Plücker rays.
inline RayMap normalize_raymap(std::span<const double> raw, int height, int width) {
  if (raw.size() != std::size_t(height) * width * 6)
    throw std::invalid_argument("raw ray grid has wrong size");
  RayMap map(height, width);
  auto rays = map.rays();
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const double* c = raw.data() + i * 6;
    Vec3 m(c[0], c[1], c[2]);
    Vec3 d(c[3], c[4], c[5]);
    const double n = d.norm();
    if (!(n >= 1e-8)) throw DegenerateDirection("ray direction vanishes at cell " + std::to_string(i));
    d /= n;
    rays[i].direction = d;
    rays[i].moment = m - m.dot(d) * d;
  }
  return map;
}

inline RayMap normalize_raymap(const RayMap& map) {
  const auto raw = map.to_channels();
  return normalize_raymap(raw, map.height(), map.width());
}

/// Mean squared distance of the centers from their centroid.
inline double position_variance(std::span<const Vec3> centers) {
  Vec3 mean = Vec3::Zero();
  for (const auto& c : centers) mean += c;
  mean /= double(centers.size());
  double acc = 0.0;
  for (const auto& c : centers) acc += (c - mean).squaredNorm();
  return acc / double(centers.size());
}

inline SceneNormalization standardize_dataset(std::span<const Vec3> centers,
                                              double distance_threshold = 5.0) {
  if (centers.size() < 2) throw DegenerateDataset("need at least two camera centers");
  const double var = position_variance(centers);
  if (var < 1e-12) throw DegenerateDataset("camera centers have zero variance");
  return SceneNormalization{1.0 / std::sqrt(var), distance_threshold};
}

/// Scale factors used for public multi-view datasets, for reference configs.
struct DatasetScale {
  const char* name;
  double scale;
};
inline constexpr DatasetScale kPublishedDatasetScales[] = {
    {"Objaverse", 1.0}, {"Co3D", 0.1}, {"MVImgNet", 0.5}, {"RealEstate10K", 10.0}};

inline bool filter_pair(const CameraPose& a, const CameraPose& b, const SceneNormalization& norm) {
  return (a.center - b.center).norm() <= norm.distance_threshold;
}

/// Angle of r1ᵀ r2 in degrees, in [0, 180].
inline double rotation_geodesic_error(const Mat3& r1, const Mat3& r2) {
  const Mat3 rel = r1.transpose() * r2;
  const double c = std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

inline Mat3 convention_correction(Convention c) {
  switch (c) {
    case Convention::RUB: return Mat3::Identity();
    case Convention::RDF: return Vec3(1, -1, -1).asDiagonal();
    case Convention::LUF: return Vec3(-1, 1, -1).asDiagonal();
  }
  return Mat3::Identity();
}

inline CameraPose to_rub(const CameraPose& pose, Convention source) {
  return CameraPose{pose.rotation * convention_correction(source), pose.center};
}

/// Rotation about a unit axis by an angle in radians.
inline Mat3 axis_angle(const Vec3& axis, double radians) {
  return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

/// Camera-to-world rotation looking from `eye` toward `target` with the given world up.
inline Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& world_up = Vec3(0, 1, 0)) {
  const Vec3 back = (eye - target).normalized();
  Vec3 right = world_up.cross(back);
  if (right.norm() < 1e-9) right = Vec3(1, 0, 0).cross(back);
  right.normalize();
  const Vec3 up = back.cross(right).normalized();
  Mat3 r;
  r.col(0) = right;
  r.col(1) = up;
  r.col(2) = back;
  return r;
}

/// Elevation in degrees of the camera's back axis above the horizontal plane.
inline double back_axis_elevation(const Mat3& rotation) {
  return std::asin(std::clamp(rotation(1, 2), -1.0, 1.0)) * 180.0 / kPi;
}

}  // namespace gst::geometry
