#pragma once

// On-disk dataset: 8-bit PNG views, per-scene pose files, and a manifest.
//
//   <root>/manifest.json
//   <root>/scenes/<id>/view_<k>.png
//   <root>/scenes/<id>/poses.json
//   <root>/scenes/<id>/scene.json

#include "gst/geometry.hpp"
#include "gst/scenes.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::data {

namespace fs = std::filesystem;
using geometry::CameraPose;
using geometry::Intrinsics;
using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ManifestConflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kManifestVersion = 1;

inline void write_png(const fs::path& path, const scenes::Image& img) {
  const auto bytes = scenes::to_bytes(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = png_uint_32(img.width);
  image.height = png_uint_32(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("failed to write " + path.string() + ": " + image.message);
}

inline scenes::Image read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("failed to read " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr))
    throw IoError("failed to decode " + path.string() + ": " + image.message);
  return scenes::from_bytes(bytes, int(image.height), int(image.width));
}

/// Decimal with 17 significant digits, valid as a JSON number.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

inline json intrinsics_json(const Intrinsics& k) {
  return json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const json& j) {
  Intrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
               j.at("cy").get<double>(), j.at("width").get<int>(), j.at("height").get<int>()};
  k.check();
  return k;
}

/// Pose file text: convention, intrinsics, and per-view row-major rotation + center.
inline std::string format_pose_file(const Intrinsics& k, const std::vector<CameraPose>& views,
                                    geometry::Convention convention = geometry::Convention::RUB) {
  std::ostringstream os;
  os << "{\n  \"convention\": \"" << geometry::to_string(convention) << "\",\n";
  os << "  \"intrinsics\": {\"fx\": " << format_real(k.fx) << ", \"fy\": " << format_real(k.fy)
     << ", \"cx\": " << format_real(k.cx) << ", \"cy\": " << format_real(k.cy) << ", \"width\": " << k.width
     << ", \"height\": " << k.height << "},\n";
  os << "  \"views\": [";
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& p = views[i];
    os << (i ? ",\n" : "\n") << "    {\"rotation\": [";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << (r || c ? ", " : "") << format_real(p.rotation(r, c));
    os << "], \"center\": [" << format_real(p.center[0]) << ", " << format_real(p.center[1]) << ", "
       << format_real(p.center[2]) << "]}";
  }
  os << "\n  ]\n}\n";
  return os.str();
}

struct PoseFile {
  geometry::Convention convention = geometry::Convention::RUB;
  Intrinsics intrinsics;
  std::vector<CameraPose> views;
};

inline PoseFile parse_pose_file(const std::string& text) {
  const json j = json::parse(text);
  PoseFile f;
  f.convention = geometry::convention_from_string(j.at("convention").get<std::string>());
  f.intrinsics = intrinsics_from_json(j.at("intrinsics"));
  for (const auto& v : j.at("views")) {
    CameraPose p;
    const auto r = v.at("rotation").get<std::vector<double>>();
    const auto c = v.at("center").get<std::vector<double>>();
    if (r.size() != 9 || c.size() != 3) throw IoError("malformed pose entry");
    for (int i = 0; i < 9; ++i) p.rotation(i / 3, i % 3) = r[std::size_t(i)];
    p.center = geometry::Vec3(c[0], c[1], c[2]);
    f.views.push_back(geometry::to_rub(p, f.convention));
  }
  f.convention = geometry::Convention::RUB;
  return f;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline json scene_json(const scenes::SceneSpec& s) {
  json prims = json::array();
  for (const auto& p : s.primitives)
    prims.push_back({{"kind", p.kind == scenes::PrimitiveKind::Sphere ? "sphere" : "box"},
                     {"center", {p.center[0], p.center[1], p.center[2]}},
                     {"size", p.size},
                     {"albedo", {p.albedo[0], p.albedo[1], p.albedo[2]}}});
  return json{{"seed", s.seed},
              {"background", {s.background[0], s.background[1], s.background[2]}},
              {"primitives", prims}};
}

inline scenes::SceneSpec scene_from_json(const json& j) {
  scenes::SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  const auto bg = j.at("background").get<std::vector<double>>();
  s.background = geometry::Vec3(bg[0], bg[1], bg[2]);
  for (const auto& p : j.at("primitives")) {
    scenes::Primitive prim;
    prim.kind = p.at("kind").get<std::string>() == "sphere" ? scenes::PrimitiveKind::Sphere : scenes::PrimitiveKind::Box;
    const auto c = p.at("center").get<std::vector<double>>();
    const auto a = p.at("albedo").get<std::vector<double>>();
    prim.center = geometry::Vec3(c[0], c[1], c[2]);
    prim.size = p.at("size").get<double>();
    prim.albedo = geometry::Vec3(a[0], a[1], a[2]);
    s.primitives.push_back(prim);
  }
  return s;
}

struct GenConfig {
  int num_scenes = 10;
  int views_per_scene = 4;
  int resolution = 32;
  std::uint64_t seed = 0;
  scenes::CameraSampler sampler;
  double distance_threshold = 5.0;
};

struct Manifest {
  int version = kManifestVersion;
  GenConfig gen;
  Intrinsics intrinsics;
  double scale = 1.0;
  std::vector<int> train, val, test;
};

inline json sampler_json(const scenes::CameraSampler& s) {
  return json{{"radius_min", s.radius_min},
              {"radius_max", s.radius_max},
              {"elevation_min_deg", s.elevation_min_deg},
              {"elevation_max_deg", s.elevation_max_deg},
              {"look_at_jitter", s.look_at_jitter}};
}

inline scenes::CameraSampler sampler_from_json(const json& j) {
  scenes::CameraSampler s;
  s.radius_min = j.at("radius_min").get<double>();
  s.radius_max = j.at("radius_max").get<double>();
  s.elevation_min_deg = j.at("elevation_min_deg").get<double>();
  s.elevation_max_deg = j.at("elevation_max_deg").get<double>();
  s.look_at_jitter = j.at("look_at_jitter").get<double>();
  return s;
}

/// Generation parameters only; two datasets with equal values are interchangeable.
inline json generation_json(const GenConfig& g) {
  return json{{"num_scenes", g.num_scenes},   {"views_per_scene", g.views_per_scene},
              {"resolution", g.resolution},   {"seed", g.seed},
              {"sampler", sampler_json(g.sampler)}, {"distance_threshold", g.distance_threshold}};
}

inline std::string format_manifest(const Manifest& m) {
  json j;
  j["version"] = m.version;
  j["generation"] = generation_json(m.gen);
  j["intrinsics"] = intrinsics_json(m.intrinsics);
  j["scale"] = format_real(m.scale);
  j["distance_threshold"] = m.gen.distance_threshold;
  j["splits"] = json{{"train", m.train}, {"val", m.val}, {"test", m.test}};
  return j.dump(2) + "\n";
}

inline Manifest parse_manifest(const std::string& text) {
  const json j = json::parse(text);
  Manifest m;
  m.version = j.at("version").get<int>();
  if (m.version != kManifestVersion) throw IoError("unsupported manifest version " + std::to_string(m.version));
  const json& g = j.at("generation");
  m.gen.num_scenes = g.at("num_scenes").get<int>();
  m.gen.views_per_scene = g.at("views_per_scene").get<int>();
  m.gen.resolution = g.at("resolution").get<int>();
  m.gen.seed = g.at("seed").get<std::uint64_t>();
  m.gen.sampler = sampler_from_json(g.at("sampler"));
  m.gen.distance_threshold = g.at("distance_threshold").get<double>();
  m.intrinsics = intrinsics_from_json(j.at("intrinsics"));
  m.scale = std::stod(j.at("scale").get<std::string>());
  m.train = j.at("splits").at("train").get<std::vector<int>>();
  m.val = j.at("splits").at("val").get<std::vector<int>>();
  m.test = j.at("splits").at("test").get<std::vector<int>>();
  return m;
}

inline std::string scene_dir_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

inline std::string view_file_name(int k) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "view_%02d.png", k);
  return buf;
}

inline std::uint64_t scene_seed(std::uint64_t seed, int scene) { return seed * 1000003ull + std::uint64_t(scene) * 7919ull + 1; }
inline std::uint64_t view_seed(std::uint64_t seed, int scene, int view) {
  return scene_seed(seed, scene) * 31ull + std::uint64_t(view) + 0x5bd1e995ull;
}

/// 90/5/5 split by scene after a seeded shuffle.
inline void split_scenes(int num_scenes, std::uint64_t seed, std::vector<int>& train, std::vector<int>& val,
                         std::vector<int>& test) {
  std::vector<int> ids(static_cast<std::size_t>(num_scenes));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (int i = num_scenes - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(ids[std::size_t(i)], ids[std::size_t(pick(rng))]);
  }
  const int n_train = num_scenes * 90 / 100;
  const int n_val = num_scenes * 5 / 100;
  train.assign(ids.begin(), ids.begin() + n_train);
  val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
}

/// Renders the dataset to `root`. Re-running with the same parameters
/// rewrites identical bytes; a populated directory with different parameters
/// is refused.
inline Manifest gen_dataset(const GenConfig& gen, const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  if (fs::exists(manifest_path)) {
    const Manifest existing = parse_manifest(read_text(manifest_path));
    if (generation_json(existing.gen) != generation_json(gen))
      throw ManifestConflict("dataset at " + root.string() + " was generated with different parameters");
  } else if (fs::exists(root) && !fs::is_empty(root)) {
    throw ManifestConflict(root.string() + " is not empty and has no manifest");
  }
  std::error_code ec;
  fs::create_directories(root / "scenes", ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());

  Manifest m;
  m.gen = gen;
  m.intrinsics = Intrinsics::fixed_default(gen.resolution, gen.resolution);
  split_scenes(gen.num_scenes, gen.seed, m.train, m.val, m.test);

  std::vector<std::vector<CameraPose>> poses(std::size_t(gen.num_scenes));
  std::vector<scenes::SceneSpec> specs;
  for (int s = 0; s < gen.num_scenes; ++s) {
    specs.push_back(scenes::sample_scene(scene_seed(gen.seed, s)));
    for (int v = 0; v < gen.views_per_scene; ++v)
      poses[std::size_t(s)].push_back(scenes::sample_camera(specs.back(), gen.sampler, view_seed(gen.seed, s, v)));
  }
  std::vector<geometry::Vec3> train_centers;
  for (int s : m.train)
    for (const auto& p : poses[std::size_t(s)]) train_centers.push_back(p.center);
  if (train_centers.size() < 2)
    for (const auto& ps : poses)
      for (const auto& p : ps) train_centers.push_back(p.center);
  m.scale = geometry::standardize_dataset(train_centers, gen.distance_threshold).scale;

  for (int s = 0; s < gen.num_scenes; ++s) {
    const fs::path dir = root / "scenes" / scene_dir_name(s);
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());
    for (int v = 0; v < gen.views_per_scene; ++v)
      write_png(dir / view_file_name(v), scenes::render(specs[std::size_t(s)], poses[std::size_t(s)][std::size_t(v)], m.intrinsics));
    write_text(dir / "poses.json", format_pose_file(m.intrinsics, poses[std::size_t(s)]));
    write_text(dir / "scene.json", scene_json(specs[std::size_t(s)]).dump(2) + "\n");
  }
  write_text(manifest_path, format_manifest(m));
  return m;
}

struct SceneRecord {
  int id = 0;
  scenes::SceneSpec spec;
  std::vector<CameraPose> poses;  // world units (unscaled)
  std::vector<scenes::Image> views;
};

/// Fully loaded dataset held in memory.
struct Dataset {
  fs::path root;
  Manifest manifest;
  std::vector<SceneRecord> scenes;  // indexed by scene id

  geometry::SceneNormalization normalization() const { return {manifest.scale, manifest.gen.distance_threshold}; }
  const std::vector<int>& split(const std::string& name) const {
    if (name == "train") return manifest.train;
    if (name == "val") return manifest.val;
    if (name == "test") return manifest.test;
    throw std::invalid_argument("unknown split " + name);
  }
};

inline Dataset load_dataset(const fs::path& root, bool load_images = true) {
  Dataset d;
  d.root = root;
  d.manifest = parse_manifest(read_text(root / "manifest.json"));
  for (int s = 0; s < d.manifest.gen.num_scenes; ++s) {
    const fs::path dir = root / "scenes" / scene_dir_name(s);
    SceneRecord rec;
    rec.id = s;
    rec.spec = scene_from_json(json::parse(read_text(dir / "scene.json")));
    rec.poses = parse_pose_file(read_text(dir / "poses.json")).views;
    if (load_images)
      for (int v = 0; v < d.manifest.gen.views_per_scene; ++v) rec.views.push_back(read_png(dir / view_file_name(v)));
    d.scenes.push_back(std::move(rec));
  }
  return d;
}

/// Target pose in the observation camera's frame, with centers scaled by β.
inline CameraPose relative_scaled_pose(const CameraPose& observation, const CameraPose& target, double scale) {
  CameraPose rel = target.relative_to(observation);
  rel.center *= scale;
  return rel;
}

}  // namespace gst::data
