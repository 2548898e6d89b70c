#pragma once

// Evaluation: relative pose accuracy, novel-view quality, prior sampling and
// tokenizer round trips, each with the oracle numbers needed to read them.

#include "gst/harness/train.hpp"

namespace gst::harness {

inline constexpr const char* kEvalHeader =
    "image quality is reported as PSNR and SSIM only; LPIPS is not computed";

/// Up to `max_pairs` filtered test pairs, chosen by a seeded shuffle.
inline std::vector<PairRef> eval_pairs(const data::Dataset& d, const std::string& split, int max_pairs,
                                       std::uint64_t seed) {
  auto pairs = enumerate_pairs(d, d.split(split));
  std::mt19937_64 rng(nn::mix_seed(seed, 0x9a1));
  for (std::size_t i = pairs.size(); i > 1; --i)
    std::swap(pairs[i - 1], pairs[std::uniform_int_distribution<std::size_t>(0, i - 1)(rng)]);
  if (max_pairs >= 0 && pairs.size() > std::size_t(max_pairs)) pairs.resize(std::size_t(max_pairs));
  return pairs;
}

inline std::vector<int> to_global(const seq::Vocabulary& v, tok::Modality m, const tok::TokenGrid& g) {
  std::vector<int> out;
  for (int k : g.indices) out.push_back(v.to_global(m, k));
  return out;
}

inline tok::TokenGrid to_local(const seq::Vocabulary& v, tok::Modality m, std::span<const int> ids, int gh, int gw) {
  tok::TokenGrid g{gh, gw, m, {}};
  const int offset = m == tok::Modality::Camera ? v.camera_offset() : 0;
  for (int id : ids) g.indices.push_back(id - offset);
  return g;
}

/// Samples `len` tokens of one modality after a prefix.
template <typename T>
std::vector<int> sample_segment(tf::Transformer<T>& model, const seq::Vocabulary& v, const std::vector<int>& prefix,
                                std::span<const seq::PositionTag> tags, tok::Modality m, int len,
                                tf::SamplingConfig sampling, std::uint64_t seed) {
  const auto [lo, hi] = v.range(m);
  std::vector<tf::StepConstraint> steps(std::size_t(len), tf::StepConstraint{lo, hi, sampling});
  return tf::sample(model, prefix, tags, steps, seed, true);
}

struct Threshold {
  int within15 = 0;
  int within30 = 0;
  int total = 0;
  void add(double err_deg) {
    within15 += err_deg < 15.0;
    within30 += err_deg < 30.0;
    ++total;
  }
  void fail() { ++total; }
  double acc15() const { return total ? double(within15) / total : 0.0; }
  double acc30() const { return total ? double(within30) / total : 0.0; }
};

struct PoseReport {
  int pairs = 0;
  int failures = 0;
  double acc15 = 0, acc30 = 0, median_center_error = 0, median_rotation_error = 0;
  int ceiling_failures = 0;
  double ceiling_acc15 = 0, ceiling_acc30 = 0, ceiling_median_center_error = 0;
  double prior_acc15 = 0, prior_acc30 = 0;
  bool decomposition_ok = true;

  json to_json() const {
    return json{{"suite", "pose"},
                {"pairs", pairs},
                {"failures", failures},
                {"acc15", acc15},
                {"acc30", acc30},
                {"median_rotation_error_deg", median_rotation_error},
                {"median_center_error", median_center_error},
                {"ceiling_failures", ceiling_failures},
                {"ceiling_acc15", ceiling_acc15},
                {"ceiling_acc30", ceiling_acc30},
                {"ceiling_median_center_error", ceiling_median_center_error},
                {"prior_acc15", prior_acc15},
                {"prior_acc30", prior_acc30},
                {"decomposition_ok", decomposition_ok}};
  }
};

/// Chance accuracy of predicting one relative pose drawn from the camera
/// sampler for another, independently drawn one.
inline std::pair<double, double> prior_pose_baseline(const scenes::CameraSampler& sampler, int draws,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(nn::mix_seed(seed, 0x9b2));
  Threshold t;
  auto draw = [&]() {
    const auto spec = scenes::sample_scene(rng());
    const auto o = scenes::sample_camera(spec, sampler, rng());
    const auto c = scenes::sample_camera(spec, sampler, rng());
    return c.relative_to(o).rotation;
  };
  for (int i = 0; i < draws; ++i) {
    const auto a = draw();
    const auto b = draw();
    t.add(geometry::rotation_geodesic_error(a, b));
  }
  return {t.acc15(), t.acc30()};
}

template <typename T>
PoseReport evaluate_pose(tf::Transformer<T>& model, tok::Tokenizer<T>& image_tok, tok::Tokenizer<T>& camera_tok,
                         const data::Dataset& d, const EvalConfig& cfg, const std::string& split = "test") {
  const auto pairs = eval_pairs(d, split, cfg.max_pairs, cfg.seed);
  const seq::Vocabulary v{image_tok.config().codebook_size, camera_tok.config().codebook_size};
  const int gh = image_tok.config().grid_height(), gw = image_tok.config().grid_width(), len = gh * gw;
  const auto tags = seq::branch_tags(gh, gw);
  const auto& k = d.manifest.intrinsics;

  std::vector<const scenes::Image*> imgs;
  std::vector<geometry::CameraPose> truth;
  for (const auto& p : pairs) {
    imgs.push_back(&d.scenes[std::size_t(p.scene)].views[std::size_t(p.observation)]);
    imgs.push_back(&d.scenes[std::size_t(p.scene)].views[std::size_t(p.target)]);
    truth.push_back(pair_relative_pose(d, p));
  }
  const auto img_tokens = encode_images(image_tok, imgs);
  const auto cam_tokens = encode_poses(camera_tok, truth, k);

  PoseReport r;
  r.pairs = int(pairs.size());
  Threshold model_t, ceiling_t;
  std::vector<double> center_err, rot_err, ceiling_center;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<int> prefix = {v.bos()};
    for (int id : to_global(v, tok::Modality::Image, img_tokens[2 * i])) prefix.push_back(id);
    prefix.push_back(v.task_pose_first());
    for (int id : to_global(v, tok::Modality::Image, img_tokens[2 * i + 1])) prefix.push_back(id);
    const auto out = sample_segment(model, v, prefix, tags, tok::Modality::Camera, len,
                                    {cfg.pose_temperature, cfg.pose_top_k}, nn::mix_seed(cfg.seed, i));
    try {
      const auto pose = decode_pose(camera_tok, to_local(v, tok::Modality::Camera, out, gh, gw), k);
      const double e = geometry::rotation_geodesic_error(pose.rotation, truth[i].rotation);
      model_t.add(e);
      rot_err.push_back(e);
      center_err.push_back((pose.center - truth[i].center).norm());
    } catch (const geometry::SingularGeometry&) {
      model_t.fail();
      ++r.failures;
    }
    try {
      const auto pose = decode_pose(camera_tok, cam_tokens[i], k);
      ceiling_t.add(geometry::rotation_geodesic_error(pose.rotation, truth[i].rotation));
      ceiling_center.push_back((pose.center - truth[i].center).norm());
    } catch (const geometry::SingularGeometry&) {
      ceiling_t.fail();
      ++r.ceiling_failures;
    }
  }
  r.acc15 = model_t.acc15();
  r.acc30 = model_t.acc30();
  r.median_rotation_error = median(rot_err);
  r.median_center_error = median(center_err);
  r.ceiling_acc15 = ceiling_t.acc15();
  r.ceiling_acc30 = ceiling_t.acc30();
  r.ceiling_median_center_error = median(ceiling_center);
  std::tie(r.prior_acc15, r.prior_acc30) = prior_pose_baseline(d.manifest.gen.sampler, cfg.prior_mc_draws, cfg.seed);
  r.decomposition_ok = r.acc15 <= r.ceiling_acc15 && r.acc30 <= r.ceiling_acc30;
  return r;
}

struct NvsReport {
  int pairs = 0;
  double psnr = 0, ssim = 0, ceiling_psnr = 0, ceiling_ssim = 0;

  json to_json() const {
    return json{{"suite", "nvs"},         {"note", kEvalHeader},        {"pairs", pairs},
                {"psnr", psnr},           {"ssim", ssim},               {"ceiling_psnr", ceiling_psnr},
                {"ceiling_ssim", ceiling_ssim}};
  }
};

template <typename T>
NvsReport evaluate_nvs(tf::Transformer<T>& model, tok::Tokenizer<T>& image_tok, tok::Tokenizer<T>& camera_tok,
                       const data::Dataset& d, const EvalConfig& cfg, const std::string& split = "test") {
  const auto pairs = eval_pairs(d, split, cfg.max_pairs, cfg.seed);
  const seq::Vocabulary v{image_tok.config().codebook_size, camera_tok.config().codebook_size};
  const int gh = image_tok.config().grid_height(), gw = image_tok.config().grid_width(), len = gh * gw;
  const auto tags = seq::branch_tags(gh, gw);

  std::vector<const scenes::Image*> imgs;
  std::vector<geometry::CameraPose> truth;
  for (const auto& p : pairs) {
    imgs.push_back(&d.scenes[std::size_t(p.scene)].views[std::size_t(p.observation)]);
    imgs.push_back(&d.scenes[std::size_t(p.scene)].views[std::size_t(p.target)]);
    truth.push_back(pair_relative_pose(d, p));
  }
  const auto img_tokens = encode_images(image_tok, imgs);
  const auto cam_tokens = encode_poses(camera_tok, truth, d.manifest.intrinsics);

  NvsReport r;
  r.pairs = int(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::vector<int> prefix = {v.bos()};
    for (int id : to_global(v, tok::Modality::Image, img_tokens[2 * i])) prefix.push_back(id);
    prefix.push_back(v.task_cam_first());
    for (int id : to_global(v, tok::Modality::Camera, cam_tokens[i])) prefix.push_back(id);
    const auto out = sample_segment(model, v, prefix, tags, tok::Modality::Image, len,
                                    {cfg.nvs_temperature, cfg.nvs_top_k}, nn::mix_seed(cfg.seed, i));
    const auto pred = decode_image(image_tok, to_local(v, tok::Modality::Image, out, gh, gw));
    const auto recon = decode_image(image_tok, img_tokens[2 * i + 1]);
    const auto& gt = *imgs[2 * i + 1];
    r.psnr += psnr(pred, gt);
    r.ssim += ssim(pred, gt);
    r.ceiling_psnr += psnr(recon, gt);
    r.ceiling_ssim += ssim(recon, gt);
  }
  if (r.pairs) {
    r.psnr /= r.pairs;
    r.ssim /= r.pairs;
    r.ceiling_psnr /= r.pairs;
    r.ceiling_ssim /= r.pairs;
  }
  return r;
}

enum class PriorMode { Camera, Image };

struct PriorSamples {
  std::vector<geometry::CameraPose> poses;  // in the observation camera's frame, scaled units
  std::vector<scenes::Image> images;
  int invalid = 0;
};

/// n draws from p(c|o) or p(i|o), each with its own derived seed.
template <typename T>
PriorSamples sample_prior(tf::Transformer<T>& model, tok::Tokenizer<T>& image_tok, tok::Tokenizer<T>& camera_tok,
                          const scenes::Image& observation, PriorMode mode, int n, std::uint64_t seed,
                          tf::SamplingConfig sampling = {1.0, 0}) {
  const seq::Vocabulary v{image_tok.config().codebook_size, camera_tok.config().codebook_size};
  const int gh = image_tok.config().grid_height(), gw = image_tok.config().grid_width(), len = gh * gw;
  const auto tags = seq::branch_tags(gh, gw);
  const auto obs = encode_images(image_tok, {&observation}).front();
  std::vector<int> prefix = {v.bos()};
  for (int id : to_global(v, tok::Modality::Image, obs)) prefix.push_back(id);
  prefix.push_back(mode == PriorMode::Camera ? v.task_cam_first() : v.task_pose_first());
  const auto k = geometry::Intrinsics::fixed_default(camera_tok.config().width, camera_tok.config().height);
  PriorSamples out;
  for (int i = 0; i < n; ++i) {
    const auto m = mode == PriorMode::Camera ? tok::Modality::Camera : tok::Modality::Image;
    const auto ids = sample_segment(model, v, prefix, tags, m, len, sampling, nn::mix_seed(seed, std::uint64_t(i)));
    const auto grid = to_local(v, m, ids, gh, gw);
    if (mode == PriorMode::Camera) {
      try {
        out.poses.push_back(decode_pose(camera_tok, grid, k));
      } catch (const geometry::SingularGeometry&) {
        ++out.invalid;
      }
    } else {
      auto img = decode_image(image_tok, grid);
      const bool ok = std::all_of(img.data.begin(), img.data.end(),
                                  [](float x) { return std::isfinite(x) && x >= -1.0f && x <= 1.0f; });
      if (ok)
        out.images.push_back(std::move(img));
      else
        ++out.invalid;
    }
  }
  return out;
}

struct PriorElevationReport {
  int samples = 0;
  int invalid = 0;
  double w1_to_sampler = 0;
  double w1_to_uniform = 0;
  double mean_elevation = 0;
  double mean_sampler_elevation = 0;

  json to_json() const {
    return json{{"suite", "camera_prior"},       {"samples", samples},
                {"invalid", invalid},            {"w1_to_sampler", w1_to_sampler},
                {"w1_to_uniform", w1_to_uniform}, {"mean_elevation", mean_elevation},
                {"mean_sampler_elevation", mean_sampler_elevation}};
  }
};

/// Draws camera-prior samples over test observations and compares the world
/// elevation of the sampled cameras with the training cameras and with a
/// uniform elevation distribution over the sampler's range.
template <typename T>
PriorElevationReport camera_prior_elevations(tf::Transformer<T>& model, tok::Tokenizer<T>& image_tok,
                                             tok::Tokenizer<T>& camera_tok, const data::Dataset& d,
                                             const EvalConfig& cfg, const std::string& split = "test") {
  const auto& scenes = d.split(split);
  if (scenes.empty()) throw std::invalid_argument("empty evaluation split");
  const int views = d.manifest.gen.views_per_scene;
  std::vector<double> sampled;
  PriorElevationReport r;
  for (int i = 0; i < cfg.prior_samples; ++i) {
    const int s = scenes[std::size_t(i) % scenes.size()];
    const int view = int((std::size_t(i) / scenes.size()) % std::size_t(views));
    const auto& rec = d.scenes[std::size_t(s)];
    const auto draw = sample_prior(model, image_tok, camera_tok, rec.views[std::size_t(view)], PriorMode::Camera, 1,
                                   nn::mix_seed(cfg.seed ^ 0x77, std::uint64_t(i)), {cfg.prior_temperature, 0});
    r.invalid += draw.invalid;
    for (const auto& rel : draw.poses)
      sampled.push_back(geometry::back_axis_elevation(rec.poses[std::size_t(view)].rotation * rel.rotation));
  }
  std::vector<double> train;
  for (int s : d.split("train"))
    for (const auto& p : d.scenes[std::size_t(s)].poses) train.push_back(geometry::back_axis_elevation(p.rotation));
  const auto& smp = d.manifest.gen.sampler;
  r.samples = int(sampled.size());
  if (!sampled.empty()) {
    r.w1_to_sampler = wasserstein1(sampled, train);
    r.w1_to_uniform = wasserstein1(sampled, uniform_quantiles(smp.elevation_min_deg, smp.elevation_max_deg, 10000));
    for (double e : sampled) r.mean_elevation += e / double(sampled.size());
  }
  for (double e : train) r.mean_sampler_elevation += e / double(train.size());
  return r;
}

struct ImageTokenizerReport {
  int images = 0;
  double psnr = 0, ssim = 0, usage = 0;
  json to_json() const {
    return json{{"suite", "image_tokenizer"}, {"images", images}, {"psnr", psnr}, {"ssim", ssim}, {"usage", usage}};
  }
};

template <typename T>
ImageTokenizerReport evaluate_image_tokenizer(tok::Tokenizer<T>& t, const data::Dataset& d, const std::string& split) {
  std::vector<const scenes::Image*> imgs;
  for (int s : d.split(split))
    for (const auto& v : d.scenes[std::size_t(s)].views) imgs.push_back(&v);
  const auto grids = encode_images(t, imgs);
  ImageTokenizerReport r;
  r.images = int(imgs.size());
  quant::UsageCounter usage(t.config().codebook_size);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto recon = decode_image(t, grids[i]);
    r.psnr += psnr(recon, *imgs[i]) / double(imgs.size());
    r.ssim += ssim(recon, *imgs[i]) / double(imgs.size());
    usage.add(grids[i].indices);
  }
  if (!imgs.empty()) r.usage = quant::usage(usage);
  return r;
}

struct CameraTokenizerReport {
  int pairs = 0;
  int failures = 0;
  double median_rotation_error = 0, median_center_error = 0, acc15 = 0, usage = 0;
  json to_json() const {
    return json{{"suite", "camera_tokenizer"},
                {"pairs", pairs},
                {"failures", failures},
                {"median_rotation_error_deg", median_rotation_error},
                {"median_center_error", median_center_error},
                {"acc15", acc15},
                {"usage", usage}};
  }
};

template <typename T>
CameraTokenizerReport evaluate_camera_tokenizer(tok::Tokenizer<T>& t, const data::Dataset& d, const std::string& split,
                                                int max_pairs, std::uint64_t seed) {
  const auto pairs = eval_pairs(d, split, max_pairs, seed);
  std::vector<geometry::CameraPose> truth;
  for (const auto& p : pairs) truth.push_back(pair_relative_pose(d, p));
  const auto grids = encode_poses(t, truth, d.manifest.intrinsics);
  CameraTokenizerReport r;
  r.pairs = int(pairs.size());
  quant::UsageCounter usage(t.config().codebook_size);
  std::vector<double> rot, ctr;
  Threshold th;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    usage.add(grids[i].indices);
    try {
      const auto pose = decode_pose(t, grids[i], d.manifest.intrinsics);
      const double e = geometry::rotation_geodesic_error(pose.rotation, truth[i].rotation);
      rot.push_back(e);
      ctr.push_back((pose.center - truth[i].center).norm());
      th.add(e);
    } catch (const geometry::SingularGeometry&) {
      ++r.failures;
      rot.push_back(180.0);
      th.fail();
    }
  }
  r.median_rotation_error = median(rot);
  r.median_center_error = median(ctr);
  r.acc15 = th.acc15();
  if (!pairs.empty()) r.usage = quant::usage(usage);
  return r;
}

}  // namespace gst::harness
