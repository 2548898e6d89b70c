// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Trained artifacts are cached under GST_ACCEPTANCE_CACHE and reused
// (or resumed) when their configs match.
//
//   acceptance            run criteria 1-10
//   acceptance 5 6        run a subset

#include "gst/harness.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>

#include <sys/wait.h>
#include <unistd.h>

using namespace gst;
using namespace gst::harness;

namespace {

// ------------------------------------------------------------ tolerances

constexpr double kPoseRoundTripRad = 1e-6;
constexpr double kPoseRoundTripCenter = 1e-6;
constexpr double kPluckerInvariant = 1e-9;
constexpr double kGeometrySeconds = 60.0;
constexpr int kGeometryPoses = 1000;

constexpr int kQuantizerCases = 10000;
constexpr double kStraightThroughRel = 1e-3;
constexpr double kVqExample = 0.0625;

constexpr double kTransformerGradRel = 1e-2;
constexpr double kKvCacheRel = 1e-5;
constexpr int kKvPrefixes = 100;
constexpr double kRopeTol = 1e-9;
constexpr double kInitLossFraction = 0.05;

constexpr double kPackedInvariance = 1e-5;

constexpr double kCameraMedianDeg = 5.0;
constexpr double kCameraUsage = 0.5;
constexpr double kImagePsnr = 25.0;

constexpr double kPriorMultiple = 3.0;
constexpr double kCeilingFraction = 0.5;
constexpr double kNvsPsnrGap = 6.0;
constexpr double kNvsSsim = 0.6;

constexpr std::int64_t kCompareSteps = 10000;
constexpr int kPriorSamples = 200;

// ------------------------------------------------------------ run configs

const fs::path kCache = GST_ACCEPTANCE_CACHE;

data::GenConfig reference_data(int resolution) {
  data::GenConfig g;
  g.num_scenes = 2000;
  g.views_per_scene = 8;
  g.resolution = resolution;
  g.seed = 2024;
  return g;
}

tok::TokenizerConfig image_tokenizer(int res) {
  auto c = tok::TokenizerConfig::image(res, res);
  c.data_driven_init = true;
  c.dead_code_restart_every = 200;
  return c;
}

tok::TokenizerConfig camera_tokenizer(int res) {
  auto c = tok::TokenizerConfig::camera(res, res);
  c.data_driven_init = true;
  c.dead_code_restart_every = 200;
  return c;
}

tok::TokenizerTrainConfig tokenizer_train(std::int64_t steps, std::uint64_t seed) {
  tok::TokenizerTrainConfig t;
  t.steps = steps;
  t.batch_size = 32;
  t.schedule = {1e-3, 1e-4, 0.8, 0};
  t.seed = seed;
  return t;
}

tf::ModelConfig desk_model(const seq::Vocabulary& v, int grid) {
  tf::ModelConfig m;
  m.num_layers = 4;
  m.model_dim = 128;
  m.num_heads = 4;
  m.vocab_size = v.size();
  m.max_seq_len = seq::packed_length(grid);
  return m;
}

TrainConfig gst_train(TrainMode mode, std::int64_t steps) {
  TrainConfig t;
  t.mode = mode;
  t.steps = steps;
  t.batch_size = 32;
  t.schedule = {5e-4, 5e-5, 0.8, 500};
  t.seed = 7;
  return t;
}

// ------------------------------------------------------------ plumbing

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

data::Dataset dataset(const std::string& name, const data::GenConfig& g) {
  const fs::path dir = kCache / name;
  const fs::path manifest = dir / "manifest.json";
  bool ready = false;
  if (fs::exists(manifest)) {
    const auto m = data::parse_manifest(data::read_text(manifest));
    ready = data::generation_json(m.gen) == data::generation_json(g);
  }
  if (!ready) {
    progress("generating " + name);
    fs::remove_all(dir);
    data::gen_dataset(g, dir);
  }
  return data::load_dataset(dir);
}

std::function<void(const json&)> logger(const std::string& label, int every_windows) {
  auto count = std::make_shared<int>(0);
  return [label, every_windows, count](const json& r) {
    if (++*count % every_windows) return;
    progress(label + " step " + std::to_string(r.at("step").get<std::int64_t>() + 1) + " loss " +
             std::to_string(r.at("window_loss").get<double>()));
  };
}

tok::Tokenizer<float> tokenizer(const std::string& name, const data::Dataset& d, const tok::TokenizerConfig& cfg,
                                const tok::TokenizerTrainConfig& tc) {
  const fs::path ckpt = kCache / (name + ".ckpt");
  RunOptions o;
  o.checkpoint_out = ckpt;
  o.metrics_out = kCache / (name + ".jsonl");
  o.save_every = 250;
  o.on_log = logger(name, 10);
  if (fs::exists(ckpt)) {
    const auto c = load_checkpoint(ckpt);
    if (c.config.at("tokenizer") == to_json(cfg) && c.config.at("train") == to_json(tc)) {
      if (c.step >= tc.steps) return load_tokenizer<float>(c);
      progress("resuming " + name + " at step " + std::to_string(c.step));
      o.resume = ckpt;
    }
  }
  if (!o.resume) progress("training " + name);
  return train_tokenizer<float>(d, cfg, tc, o);
}

struct GstRun {
  tf::Transformer<float> model;
  fs::path metrics;
  std::optional<std::string> failure;
};

GstRun gst(const std::string& name, const TokenizedData& td, const tf::ModelConfig& mc, const TrainConfig& cfg,
           const GstMeta& meta) {
  const fs::path ckpt = kCache / (name + ".ckpt");
  RunOptions o;
  o.checkpoint_out = ckpt;
  o.metrics_out = kCache / (name + ".jsonl");
  o.save_every = 500;
  o.on_log = logger(name, 20);
  if (fs::exists(ckpt)) {
    const auto c = load_checkpoint(ckpt);
    if (c.config.at("train") == to_json(cfg) && c.config.at("model") == to_json(mc)) {
      if (c.step >= cfg.steps) return {load_transformer<float>(c), o.metrics_out, std::nullopt};
      progress("resuming " + name + " at step " + std::to_string(c.step));
      o.resume = ckpt;
    }
  }
  if (!o.resume) progress("training " + name);
  tf::Transformer<float> model(mc, cfg.seed);
  try {
    train_gst(model, td, cfg, meta, o);
  } catch (const NonFiniteLoss& e) {
    return {std::move(model), o.metrics_out, std::string(e.what())};
  }
  return {std::move(model), o.metrics_out, std::nullopt};
}

/// Artifacts shared by criteria 7-9: the 16×16 profile.
struct Profile16 {
  data::Dataset data;
  tok::Tokenizer<float> image_tok;
  tok::Tokenizer<float> camera_tok;
  TokenizedData td;
  GstMeta meta;
};

Profile16& profile16() {
  static std::unique_ptr<Profile16> p;
  if (!p) {
    auto d = dataset("data16", reference_data(16));
    auto it = tokenizer("image_tokenizer16", d, image_tokenizer(16), tokenizer_train(4000, 3));
    auto ct = tokenizer("camera_tokenizer16", d, camera_tokenizer(16), tokenizer_train(4000, 4));
    auto td = tokenize_scenes(d, d.split("train"), it, ct);
    GstMeta meta{td.grid_height, td.grid_width, it.config().codebook_size, ct.config().codebook_size, d.manifest.scale,
                 json{{"generation", data::generation_json(d.manifest.gen)}}};
    p.reset(new Profile16{std::move(d), std::move(it), std::move(ct), std::move(td), meta});
  }
  return *p;
}

tf::Transformer<float>& reference_model() {
  static std::optional<tf::Transformer<float>> m;
  if (!m) {
    auto& p = profile16();
    auto run = gst("gst16_reference", p.td, desk_model(p.td.vocab, p.td.segment_length()),
                   gst_train(TrainMode::JointOrdered, 30000), p.meta);
    if (run.failure) throw std::runtime_error("reference run failed: " + *run.failure);
    m.emplace(std::move(run.model));
  }
  return *m;
}

// ------------------------------------------------------------ criteria

Outcome geometry_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> c(-3.0, 3.0);
  const auto k = geometry::Intrinsics::fixed_default(8, 8);
  double rot = 0, ctr = 0, inv = 0;
  for (int t = 0; t < kGeometryPoses; ++t) {
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    const geometry::CameraPose p{q.toRotationMatrix(), geometry::Vec3(c(rng), c(rng), c(rng))};
    const auto map = geometry::pose_to_raymap(p, k);
    inv = std::max(inv, map.max_constraint_violation());
    const auto back = geometry::raymap_to_pose(map, k);
    rot = std::max(rot, geometry::rotation_geodesic_error(back.rotation, p.rotation) * geometry::kPi / 180.0);
    ctr = std::max(ctr, (back.center - p.center).norm());
  }
  const double secs = seconds_since(t0);
  return {rot < kPoseRoundTripRad && ctr < kPoseRoundTripCenter && inv < kPluckerInvariant && secs < kGeometrySeconds,
          fmt("max rotation error %.2e rad, max center error %.2e, max invariant violation %.2e, %.2f s", rot, ctr, inv,
              secs)};
}

Outcome quantizer_suite() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  int mismatches = 0;
  for (int t = 0; t < kQuantizerCases; ++t) {
    const int kk = std::uniform_int_distribution<int>(1, 64)(rng);
    const int d = std::uniform_int_distribution<int>(1, 8)(rng);
    quant::Codebook<double> book(kk, d);
    for (auto& v : book.vectors) v = n(rng);
    std::vector<double> f(static_cast<std::size_t>(d));
    for (auto& v : f) v = n(rng);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < kk; ++i) {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        const double diff = f[std::size_t(j)] - book.vectors[std::size_t(i * d + j)];
        s += diff * diff;
      }
      if (s < best_d) {
        best_d = s;
        best = i;
      }
    }
    mismatches += quant::nearest_code<double>(f, book) != best;
  }

  // Straight-through: finite differences on encoder parameters of a small
  // tokenizer with the code assignment held fixed.
  auto cfg = tok::TokenizerConfig::image(8, 8);
  cfg.base_channels = 3;
  cfg.codebook_size = 6;
  cfg.codebook_dim = 2;
  tok::Tokenizer<double> t(cfg, 11);
  nn::Tensor4<double> x(2, 3, 8, 8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : x.data) v = u(rng);
  auto params = t.parameters();
  nn::zero_grads(params);
  const auto base = t.train_step(x);
  const nn::Tensor4<double> f0 = t.last_features();
  bool index_moved = false;
  auto objective = [&]() {
    nn::Tensor4<double> f = t.encode_features(x, false);
    auto qs = t.quantize_batch(f);
    nn::Tensor4<double> z(f.n, f.c, f.h, f.w);
    std::vector<int> idx;
    double commit = 0;
    for (int i = 0; i < f.n; ++i) {
      tok::hwc_to_chw<double, double>(std::span<const double>(qs[std::size_t(i)].quantized), f.h, f.w, f.c, z.sample(i));
      idx.insert(idx.end(), qs[std::size_t(i)].indices.begin(), qs[std::size_t(i)].indices.end());
      commit += cfg.commitment_weight * qs[std::size_t(i)].commitment_loss / f.n;
    }
    index_moved |= idx != base.indices;
    for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += f.data[i] - f0.data[i];
    const auto y = t.decode_features(z, false);
    return tok::image_reconstruction_loss<double>(x.data, y.data) + commit;
  };
  double worst = 0;
  int checked = 0;
  const double h = 1e-6;
  for (auto* p : params) {
    if (p->name.rfind("enc.", 0) != 0) continue;
    const std::size_t stride = std::max<std::size_t>(1, p->size() / 7);
    for (std::size_t i = 0; i < p->size(); i += stride) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double lp = objective();
      p->value[i] = keep - h;
      const double lm = objective();
      p->value[i] = keep;
      const double fd = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(fd - p->grad[i]) / std::max({std::abs(fd), std::abs(p->grad[i]), 1e-6}));
      ++checked;
    }
  }

  quant::Codebook<double> two(2, 2);
  two.vectors = {0, 0, 1, 1};
  const std::vector<double> f = {0.2, 0.1};
  const double vq = quant::vq_loss(quant::quantize<double>(f, 1, 1, two), 0.25);

  return {mismatches == 0 && worst < kStraightThroughRel && !index_moved && checked > 0 && std::abs(vq - kVqExample) < 1e-15,
          fmt("%d/%d nearest-code mismatches, straight-through worst rel error %.2e over %d encoder weights, vq example %.4f",
              mismatches, kQuantizerCases, worst, checked, vq)};
}

std::vector<int> random_ids(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (auto& v : ids) v = pick(rng);
  return ids;
}

Outcome transformer_suite() {
  std::mt19937_64 rng(3);
  // Full finite-difference gradient check, 2 layers, dim 16.
  tf::ModelConfig c;
  c.num_layers = 2;
  c.model_dim = 16;
  c.num_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 64;
  tf::Transformer<double> model(c, 3);
  std::normal_distribution<double> n3(0.0, 0.3);
  for (auto* p : model.parameters())
    for (auto& v : p->value) v = p->decay ? n3(rng) : 1.0 + 0.3 * n3(rng);
  const int len = 7;
  tf::Batch b;
  b.batch_size = 2;
  b.length = len;
  b.ids = random_ids(rng, 2 * len, 11);
  b.targets = random_ids(rng, 2 * len, 11);
  b.weights.assign(std::size_t(2 * len), 1.0f);
  b.weights[0] = 0.0f;
  std::vector<seq::PositionTag> tags;
  for (int t = 0; t < len; ++t) tags.push_back({t / 3, t % 3, t % 5});
  auto mask = seq::causal_mask(seq::MaskMode::PackedJoint, len);
  mask.set(5, 2, false);
  auto params = model.parameters();
  nn::zero_grads(params);
  model.loss_and_backward(b, tags, mask);
  double grad_worst = 0;
  for (auto* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + 1e-4;
      const double lp = model.loss(b, tags, mask);
      p->value[i] = keep - 1e-4;
      const double lm = model.loss(b, tags, mask);
      p->value[i] = keep;
      const double fd = (lp - lm) / 2e-4;
      grad_worst = std::max(grad_worst, std::abs(fd - p->grad[i]) / std::max({std::abs(fd), std::abs(p->grad[i]), 1e-6}));
    }

  // KV cache against full recompute.
  const seq::Vocabulary v{40, 24};
  tf::ModelConfig kc = c;
  kc.vocab_size = v.size();
  kc.model_dim = 32;
  kc.num_heads = 4;
  tf::Transformer<float> fm(kc, 9);
  std::normal_distribution<double> n2(0.0, 0.2);
  for (auto* p : fm.parameters())
    for (auto& x : p->value) x = float(double(x) + n2(rng));
  const auto btags = seq::branch_tags(2, 2);
  const int total = int(btags.size());
  const auto bmask = seq::causal_mask(seq::MaskMode::OrderedCausal, total);
  double kv_worst = 0;
  for (int t = 0; t < kKvPrefixes; ++t) {
    const auto ids = random_ids(rng, total, v.size());
    const auto full = fm.forward(ids, 1, btags, bmask, false);
    tf::KVCache<float> cache(kc);
    const int prefix = std::uniform_int_distribution<int>(1, total - 1)(rng);
    auto got = fm.forward_cached(std::span<const int>(ids).first(std::size_t(prefix)), btags, bmask, cache);
    auto rel = [&](auto row, int p) {
      return double((row - full.row(p)).cwiseAbs().maxCoeff()) / double(full.row(p).cwiseAbs().maxCoeff());
    };
    for (int p = 0; p < prefix; ++p) kv_worst = std::max(kv_worst, rel(got.row(p), p));
    for (int p = prefix; p < total; ++p) {
      got = fm.forward_cached(std::span<const int>(ids).subspan(std::size_t(p), 1), btags, bmask, cache);
      kv_worst = std::max(kv_worst, rel(got.row(0), p));
    }
  }

  // 2D RoPE: scores depend only on the relative offset.
  std::normal_distribution<double> n1(0.0, 1.0);
  std::uniform_int_distribution<int> pos(0, 20), shift(0, 20);
  double rope_worst = 0;
  for (int t = 0; t < 1000; ++t) {
    nn::Matrix<double> q(1, 16), k(1, 16);
    for (int j = 0; j < 16; ++j) {
      q(0, j) = n1(rng);
      k(0, j) = n1(rng);
    }
    const int r1 = pos(rng), c1 = pos(rng), r2 = pos(rng), c2 = pos(rng), dr = shift(rng), dc = shift(rng);
    const std::vector<seq::PositionTag> a = {{r1, c1, 0}}, bb = {{r2, c2, 0}};
    const std::vector<seq::PositionTag> a2 = {{r1 + dr, c1 + dc, 0}}, b2 = {{r2 + dr, c2 + dc, 0}};
    const double d1 = tf::rope2d(q, a, 1e4).row(0).dot(tf::rope2d(k, bb, 1e4).row(0));
    const double d2 = tf::rope2d(q, a2, 1e4).row(0).dot(tf::rope2d(k, b2, 1e4).row(0));
    rope_worst = std::max(rope_worst, std::abs(d1 - d2));
  }

  // Initial loss of the desk model over the reference vocabulary.
  const seq::Vocabulary rv{512, 512};
  tf::Transformer<float> init(desk_model(rv, 16), 7);
  tf::Batch ib;
  ib.batch_size = 4;
  ib.length = 50;
  ib.ids = random_ids(rng, 200, rv.size());
  ib.targets = random_ids(rng, 200, rv.size());
  ib.weights.assign(200, 1.0f);
  const double l0 = init.loss(ib, seq::branch_tags(4, 4), seq::build_attention_mask(seq::MaskMode::OrderedCausal, 16));
  const double lnv = std::log(double(rv.size()));

  return {grad_worst < kTransformerGradRel && kv_worst < kKvCacheRel && rope_worst < kRopeTol &&
              std::abs(l0 - lnv) < kInitLossFraction * lnv,
          fmt("grad check worst rel %.2e, kv-cache worst rel %.2e, rope offset worst %.2e, init loss %.4f vs ln V %.4f",
              grad_worst, kv_worst, rope_worst, l0, lnv)};
}

Outcome mask_suite() {
  const char* golden[8] = {"10000000", "11000000", "11100000", "11110000",
                           "11111000", "11000100", "11000110", "11000111"};
  const auto m = seq::build_attention_mask(seq::MaskMode::PackedJoint, 1);
  bool golden_ok = m.size() == 8;
  for (int q = 0; golden_ok && q < 8; ++q)
    for (int k = 0; k < 8; ++k) golden_ok &= m.allowed(q, k) == (golden[q][k] == '1');
  // The rule: causal, and the second branch (from 3L+2) cannot see L+1 .. 3L+1.
  bool rule_ok = true;
  for (int len : {1, 2, 4, 16, 64}) {
    const auto pm = seq::build_attention_mask(seq::MaskMode::PackedJoint, len);
    for (int q = 0; q < pm.size(); ++q)
      for (int k = 0; k < pm.size(); ++k) {
        const bool hidden = q >= 3 * len + 2 && k >= len + 1 && k <= 3 * len + 1;
        rule_ok &= pm.allowed(q, k) == (k <= q && !hidden);
      }
  }

  const seq::Vocabulary v{30, 20};
  tf::ModelConfig c;
  c.num_layers = 3;
  c.model_dim = 32;
  c.num_heads = 4;
  c.vocab_size = v.size();
  c.max_seq_len = 64;
  tf::Transformer<float> model(c, 12);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto* p : model.parameters())
    if (p->decay)
      for (auto& x : p->value) x = float(n(rng));
  const int gh = 2, gw = 2, len = 4;
  const auto tags = seq::packed_tags(gh, gw);
  const auto mask = seq::build_attention_mask(seq::MaskMode::PackedJoint, len);
  auto grid = [&](tok::Modality mod, int k) {
    tok::TokenGrid g{gh, gw, mod, std::vector<int>(len)};
    for (auto& x : g.indices) x = std::uniform_int_distribution<int>(0, k - 1)(rng);
    return g;
  };
  double worst = 0;
  bool first_branch_moves = true;
  for (int t = 0; t < 20; ++t) {
    const auto s = seq::build_packed_sequence(v, grid(tok::Modality::Image, 30), grid(tok::Modality::Image, 30),
                                              grid(tok::Modality::Camera, 20));
    auto ids = s.ids;
    const auto base = model.forward(ids, 1, tags, mask, false);
    std::shuffle(ids.begin() + (len + 2), ids.begin() + (3 * len + 2), rng);
    std::swap(ids[std::size_t(len + 2)], ids[std::size_t(3 * len + 1)]);
    const auto perm = model.forward(ids, 1, tags, mask, false);
    for (int p = 3 * len + 2; p < 5 * len + 3; ++p)
      worst = std::max(worst, double((perm.row(p) - base.row(p)).cwiseAbs().maxCoeff()) /
                                  double(base.row(p).cwiseAbs().maxCoeff()));
    first_branch_moves &= (perm.row(3 * len + 1) - base.row(3 * len + 1)).cwiseAbs().maxCoeff() > 0.0f;
  }
  return {golden_ok && rule_ok && worst < kPackedInvariance && first_branch_moves,
          fmt("golden 8x8 %s, rule %s, second-branch worst rel change %.2e", golden_ok ? "match" : "MISMATCH",
              rule_ok ? "holds" : "VIOLATED", worst)};
}

Outcome camera_tokenizer_run() {
  const auto d = dataset("data32", reference_data(32));
  auto t = tokenizer("camera_tokenizer32", d, camera_tokenizer(32), tokenizer_train(5000, 1));
  const auto r = evaluate_camera_tokenizer(t, d, "test", 2000, 1);
  return {r.median_rotation_error < kCameraMedianDeg && r.usage > kCameraUsage,
          fmt("held-out median rotation error %.3f deg, usage %.1f%% (K=%d, d=%d, %d pairs, %d failures)",
              r.median_rotation_error, 100 * r.usage, t.config().codebook_size, t.config().codebook_dim, r.pairs,
              r.failures)};
}

Outcome image_tokenizer_run() {
  const auto d = dataset("data32", reference_data(32));
  auto t = tokenizer("image_tokenizer32", d, image_tokenizer(32), tokenizer_train(5000, 2));
  const auto r = evaluate_image_tokenizer(t, d, "test");
  return {r.psnr > kImagePsnr,
          fmt("held-out PSNR %.2f dB, SSIM %.3f, usage %.1f%% over %d images", r.psnr, r.ssim, 100 * r.usage, r.images)};
}

Outcome end_to_end_run() {
  auto& p = profile16();
  auto& model = reference_model();
  EvalConfig e;
  e.max_pairs = 200;
  e.seed = 1;
  const auto pose = evaluate_pose(model, p.image_tok, p.camera_tok, p.data, e);
  const auto nvs = evaluate_nvs(model, p.image_tok, p.camera_tok, p.data, e);
  const bool a = pose.acc30 >= kPriorMultiple * pose.prior_acc30 && pose.acc30 >= kCeilingFraction * pose.ceiling_acc30;
  const bool b = nvs.psnr >= nvs.ceiling_psnr - kNvsPsnrGap && nvs.ssim > kNvsSsim;
  return {a && b, fmt("(a) @30 %.3f vs prior %.3f and ceiling %.3f (@15 %.3f, ceiling %.3f, failures %d); "
                      "(b) PSNR %.2f vs ceiling %.2f dB, SSIM %.3f; %d pairs",
                      pose.acc30, pose.prior_acc30, pose.ceiling_acc30, pose.acc15, pose.ceiling_acc15, pose.failures,
                      nvs.psnr, nvs.ceiling_psnr, nvs.ssim, pose.pairs)};
}

double variance(const std::vector<double>& x) {
  double m = 0, s = 0;
  for (double v : x) m += v / double(x.size());
  for (double v : x) s += (v - m) * (v - m) / double(x.size());
  return s;
}

Outcome joint_vs_alternating() {
  auto& p = profile16();
  const auto mc = desk_model(p.td.vocab, p.td.segment_length());
  auto joint = gst("gst16_joint", p.td, mc, gst_train(TrainMode::JointOrdered, kCompareSteps), p.meta);
  auto alt = gst("gst16_alternating", p.td, mc, gst_train(TrainMode::Alternating, kCompareSteps), p.meta);
  const auto jl = read_metrics(joint.metrics), al = read_metrics(alt.metrics);
  const fs::path report = kCache / "joint_vs_alternating.csv";
  std::ofstream out(report);
  out << "step,joint_loss,joint_grad_norm,alternating_loss,alternating_grad_norm\n";
  std::vector<double> jg, ag;
  for (std::size_t i = 0; i < std::max(jl.size(), al.size()); ++i) {
    const json& ref = i < jl.size() ? jl[i] : al[i];
    out << ref.at("step").get<std::int64_t>() + 1;
    for (const auto* series : {&jl, &al}) {
      if (i < series->size())
        out << ',' << (*series)[i].at("window_loss").get<double>() << ',' << (*series)[i].at("window_grad_norm").get<double>();
      else
        out << ",,";
    }
    out << '\n';
    if (i < jl.size()) jg.push_back(jl[i].at("window_grad_norm").get<double>());
    if (i < al.size()) ag.push_back(al[i].at("window_grad_norm").get<double>());
  }
  out.close();
  const std::size_t windows = std::size_t(kCompareSteps / 50);
  bool finite = true;
  for (const auto& r : jl) finite &= std::isfinite(r.at("window_loss").get<double>()) && std::isfinite(r.at("window_grad_norm").get<double>());
  const bool complete = !joint.failure && jl.size() == windows && finite && al.size() > 0;
  const double vj = variance(jg), va = variance(ag);
  return {complete && fs::exists(report),
          fmt("joint %zu/%zu windows%s, alternating %zu windows%s; grad-norm variance joint %.4g vs alternating %.4g "
              "(expected direction %s); series in %s",
              jl.size(), windows, joint.failure ? " (NonFiniteLoss)" : "", al.size(), alt.failure ? " (NonFiniteLoss)" : "",
              vj, va, vj < va ? "observed" : "not observed", report.c_str())};
}

Outcome camera_prior() {
  auto& p = profile16();
  auto& model = reference_model();
  EvalConfig e;
  e.seed = 1;
  e.prior_samples = kPriorSamples;
  e.prior_temperature = 1.0;
  const auto r = camera_prior_elevations(model, p.image_tok, p.camera_tok, p.data, e);
  return {r.samples + r.invalid == kPriorSamples && r.w1_to_sampler < r.w1_to_uniform,
          fmt("W1 to sampler %.2f deg vs uniform %.2f deg; mean elevation %.1f (sampler %.1f); %d samples, %d invalid",
              r.w1_to_sampler, r.w1_to_uniform, r.mean_elevation, r.mean_sampler_elevation, r.samples, r.invalid)};
}

// Runs the CLI; returns its exit code and stdout.
std::pair<int, std::string> cli(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "cli.out";
  const std::string cmd = "cd '" + dir.string() + "' && '" GST_CLI_PATH "' " + args + " > '" + out.string() + "' 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, data::read_text(out)};
}

std::string tree_digest(const fs::path& root) {
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) all += fs::relative(f, root).string() + '\0' + data::read_text(f) + '\0';
  return all;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / ("gst_acceptance_cli_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  data::write_text(dir / "cfg.json", R"({
    "image_tokenizer": {"base_channels": 8, "codebook_size": 32, "codebook_dim": 4, "data_driven_init": true},
    "camera_tokenizer": {"base_channels": 8, "codebook_size": 32, "codebook_dim": 4, "data_driven_init": true},
    "image_train": {"steps": 6, "batch_size": 4, "log_every": 2},
    "camera_train": {"steps": 6, "batch_size": 4, "log_every": 2},
    "model": {"num_layers": 1, "model_dim": 16, "num_heads": 2},
    "train": {"steps": 8, "batch_size": 2, "log_every": 2},
    "eval": {"max_pairs": 4, "prior_mc_draws": 500, "prior_samples": 3}
  })");
  std::vector<std::string> failed;
  auto ok = [&](const std::string& what, bool cond) {
    if (!cond) failed.push_back(what);
  };
  auto run = [&](const std::string& args) {
    const auto [code, out] = cli(dir, args);
    ok("exit 0: " + args, code == 0);
    return out;
  };
  auto file = [&](const std::string& name) { return fs::exists(dir / name) ? data::read_text(dir / name) : std::string(); };

  run("gen-data --scenes 12 --views 4 --resolution 16 --out d1 --seed 7");
  run("gen-data --scenes 12 --views 4 --resolution 16 --out d2 --seed 7");
  ok("gen-data trees", tree_digest(dir / "d1") == tree_digest(dir / "d2"));

  int checked = 0;
  for (const char* kind : {"image", "camera"}) {
    const std::string base = std::string("train-") + kind + "-tokenizer --config cfg.json --data d1 ";
    run(base + "--out " + kind + "_a.ckpt --metrics-out " + kind + "_a.jsonl");
    run(base + "--out " + kind + "_b.ckpt --metrics-out " + kind + "_b.jsonl");
    run(base + "--out " + kind + "_c.ckpt --metrics-out " + kind + "_c.jsonl --stop-after 3");
    run(base + "--out " + kind + "_c.ckpt --metrics-out " + kind + "_c.jsonl --resume " + kind + "_c.ckpt");
    for (const char* v : {"_b", "_c"}) {
      ok(std::string(kind) + v + " checkpoint", file(std::string(kind) + "_a.ckpt") == file(std::string(kind) + v + ".ckpt"));
      ok(std::string(kind) + v + " metrics", file(std::string(kind) + "_a.jsonl") == file(std::string(kind) + v + ".jsonl"));
      checked += 2;
    }
  }
  for (const char* mode : {"JOINT_ORDERED", "JOINT_PACKED", "ALTERNATING"}) {
    const std::string base = std::string("train-gst --config cfg.json --data d1 --image-tokenizer image_a.ckpt "
                                         "--camera-tokenizer camera_a.ckpt --mode ") + mode + " ";
    run(base + "--out g_a.ckpt --metrics-out g_a.jsonl");
    run(base + "--out g_b.ckpt --metrics-out g_b.jsonl");
    run(base + "--out g_c.ckpt --metrics-out g_c.jsonl --stop-after 5");
    run(base + "--out g_c.ckpt --metrics-out g_c.jsonl --resume g_c.ckpt");
    for (const char* v : {"_b", "_c"}) {
      ok(std::string(mode) + v + " checkpoint", file("g_a.ckpt") == file(std::string("g") + v + ".ckpt"));
      ok(std::string(mode) + v + " metrics", file("g_a.jsonl") == file(std::string("g") + v + ".jsonl"));
      checked += 2;
    }
  }
  const std::string ev = "eval --config cfg.json --checkpoint g_a.ckpt --data d1 --suite all";
  ok("eval rerun", run(ev) == run(ev));
  const std::string obs = "--observation d1/scenes/000000/view_00.png --checkpoint g_a.ckpt --seed 3 ";
  run("sample " + obs + "--mode pose --target d1/scenes/000000/view_01.png --out p1.json");
  run("sample " + obs + "--mode pose --target d1/scenes/000000/view_01.png --out p2.json");
  ok("sample pose", file("p1.json") == file("p2.json") && !file("p1.json").empty());
  run("sample " + obs + "--mode nvs --camera p1.json --out n1.png");
  run("sample " + obs + "--mode nvs --camera p1.json --out n2.png");
  ok("sample nvs", file("n1.png") == file("n2.png") && !file("n1.png").empty());
  run("sample " + obs + "--mode camera-prior --n 4 --out c1.json");
  run("sample " + obs + "--mode camera-prior --n 4 --out c2.json");
  ok("sample camera-prior", file("c1.json") == file("c2.json") && !file("c1.json").empty());
  run("sample " + obs + "--mode image-prior --n 2 --out i1");
  run("sample " + obs + "--mode image-prior --n 2 --out i2");
  ok("sample image-prior", tree_digest(dir / "i1") == tree_digest(dir / "i2"));
  ok("inspect rerun", run("inspect-checkpoint g_a.ckpt") == run("inspect-checkpoint g_a.ckpt"));
  fs::remove_all(dir);

  std::string detail = fmt("%d checkpoint/metrics comparisons, dataset, eval, sample and inspect reruns", checked);
  if (!failed.empty()) {
    detail += "; differing:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
  };
  const Criterion all[] = {
      {1, "geometry suite", geometry_suite},
      {2, "quantizer suite", quantizer_suite},
      {3, "transformer suite", transformer_suite},
      {4, "mask semantics", mask_suite},
      {5, "camera tokenizer desk run", camera_tokenizer_run},
      {6, "image tokenizer desk run", image_tokenizer_run},
      {7, "end-to-end desk run", end_to_end_run},
      {8, "joint vs alternating", joint_vs_alternating},
      {9, "camera-prior sampling", camera_prior},
      {10, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  fs::create_directories(kCache);

  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %s  %-28s %s (%.1f s)\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
