#pragma once

// Training drivers: tokenizer runs over a dataset, pre-tokenization of view
// pairs, and the sequence-model trainer with its four-conditional schedule.

#include "gst/dataset.hpp"
#include "gst/harness/checkpoint.hpp"
#include "gst/harness/config.hpp"
#include "gst/harness/metrics.hpp"
#include "gst/sequence.hpp"
#include "gst/tokenizers.hpp"
#include "gst/transformer.hpp"

#include <functional>
#include <optional>
#include <sstream>

namespace gst::harness {

using tok::NonFiniteLoss;

struct PairRef {
  int scene = 0;
  int observation = 0;
  int target = 0;
  bool operator==(const PairRef&) const = default;
};

/// Ordered view pairs (o ≠ t) within the given scenes that pass the distance filter.
inline std::vector<PairRef> enumerate_pairs(const data::Dataset& d, const std::vector<int>& scenes) {
  const auto norm = d.normalization();
  std::vector<PairRef> out;
  for (int s : scenes) {
    const auto& poses = d.scenes[std::size_t(s)].poses;
    for (int o = 0; o < int(poses.size()); ++o)
      for (int t = 0; t < int(poses.size()); ++t) {
        if (o == t) continue;
        geometry::CameraPose a = poses[std::size_t(o)], b = poses[std::size_t(t)];
        a.center *= norm.scale;
        b.center *= norm.scale;
        if (geometry::filter_pair(a, b, norm)) out.push_back({s, o, t});
      }
  }
  return out;
}

inline geometry::CameraPose pair_relative_pose(const data::Dataset& d, const PairRef& p) {
  const auto& poses = d.scenes[std::size_t(p.scene)].poses;
  return data::relative_scaled_pose(poses[std::size_t(p.observation)], poses[std::size_t(p.target)], d.manifest.scale);
}

inline std::string rng_state_string(std::uint64_t seed, std::int64_t step) {
  std::mt19937_64 rng(nn::mix_seed(seed, std::uint64_t(step)));
  std::ostringstream os;
  os << rng;
  return os.str();
}

// ---------------------------------------------------------------- tokenizers

inline std::string tokenizer_kind(tok::Modality m) {
  return m == tok::Modality::Image ? "image_tokenizer" : "camera_tokenizer";
}

template <typename T>
tok::BatchSource<T> image_batch_source(const data::Dataset& d, std::vector<int> scenes, int batch) {
  return [&d, scenes = std::move(scenes), batch](std::int64_t, std::mt19937_64& rng) {
    const int res = d.manifest.intrinsics.height;
    nn::Tensor4<T> x(batch, 3, res, res);
    std::uniform_int_distribution<std::size_t> pick_scene(0, scenes.size() - 1);
    std::uniform_int_distribution<int> pick_view(0, d.manifest.gen.views_per_scene - 1);
    for (int i = 0; i < batch; ++i) {
      const auto& rec = d.scenes[std::size_t(scenes[pick_scene(rng)])];
      const auto& img = rec.views[std::size_t(pick_view(rng))];
      tok::hwc_to_chw<T, float>(img.data, res, res, 3, x.sample(i));
    }
    return x;
  };
}

template <typename T>
tok::BatchSource<T> camera_batch_source(const data::Dataset& d, std::vector<PairRef> pairs,
                                        const tok::Tokenizer<T>& tokenizer, int batch) {
  if (pairs.empty()) throw std::invalid_argument("no view pairs pass the distance filter");
  return [&d, &tokenizer, pairs = std::move(pairs), batch](std::int64_t, std::mt19937_64& rng) {
    const auto& k = d.manifest.intrinsics;
    nn::Tensor4<T> x(batch, 6, k.height, k.width);
    std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
    for (int i = 0; i < batch; ++i) {
      const auto map = geometry::pose_to_raymap(pair_relative_pose(d, pairs[pick(rng)]), k);
      const auto in = tokenizer.raymap_input(map);
      tok::hwc_to_chw<T, T>(in, k.height, k.width, 6, x.sample(i));
    }
    return x;
  };
}

template <typename T>
Checkpoint tokenizer_checkpoint(tok::Tokenizer<T>& tokenizer, tok::TokenizerTrainer<T>* trainer,
                                const tok::TokenizerTrainConfig& tc, const data::Dataset* d) {
  Checkpoint c;
  c.kind = tokenizer_kind(tokenizer.config().modality);
  c.config = json{{"tokenizer", to_json(tokenizer.config())}, {"train", to_json(tc)}};
  if (d) c.config["data"] = json{{"generation", data::generation_json(d->manifest.gen)}, {"scale", data::format_real(d->manifest.scale)}};
  add_params(c, tokenizer.parameters());
  c.state = json::object();
  if (trainer) {
    const auto s = trainer->state();
    c.step = s.step;
    c.rng_state = rng_state_string(tc.seed, s.step);
    c.state["window"] = json{{"reconstruction", s.window.reconstruction}, {"vq", s.window.vq},
                             {"grad_norm", s.window.grad_norm}, {"count", s.window_count}};
    c.state["window_usage"] = s.window_usage;
    c.state["last_used"] = s.last_used;
    add_optimizer(c, trainer->optimizer());
  }
  return c;
}

template <typename T>
tok::Tokenizer<T> load_tokenizer(const Checkpoint& c) {
  if (c.kind != "image_tokenizer" && c.kind != "camera_tokenizer")
    throw CheckpointError("checkpoint holds a " + c.kind + ", not a tokenizer");
  tok::TokenizerConfig cfg = c.kind == "image_tokenizer" ? tok::TokenizerConfig::image() : tok::TokenizerConfig::camera();
  from_json(c.config.at("tokenizer"), cfg, "tokenizer");
  tok::Tokenizer<T> t(cfg, 0);
  load_params(c, t.parameters());
  return t;
}

template <typename T>
void restore_tokenizer_trainer(const Checkpoint& c, tok::TokenizerTrainer<T>& trainer) {
  load_optimizer(c, trainer.optimizer());
  tok::TokenizerTrainerState s;
  s.step = c.step;
  const json& w = c.state.at("window");
  s.window.reconstruction = w.at("reconstruction").get<double>();
  s.window.vq = w.at("vq").get<double>();
  s.window.grad_norm = w.at("grad_norm").get<double>();
  s.window_count = w.at("count").get<int>();
  s.window_usage = c.state.at("window_usage").get<std::vector<std::uint64_t>>();
  s.last_used = c.state.at("last_used").get<std::vector<std::int64_t>>();
  trainer.restore(s);
  trainer.optimizer().set_steps(c.state.at("adam_steps").get<std::int64_t>());
}

struct RunOptions {
  fs::path checkpoint_out;          // written every save_every steps and at the end
  fs::path metrics_out;             // JSONL, optional
  std::optional<fs::path> resume;   // checkpoint to continue from
  std::int64_t save_every = 500;
  std::int64_t stop_after = -1;     // stop (and save) once this step count is reached
  std::function<void(const json&)> on_log;
};

inline json tokenizer_log_json(const std::string& kind, const tok::TokenizerLogRecord& r, int window) {
  return json{{"kind", kind},
              {"step", r.step},
              {"window_steps", window},
              {"window_loss", r.reconstruction + r.vq},
              {"window_reconstruction", r.reconstruction},
              {"window_vq", r.vq},
              {"window_grad_norm", r.grad_norm},
              {"usage", r.usage}};
}

/// Trains a tokenizer on the training split. The image tokenizer draws single
/// views; the camera tokenizer draws relative poses of filtered view pairs.
template <typename T>
tok::Tokenizer<T> train_tokenizer(const data::Dataset& d, const tok::TokenizerConfig& cfg,
                                  const tok::TokenizerTrainConfig& tc, const RunOptions& opts) {
  std::optional<Checkpoint> resume;
  if (opts.resume) resume = load_checkpoint(*opts.resume);
  tok::Tokenizer<T> tokenizer = resume ? load_tokenizer<T>(*resume) : tok::Tokenizer<T>(cfg, tc.seed);
  if (resume && to_json(tokenizer.config()) != to_json(cfg))
    throw CheckpointError("resume checkpoint was trained with a different tokenizer config");
  tok::TokenizerTrainer<T> trainer(tokenizer, tc);
  if (resume) restore_tokenizer_trainer(*resume, trainer);

  const auto& train = d.split("train");
  const tok::BatchSource<T> source = cfg.modality == tok::Modality::Image
                                         ? image_batch_source<T>(d, train, tc.batch_size)
                                         : camera_batch_source<T>(d, enumerate_pairs(d, train), tokenizer, tc.batch_size);
  MetricsWriter metrics(opts.metrics_out, resume ? std::optional<std::int64_t>(resume->step) : std::nullopt);
  const std::string kind = tokenizer_kind(cfg.modality);
  auto save = [&]() {
    if (!opts.checkpoint_out.empty()) save_checkpoint(opts.checkpoint_out, tokenizer_checkpoint(tokenizer, &trainer, tc, &d));
  };
  const std::int64_t until = opts.stop_after >= 0 ? std::min(opts.stop_after, tc.steps) : tc.steps;
  while (trainer.step() < until) {
    const std::size_t before = trainer.log().size();
    trainer.run_step(source);
    if (trainer.log().size() > before) {
      const json rec = tokenizer_log_json(kind, trainer.log().back(), tc.log_every);
      metrics.write(rec);
      if (opts.on_log) opts.on_log(rec);
    }
    if (opts.save_every > 0 && trainer.step() % opts.save_every == 0 && trainer.step() < until) save();
  }
  save();
  return tokenizer;
}

// ------------------------------------------------------------ pre-tokenizing

struct TokenizedData {
  int grid_height = 0;
  int grid_width = 0;
  seq::Vocabulary vocab;
  std::vector<PairRef> pairs;
  std::vector<std::vector<tok::TokenGrid>> images;  // [scene][view]; empty for scenes not tokenized
  std::vector<tok::TokenGrid> cameras;              // one per pair

  int segment_length() const { return grid_height * grid_width; }
};

template <typename T>
std::vector<tok::TokenGrid> encode_images(tok::Tokenizer<T>& t, const std::vector<const scenes::Image*>& imgs) {
  std::vector<tok::TokenGrid> out;
  const int res = t.config().height;
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < imgs.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, imgs.size() - s);
    nn::Tensor4<T> x(int(n), 3, res, t.config().width);
    for (std::size_t i = 0; i < n; ++i) tok::hwc_to_chw<T, float>(imgs[s + i]->data, res, t.config().width, 3, x.sample(int(i)));
    auto grids = t.encode_batch(x);
    out.insert(out.end(), grids.begin(), grids.end());
  }
  return out;
}

template <typename T>
std::vector<tok::TokenGrid> encode_poses(tok::Tokenizer<T>& t, const std::vector<geometry::CameraPose>& poses,
                                         const geometry::Intrinsics& k) {
  std::vector<tok::TokenGrid> out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < poses.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, poses.size() - s);
    nn::Tensor4<T> x(int(n), 6, k.height, k.width);
    for (std::size_t i = 0; i < n; ++i) {
      const auto in = t.raymap_input(geometry::pose_to_raymap(poses[s + i], k));
      tok::hwc_to_chw<T, T>(in, k.height, k.width, 6, x.sample(int(i)));
    }
    auto grids = t.encode_batch(x);
    out.insert(out.end(), grids.begin(), grids.end());
  }
  return out;
}

/// Decodes camera tokens to a pose; throws SingularGeometry when unrecoverable.
template <typename T>
geometry::CameraPose decode_pose(tok::Tokenizer<T>& t, const tok::TokenGrid& grid, const geometry::Intrinsics& k) {
  return geometry::raymap_to_pose(t.decode_raymap(grid), k);
}

template <typename T>
scenes::Image decode_image(tok::Tokenizer<T>& t, const tok::TokenGrid& grid) {
  const auto out = t.decode(grid);
  scenes::Image img(t.config().height, t.config().width);
  for (std::size_t i = 0; i < out.size(); ++i) img.data[i] = float(out[i]);
  return img;
}

template <typename T>
TokenizedData tokenize_scenes(const data::Dataset& d, const std::vector<int>& scenes, tok::Tokenizer<T>& image_tok,
                              tok::Tokenizer<T>& camera_tok) {
  TokenizedData td;
  td.grid_height = image_tok.config().grid_height();
  td.grid_width = image_tok.config().grid_width();
  td.vocab = {image_tok.config().codebook_size, camera_tok.config().codebook_size};
  td.pairs = enumerate_pairs(d, scenes);
  td.images.resize(d.scenes.size());
  std::vector<const scenes::Image*> imgs;
  for (int s : scenes)
    for (const auto& v : d.scenes[std::size_t(s)].views) imgs.push_back(&v);
  const auto grids = encode_images(image_tok, imgs);
  std::size_t at = 0;
  for (int s : scenes)
    for (std::size_t v = 0; v < d.scenes[std::size_t(s)].views.size(); ++v) td.images[std::size_t(s)].push_back(grids[at++]);
  std::vector<geometry::CameraPose> rel;
  for (const auto& p : td.pairs) rel.push_back(pair_relative_pose(d, p));
  td.cameras = encode_poses(camera_tok, rel, d.manifest.intrinsics);
  return td;
}

// ------------------------------------------------------------ sequence model

inline seq::MaskMode mask_mode(TrainMode m) {
  switch (m) {
    case TrainMode::JointOrdered: return seq::MaskMode::OrderedCausal;
    case TrainMode::JointPacked: return seq::MaskMode::PackedJoint;
    case TrainMode::Alternating: return seq::MaskMode::Alternating;
  }
  return seq::MaskMode::OrderedCausal;
}

/// Top-left n×n block of a mask.
inline seq::AttentionMask leading_mask(const seq::AttentionMask& m, int n) {
  seq::AttentionMask out(m.mode(), n);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k) out.set(q, k, m.allowed(q, k));
  return out;
}

struct TrainSample {
  seq::SampleLayout layout;
  std::vector<float> position_weights;  // per sequence position; 0 outside supervised segments
};

/// One training sequence under the run's mode and conditional weights.
inline TrainSample make_sample(const TokenizedData& td, const TrainConfig& cfg, const std::array<double, 4>& w,
                               std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, td.pairs.size() - 1);
  const std::size_t pi = pick(rng);
  const PairRef& p = td.pairs[pi];
  const auto& obs = td.images[std::size_t(p.scene)][std::size_t(p.observation)];
  const auto& img = td.images[std::size_t(p.scene)][std::size_t(p.target)];
  const auto& cam = td.cameras[pi];
  const int len = td.segment_length();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);

  TrainSample s;
  auto fill = [&](int begin, double first, double second) {
    for (int j = 0; j < len; ++j) {
      s.position_weights[std::size_t(begin + 1 + j)] = float(first);
      s.position_weights[std::size_t(begin + 1 + len + j)] = float(second);
    }
  };
  if (cfg.mode == TrainMode::JointPacked) {
    s.layout = seq::build_packed_sequence(td.vocab, obs, img, cam);
    s.position_weights.assign(s.layout.length(), 0.0f);
    fill(len + 1, 4 * w[kCamGivenObs], 4 * w[kImgGivenCamObs]);
    fill(3 * len + 2, 4 * w[kImgGivenObs], 4 * w[kCamGivenImgObs]);
    return s;
  }
  seq::Ordering ord;
  double first = 1.0, second = 1.0;
  if (cfg.mode == TrainMode::Alternating) {
    ord = u < cfg.task_weights[0] ? seq::Ordering::CamThenImg : seq::Ordering::ImgThenCam;
    first = 0.0;
  } else {
    const double p_cam_first = w[kCamGivenObs] + w[kImgGivenCamObs];
    ord = u < p_cam_first ? seq::Ordering::CamThenImg : seq::Ordering::ImgThenCam;
    const double a = ord == seq::Ordering::CamThenImg ? w[kCamGivenObs] : w[kImgGivenObs];
    const double b = ord == seq::Ordering::CamThenImg ? w[kImgGivenCamObs] : w[kCamGivenImgObs];
    first = 2 * a / (a + b);
    second = 2 * b / (a + b);
  }
  s.layout = seq::build_sequence(td.vocab, obs, img, cam, ord);
  s.position_weights.assign(s.layout.length(), 0.0f);
  fill(len + 1, first, second);
  return s;
}

inline json gst_log_json(TrainMode mode, std::int64_t step, const Window& w, double lr, int window) {
  return json{{"kind", "gst"},
              {"mode", to_string(mode)},
              {"step", step},
              {"window_steps", window},
              {"window_loss", w.loss / w.count},
              {"window_grad_norm", w.grad_norm / w.count},
              {"lr", lr}};
}

template <typename T>
class GstTrainer {
 public:
  GstTrainer(tf::Transformer<T>& model, const TokenizedData& data, TrainConfig cfg)
      : model_(model), data_(data), cfg_(cfg), params_(model.parameters()), opt_(params_, cfg.adam) {
    cfg_.check();
    if (data_.pairs.empty()) throw std::invalid_argument("no training pairs");
    const int len = data_.segment_length();
    const seq::AttentionMask full = seq::build_attention_mask(mask_mode(cfg_.mode), len);
    const int n = full.size() - 1;
    mask_ = leading_mask(full, n);
    tags_ = cfg_.mode == TrainMode::JointPacked ? seq::packed_tags(data_.grid_height, data_.grid_width)
                                                : seq::branch_tags(data_.grid_height, data_.grid_width);
    tags_.resize(std::size_t(n));
  }

  std::int64_t step() const { return step_; }
  nn::AdamW<T>& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<json>& log() const { return log_; }
  const Window& window() const { return window_; }
  std::span<const seq::PositionTag> tags() const { return tags_; }
  const seq::AttentionMask& mask() const { return mask_; }

  void restore(std::int64_t step, const Window& w) {
    step_ = step;
    window_ = w;
  }

  const std::array<double, 4>& weights_at(std::int64_t step) const {
    return double(step) >= cfg_.late_fraction * double(cfg_.steps) ? cfg_.late_weights : cfg_.conditional_weights;
  }

  /// Micro-batch `micro` of a step. Sample j of the effective batch is a pure
  /// function of (seed, step, j), so accumulation does not change the data.
  tf::Batch make_batch(std::int64_t step, int micro, int batch_size) const {
    tf::Batch b;
    b.batch_size = batch_size;
    b.length = int(tags_.size());
    const std::uint64_t step_seed = nn::mix_seed(cfg_.seed, std::uint64_t(step));
    for (int i = 0; i < batch_size; ++i) {
      std::mt19937_64 rng(nn::mix_seed(step_seed, std::uint64_t(micro * batch_size + i)));
      const TrainSample s = make_sample(data_, cfg_, weights_at(step), rng);
      const auto& ids = s.layout.ids;
      b.ids.insert(b.ids.end(), ids.begin(), ids.end() - 1);
      b.targets.insert(b.targets.end(), ids.begin() + 1, ids.end());
      b.weights.insert(b.weights.end(), s.position_weights.begin() + 1, s.position_weights.end());
    }
    return b;
  }

  /// Accumulates gradients for the step without updating; returns the mean loss.
  double accumulate_gradients(std::int64_t step) {
    nn::zero_grads(params_);
    double loss = 0.0;
    for (int m = 0; m < cfg_.grad_accum; ++m) {
      const tf::Batch b = make_batch(step, m, cfg_.batch_size);
      loss += model_.loss_and_backward(b, tags_, mask_, 1.0 / cfg_.grad_accum) / cfg_.grad_accum;
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "loss " << loss << ", grad norm " << nn::grad_norm(params_) << ", micro-batch " << m << ", sequence 0 ids [";
        for (int j = 0; j < std::min(b.length, 16); ++j) os << (j ? " " : "") << b.ids[std::size_t(j)];
        os << (b.length > 16 ? " ...]" : "]");
        throw NonFiniteLoss(step, os.str());
      }
    }
    return loss;
  }

  /// One optimizer step. Returns the loss.
  double run_step() {
    const double loss = accumulate_gradients(step_);
    const double norm = nn::clip_grad_norm(params_, cfg_.grad_clip);
    if (!std::isfinite(norm)) throw NonFiniteLoss(step_, "non-finite gradient norm");
    const double lr = cfg_.schedule.at(step_, cfg_.steps);
    opt_.step(lr);
    window_.add(loss, norm);
    if (window_.count == cfg_.log_every) {
      log_.push_back(gst_log_json(cfg_.mode, step_, window_, lr, cfg_.log_every));
      window_ = {};
    }
    ++step_;
    return loss;
  }

 private:
  tf::Transformer<T>& model_;
  const TokenizedData& data_;
  TrainConfig cfg_;
  nn::ParamList<T> params_;
  nn::AdamW<T> opt_;
  seq::AttentionMask mask_;
  std::vector<seq::PositionTag> tags_;
  std::int64_t step_ = 0;
  Window window_;
  std::vector<json> log_;
};

struct GstMeta {
  int grid_height = 0;
  int grid_width = 0;
  int image_codebook = 0;
  int camera_codebook = 0;
  double scale = 1.0;
  json data;  // generation parameters of the training dataset
};

template <typename T>
Checkpoint gst_checkpoint(tf::Transformer<T>& model, GstTrainer<T>* trainer, const TrainConfig& cfg,
                          const GstMeta& meta) {
  Checkpoint c;
  c.kind = "gst";
  c.config = json{{"model", to_json(model.config())},
                  {"train", to_json(cfg)},
                  {"grid", {meta.grid_height, meta.grid_width}},
                  {"codebooks", {meta.image_codebook, meta.camera_codebook}},
                  {"scale", data::format_real(meta.scale)},
                  {"data", meta.data}};
  add_params(c, model.parameters());
  c.state = json::object();
  if (trainer) {
    c.step = trainer->step();
    c.rng_state = rng_state_string(cfg.seed, trainer->step());
    c.state["window"] = trainer->window().to_json();
    add_optimizer(c, trainer->optimizer());
  }
  return c;
}

inline GstMeta gst_meta(const Checkpoint& c) {
  if (c.kind != "gst") throw CheckpointError("checkpoint holds a " + c.kind + ", not a sequence model");
  GstMeta m;
  m.grid_height = c.config.at("grid").at(0).get<int>();
  m.grid_width = c.config.at("grid").at(1).get<int>();
  m.image_codebook = c.config.at("codebooks").at(0).get<int>();
  m.camera_codebook = c.config.at("codebooks").at(1).get<int>();
  m.scale = std::stod(c.config.at("scale").get<std::string>());
  m.data = c.config.at("data");
  return m;
}

template <typename T>
tf::Transformer<T> load_transformer(const Checkpoint& c) {
  gst_meta(c);
  tf::ModelConfig cfg;
  from_json(c.config.at("model"), cfg, "model");
  tf::Transformer<T> m(cfg, 0);
  load_params(c, m.parameters());
  return m;
}

/// Trains the sequence model on pre-tokenized pairs, saving and logging as it goes.
template <typename T>
void train_gst(tf::Transformer<T>& model, const TokenizedData& td, const TrainConfig& cfg, const GstMeta& meta,
               const RunOptions& opts) {
  GstTrainer<T> trainer(model, td, cfg);
  std::optional<std::int64_t> resume_step;
  if (opts.resume) {
    const Checkpoint c = load_checkpoint(*opts.resume);
    gst_meta(c);
    if (c.config.at("train") != to_json(cfg)) throw CheckpointError("resume checkpoint has a different training config");
    load_params(c, model.parameters());
    load_optimizer(c, trainer.optimizer());
    trainer.restore(c.step, Window::from_json(c.state.at("window")));
    resume_step = c.step;
  }
  MetricsWriter metrics(opts.metrics_out, resume_step);
  auto save = [&]() {
    if (!opts.checkpoint_out.empty()) save_checkpoint(opts.checkpoint_out, gst_checkpoint(model, &trainer, cfg, meta));
  };
  const std::int64_t until = opts.stop_after >= 0 ? std::min(opts.stop_after, cfg.steps) : cfg.steps;
  while (trainer.step() < until) {
    const std::size_t before = trainer.log().size();
    trainer.run_step();
    if (trainer.log().size() > before) {
      metrics.write(trainer.log().back());
      if (opts.on_log) opts.on_log(trainer.log().back());
    }
    if (opts.save_every > 0 && trainer.step() % opts.save_every == 0 && trainer.step() < until) save();
  }
  save();
}

}  // namespace gst::harness
