#pragma once

// Run configuration and its JSON form. Every field has a default; a config
// file only needs the keys it overrides. Unknown keys are rejected.

#include "gst/dataset.hpp"
#include "gst/sequence.hpp"
#include "gst/tokenizers.hpp"
#include "gst/transformer.hpp"

#include <json.hpp>

#include <array>
#include <set>
#include <string>

namespace gst::harness {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { JointOrdered, JointPacked, Alternating };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::JointOrdered: return "JOINT_ORDERED";
    case TrainMode::JointPacked: return "JOINT_PACKED";
    case TrainMode::Alternating: return "ALTERNATING";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "JOINT_ORDERED") return TrainMode::JointOrdered;
  if (s == "JOINT_PACKED") return TrainMode::JointPacked;
  if (s == "ALTERNATING") return TrainMode::Alternating;
  throw ConfigError("unknown training mode " + s);
}

// Conditional order: p(c|o), p(i|c,o), p(i|o), p(c|i,o).
enum Conditional { kCamGivenObs = 0, kImgGivenCamObs = 1, kImgGivenObs = 2, kCamGivenImgObs = 3 };

struct TrainConfig {
  TrainMode mode = TrainMode::JointOrdered;
  std::array<double, 4> conditional_weights{0.25, 0.25, 0.25, 0.25};
  // ALTERNATING: probability of the novel-view task p(i|c,o) versus the pose task p(c|i,o).
  std::array<double, 2> task_weights{0.5, 0.5};
  // Optional late-phase conditional weights, active from late_fraction of the run on.
  std::array<double, 4> late_weights{0.25, 0.25, 0.25, 0.25};
  double late_fraction = 1.0;
  nn::StepDecaySchedule schedule{1e-4, 1e-5, 0.8, 0};
  nn::AdamWConfig adam{0.9, 0.95, 1e-8, 0.05};
  int batch_size = 32;
  int grad_accum = 1;
  double grad_clip = 1.0;
  std::int64_t steps = 30000;
  std::uint64_t seed = 0;
  int log_every = 50;
  int save_every = 1000;

  void check() const {
    auto sums_to_one = [](auto& w) {
      double s = 0;
      for (double x : w) {
        if (x < 0) return false;
        s += x;
      }
      return std::abs(s - 1.0) < 1e-9;
    };
    if (!sums_to_one(conditional_weights)) throw ConfigError("conditional_weights must be nonnegative and sum to 1");
    if (!sums_to_one(late_weights)) throw ConfigError("late_weights must be nonnegative and sum to 1");
    if (!sums_to_one(task_weights)) throw ConfigError("task_weights must be nonnegative and sum to 1");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
    if (batch_size < 1 || grad_accum < 1 || steps < 1 || log_every < 1)
      throw ConfigError("batch_size, grad_accum, steps and log_every must be positive");
  }
};

struct EvalConfig {
  int max_pairs = 200;
  std::uint64_t seed = 0;
  double pose_temperature = 0.0;
  int pose_top_k = 0;
  double nvs_temperature = 0.0;
  int nvs_top_k = 0;
  double prior_temperature = 1.0;
  int prior_mc_draws = 20000;
  int prior_samples = 200;
};

struct RunConfig {
  data::GenConfig data;
  tok::TokenizerConfig image_tokenizer = tok::TokenizerConfig::image();
  tok::TokenizerTrainConfig image_train;
  tok::TokenizerConfig camera_tokenizer = tok::TokenizerConfig::camera();
  tok::TokenizerTrainConfig camera_train;
  tf::ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  /// Ties dependent sizes together: tokenizer resolution from the data,
  /// vocabulary and context length from the tokenizers.
  void resolve() {
    for (auto* t : {&image_tokenizer, &camera_tokenizer}) {
      t->height = data.resolution;
      t->width = data.resolution;
      t->check();
    }
    if (image_tokenizer.grid_height() != camera_tokenizer.grid_height() ||
        image_tokenizer.grid_width() != camera_tokenizer.grid_width())
      throw ConfigError("image and camera token grids differ");
    model.vocab_size = vocabulary().size();
    model.max_seq_len = seq::packed_length(image_tokenizer.grid_size());
    model.check();
    train.check();
  }

  seq::Vocabulary vocabulary() const { return {image_tokenizer.codebook_size, camera_tokenizer.codebook_size}; }
  int grid_height() const { return image_tokenizer.grid_height(); }
  int grid_width() const { return image_tokenizer.grid_width(); }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline json to_json(const nn::StepDecaySchedule& s) {
  return json{{"base_lr", s.base_lr}, {"final_lr", s.final_lr}, {"drop_fraction", s.drop_fraction},
              {"warmup_steps", s.warmup_steps}};
}
inline void from_json(const json& j, nn::StepDecaySchedule& s, const std::string& where) {
  detail::check_keys(j, {"base_lr", "final_lr", "drop_fraction", "warmup_steps"}, where);
  detail::read(j, "base_lr", s.base_lr);
  detail::read(j, "final_lr", s.final_lr);
  detail::read(j, "drop_fraction", s.drop_fraction);
  detail::read(j, "warmup_steps", s.warmup_steps);
}

inline json to_json(const nn::AdamWConfig& a) {
  return json{{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}
inline void from_json(const json& j, nn::AdamWConfig& a, const std::string& where) {
  detail::check_keys(j, {"beta1", "beta2", "eps", "weight_decay"}, where);
  detail::read(j, "beta1", a.beta1);
  detail::read(j, "beta2", a.beta2);
  detail::read(j, "eps", a.eps);
  detail::read(j, "weight_decay", a.weight_decay);
}

inline json to_json(const tok::TokenizerConfig& c) {
  return json{{"base_channels", c.base_channels},
              {"num_downsamples", c.num_downsamples},
              {"codebook_size", c.codebook_size},
              {"codebook_dim", c.codebook_dim},
              {"height", c.height},
              {"width", c.width},
              {"commitment_weight", c.commitment_weight},
              {"moment_scale", c.moment_scale},
              {"data_driven_init", c.data_driven_init},
              {"dead_code_restart_every", c.dead_code_restart_every}};
}
inline void from_json(const json& j, tok::TokenizerConfig& c, const std::string& where) {
  detail::check_keys(j,
                     {"base_channels", "num_downsamples", "codebook_size", "codebook_dim", "height", "width",
                      "commitment_weight", "moment_scale", "data_driven_init", "dead_code_restart_every"},
                     where);
  detail::read(j, "base_channels", c.base_channels);
  detail::read(j, "num_downsamples", c.num_downsamples);
  detail::read(j, "codebook_size", c.codebook_size);
  detail::read(j, "codebook_dim", c.codebook_dim);
  detail::read(j, "height", c.height);
  detail::read(j, "width", c.width);
  detail::read(j, "commitment_weight", c.commitment_weight);
  detail::read(j, "moment_scale", c.moment_scale);
  detail::read(j, "data_driven_init", c.data_driven_init);
  detail::read(j, "dead_code_restart_every", c.dead_code_restart_every);
}

inline json to_json(const tok::TokenizerTrainConfig& c) {
  return json{{"steps", c.steps},           {"batch_size", c.batch_size}, {"schedule", to_json(c.schedule)},
              {"grad_clip", c.grad_clip},   {"adam", to_json(c.adam)},    {"seed", c.seed},
              {"log_every", c.log_every}};
}
inline void from_json(const json& j, tok::TokenizerTrainConfig& c, const std::string& where) {
  detail::check_keys(j, {"steps", "batch_size", "schedule", "grad_clip", "adam", "seed", "log_every"}, where);
  detail::read(j, "steps", c.steps);
  detail::read(j, "batch_size", c.batch_size);
  if (j.contains("schedule")) from_json(j.at("schedule"), c.schedule, where + ".schedule");
  detail::read(j, "grad_clip", c.grad_clip);
  if (j.contains("adam")) from_json(j.at("adam"), c.adam, where + ".adam");
  detail::read(j, "seed", c.seed);
  detail::read(j, "log_every", c.log_every);
}

inline json to_json(const tf::ModelConfig& c) {
  return json{{"num_layers", c.num_layers},     {"model_dim", c.model_dim}, {"num_heads", c.num_heads},
              {"vocab_size", c.vocab_size},     {"max_seq_len", c.max_seq_len}, {"num_segments", c.num_segments},
              {"mlp_ratio", c.mlp_ratio},       {"rope_base", c.rope_base}, {"dropout", c.dropout}};
}
inline void from_json(const json& j, tf::ModelConfig& c, const std::string& where) {
  detail::check_keys(j,
                     {"num_layers", "model_dim", "num_heads", "vocab_size", "max_seq_len", "num_segments",
                      "mlp_ratio", "rope_base", "dropout"},
                     where);
  detail::read(j, "num_layers", c.num_layers);
  detail::read(j, "model_dim", c.model_dim);
  detail::read(j, "num_heads", c.num_heads);
  detail::read(j, "vocab_size", c.vocab_size);
  detail::read(j, "max_seq_len", c.max_seq_len);
  detail::read(j, "num_segments", c.num_segments);
  detail::read(j, "mlp_ratio", c.mlp_ratio);
  detail::read(j, "rope_base", c.rope_base);
  detail::read(j, "dropout", c.dropout);
}

inline json to_json(const TrainConfig& c) {
  return json{{"mode", to_string(c.mode)},
              {"conditional_weights", c.conditional_weights},
              {"task_weights", c.task_weights},
              {"late_weights", c.late_weights},
              {"late_fraction", c.late_fraction},
              {"schedule", to_json(c.schedule)},
              {"adam", to_json(c.adam)},
              {"batch_size", c.batch_size},
              {"grad_accum", c.grad_accum},
              {"grad_clip", c.grad_clip},
              {"steps", c.steps},
              {"seed", c.seed},
              {"log_every", c.log_every},
              {"save_every", c.save_every}};
}
inline void from_json(const json& j, TrainConfig& c, const std::string& where) {
  detail::check_keys(j,
                     {"mode", "conditional_weights", "task_weights", "late_weights", "late_fraction", "schedule",
                      "adam", "batch_size", "grad_accum", "grad_clip", "steps", "seed", "log_every", "save_every"},
                     where);
  if (j.contains("mode")) c.mode = train_mode_from_string(j.at("mode").get<std::string>());
  detail::read(j, "conditional_weights", c.conditional_weights);
  detail::read(j, "task_weights", c.task_weights);
  detail::read(j, "late_weights", c.late_weights);
  detail::read(j, "late_fraction", c.late_fraction);
  if (j.contains("schedule")) from_json(j.at("schedule"), c.schedule, where + ".schedule");
  if (j.contains("adam")) from_json(j.at("adam"), c.adam, where + ".adam");
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "grad_accum", c.grad_accum);
  detail::read(j, "grad_clip", c.grad_clip);
  detail::read(j, "steps", c.steps);
  detail::read(j, "seed", c.seed);
  detail::read(j, "log_every", c.log_every);
  detail::read(j, "save_every", c.save_every);
}

inline json to_json(const EvalConfig& c) {
  return json{{"max_pairs", c.max_pairs},
              {"seed", c.seed},
              {"pose_temperature", c.pose_temperature},
              {"pose_top_k", c.pose_top_k},
              {"nvs_temperature", c.nvs_temperature},
              {"nvs_top_k", c.nvs_top_k},
              {"prior_temperature", c.prior_temperature},
              {"prior_mc_draws", c.prior_mc_draws},
              {"prior_samples", c.prior_samples}};
}
inline void from_json(const json& j, EvalConfig& c, const std::string& where) {
  detail::check_keys(j,
                     {"max_pairs", "seed", "pose_temperature", "pose_top_k", "nvs_temperature", "nvs_top_k",
                      "prior_temperature", "prior_mc_draws", "prior_samples"},
                     where);
  detail::read(j, "max_pairs", c.max_pairs);
  detail::read(j, "seed", c.seed);
  detail::read(j, "pose_temperature", c.pose_temperature);
  detail::read(j, "pose_top_k", c.pose_top_k);
  detail::read(j, "nvs_temperature", c.nvs_temperature);
  detail::read(j, "nvs_top_k", c.nvs_top_k);
  detail::read(j, "prior_temperature", c.prior_temperature);
  detail::read(j, "prior_mc_draws", c.prior_mc_draws);
  detail::read(j, "prior_samples", c.prior_samples);
}

inline json to_json(const data::GenConfig& g) {
  json j = data::generation_json(g);
  return j;
}
inline void from_json(const json& j, data::GenConfig& g, const std::string& where) {
  detail::check_keys(j, {"num_scenes", "views_per_scene", "resolution", "seed", "sampler", "distance_threshold"},
                     where);
  detail::read(j, "num_scenes", g.num_scenes);
  detail::read(j, "views_per_scene", g.views_per_scene);
  detail::read(j, "resolution", g.resolution);
  detail::read(j, "seed", g.seed);
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    detail::check_keys(s, {"radius_min", "radius_max", "elevation_min_deg", "elevation_max_deg", "look_at_jitter"},
                       where + ".sampler");
    detail::read(s, "radius_min", g.sampler.radius_min);
    detail::read(s, "radius_max", g.sampler.radius_max);
    detail::read(s, "elevation_min_deg", g.sampler.elevation_min_deg);
    detail::read(s, "elevation_max_deg", g.sampler.elevation_max_deg);
    detail::read(s, "look_at_jitter", g.sampler.look_at_jitter);
  }
  detail::read(j, "distance_threshold", g.distance_threshold);
}

inline json to_json(const RunConfig& c) {
  return json{{"data", to_json(c.data)},
              {"image_tokenizer", to_json(c.image_tokenizer)},
              {"image_train", to_json(c.image_train)},
              {"camera_tokenizer", to_json(c.camera_tokenizer)},
              {"camera_train", to_json(c.camera_train)},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"eval", to_json(c.eval)}};
}

inline void from_json(const json& j, RunConfig& c) {
  detail::check_keys(j, {"data", "image_tokenizer", "image_train", "camera_tokenizer", "camera_train", "model",
                         "train", "eval"},
                     "config");
  if (j.contains("data")) from_json(j.at("data"), c.data, "data");
  if (j.contains("image_tokenizer")) from_json(j.at("image_tokenizer"), c.image_tokenizer, "image_tokenizer");
  if (j.contains("image_train")) from_json(j.at("image_train"), c.image_train, "image_train");
  if (j.contains("camera_tokenizer")) from_json(j.at("camera_tokenizer"), c.camera_tokenizer, "camera_tokenizer");
  if (j.contains("camera_train")) from_json(j.at("camera_train"), c.camera_train, "camera_train");
  if (j.contains("model")) from_json(j.at("model"), c.model, "model");
  if (j.contains("train")) from_json(j.at("train"), c.train, "train");
  if (j.contains("eval")) from_json(j.at("eval"), c.eval, "eval");
}

inline RunConfig load_config(const fs::path& path) {
  RunConfig c;
  try {
    from_json(json::parse(data::read_text(path)), c);
  } catch (const json::exception& e) {
    throw ConfigError("invalid config " + path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace gst::harness
