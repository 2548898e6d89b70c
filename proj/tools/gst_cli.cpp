// gst: data generation, tokenizer and sequence-model training, sampling,
// evaluation and checkpoint inspection.

#include "gst/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace gst;
using namespace gst::harness;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string metrics_out;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* sub) {
    sub->add_option("--config", config, "JSON run config");
    seed_opt = sub->add_option("--seed", seed, "random seed");
    sub->add_option("--metrics-out", metrics_out, "line-delimited JSON metrics file");
  }
  bool has_seed() const { return seed_opt && seed_opt->count() > 0; }
  RunConfig run_config() const {
    if (config.empty()) return RunConfig{};
    if (!fs::exists(config)) throw UsageError("config file not found: " + config);
    try {
      return load_config(config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
};

void emit(const json& rec, MetricsWriter& metrics) {
  std::cout << rec.dump() << std::endl;
  metrics.write(rec);
}

// ------------------------------------------------------------------ gen-data

struct GenArgs {
  Common common;
  int scenes = 0, views = 0, resolution = 0;
  std::string out;
  CLI::Option *scenes_opt, *views_opt, *res_opt;
};

int run_gen(const GenArgs& a) {
  RunConfig rc = a.common.run_config();
  auto g = rc.data;
  if (a.scenes_opt->count()) g.num_scenes = a.scenes;
  if (a.views_opt->count()) g.views_per_scene = a.views;
  if (a.res_opt->count()) g.resolution = a.resolution;
  if (a.common.has_seed()) g.seed = a.common.seed;
  if (g.num_scenes < 1 || g.views_per_scene < 2 || g.resolution < 4)
    throw UsageError("need at least 1 scene, 2 views per scene and resolution 4");
  const auto m = data::gen_dataset(g, a.out);
  MetricsWriter metrics(a.common.metrics_out);
  emit(json{{"kind", "gen_data"},
            {"out", a.out},
            {"scenes", g.num_scenes},
            {"views", g.views_per_scene},
            {"resolution", g.resolution},
            {"scale", m.scale},
            {"train", m.train.size()},
            {"val", m.val.size()},
            {"test", m.test.size()}},
       metrics);
  return 0;
}

// ---------------------------------------------------------- tokenizer train

struct TokArgs {
  Common common;
  std::string data, out, resume;
  std::int64_t steps = 0, save_every = 500, stop_after = -1;
  CLI::Option* steps_opt;
};

int run_train_tokenizer(const TokArgs& a, tok::Modality m) {
  RunConfig rc = a.common.run_config();
  const auto d = data::load_dataset(a.data);
  rc.data = d.manifest.gen;
  rc.resolve();
  const auto cfg = m == tok::Modality::Image ? rc.image_tokenizer : rc.camera_tokenizer;
  auto tc = m == tok::Modality::Image ? rc.image_train : rc.camera_train;
  if (a.steps_opt->count()) tc.steps = a.steps;
  if (a.common.has_seed()) tc.seed = a.common.seed;
  RunOptions o;
  o.checkpoint_out = a.out;
  o.metrics_out = a.common.metrics_out;
  if (!a.resume.empty()) o.resume = a.resume;
  o.save_every = a.save_every;
  o.stop_after = a.stop_after;
  o.on_log = [](const json& r) { std::cout << r.dump() << std::endl; };
  train_tokenizer<float>(d, cfg, tc, o);
  return 0;
}

// ---------------------------------------------------------------- train-gst

struct GstArgs {
  Common common;
  std::string data, image_tok, camera_tok, out, resume, mode;
  std::int64_t steps = 0, save_every = 1000, stop_after = -1;
  CLI::Option* steps_opt;
};

int run_train_gst(const GstArgs& a) {
  RunConfig rc = a.common.run_config();
  const auto d = data::load_dataset(a.data);
  auto it = load_tokenizer<float>(load_checkpoint(a.image_tok));
  auto ct = load_tokenizer<float>(load_checkpoint(a.camera_tok));
  if (it.config().modality != tok::Modality::Image || ct.config().modality != tok::Modality::Camera)
    throw UsageError("--image-tokenizer and --camera-tokenizer must hold an image and a camera tokenizer");
  rc.data = d.manifest.gen;
  rc.image_tokenizer = it.config();
  rc.camera_tokenizer = ct.config();
  if (!a.mode.empty()) rc.train.mode = train_mode_from_string(a.mode);
  if (a.steps_opt->count()) rc.train.steps = a.steps;
  if (a.common.has_seed()) rc.train.seed = a.common.seed;
  rc.resolve();

  const auto td = tokenize_scenes(d, d.split("train"), it, ct);
  GstMeta meta{td.grid_height, td.grid_width, it.config().codebook_size, ct.config().codebook_size, d.manifest.scale,
               json{{"generation", data::generation_json(d.manifest.gen)},
                    {"image_tokenizer", fs::absolute(a.image_tok).string()},
                    {"camera_tokenizer", fs::absolute(a.camera_tok).string()}}};
  tf::Transformer<float> model(rc.model, rc.train.seed);
  RunOptions o;
  o.checkpoint_out = a.out;
  o.metrics_out = a.common.metrics_out;
  if (!a.resume.empty()) o.resume = a.resume;
  o.save_every = a.save_every;
  o.stop_after = a.stop_after;
  o.on_log = [](const json& r) { std::cout << r.dump() << std::endl; };
  train_gst(model, td, rc.train, meta, o);
  return 0;
}

// ------------------------------------------------------------ sample / eval

struct Artifacts {
  Checkpoint ckpt;
  GstMeta meta;
  tf::Transformer<float> model;
  tok::Tokenizer<float> image_tok;
  tok::Tokenizer<float> camera_tok;
};

Artifacts load_artifacts(const std::string& path, std::string image_tok, std::string camera_tok) {
  Checkpoint c = load_checkpoint(path);
  const GstMeta meta = gst_meta(c);
  if (image_tok.empty()) image_tok = meta.data.value("image_tokenizer", "");
  if (camera_tok.empty()) camera_tok = meta.data.value("camera_tokenizer", "");
  if (image_tok.empty() || camera_tok.empty()) throw UsageError("tokenizer checkpoints are required");
  auto model = load_transformer<float>(c);
  auto it = load_tokenizer<float>(load_checkpoint(image_tok));
  auto ct = load_tokenizer<float>(load_checkpoint(camera_tok));
  if (it.config().grid_height() != meta.grid_height || it.config().codebook_size != meta.image_codebook ||
      ct.config().codebook_size != meta.camera_codebook)
    throw CheckpointError("tokenizers do not match the sequence-model checkpoint");
  return {std::move(c), meta, std::move(model), std::move(it), std::move(ct)};
}

struct SampleArgs {
  Common common;
  std::string checkpoint, image_tok, camera_tok, mode, observation, camera, target, out;
  int n = 1;
  double temperature = -1.0;
  int top_k = 0;
};

int run_sample(const SampleArgs& a) {
  if (a.mode == "nvs" && a.camera.empty()) throw UsageError("--mode nvs needs --camera");
  if (a.mode == "pose" && a.target.empty()) throw UsageError("--mode pose needs --target");
  if (a.n < 1) throw UsageError("--n must be positive");
  RunConfig rc = a.common.run_config();
  const std::uint64_t seed = a.common.has_seed() ? a.common.seed : rc.eval.seed;
  auto art = load_artifacts(a.checkpoint, a.image_tok, a.camera_tok);
  const scenes::Image obs = data::read_png(a.observation);
  const int res = art.image_tok.config().height;
  if (obs.height != res || obs.width != res) throw data::IoError("observation is not " + std::to_string(res) + "x" + std::to_string(res));
  const seq::Vocabulary v{art.meta.image_codebook, art.meta.camera_codebook};
  const int gh = art.meta.grid_height, gw = art.meta.grid_width, len = gh * gw;
  const auto tags = seq::branch_tags(gh, gw);
  const auto k = geometry::Intrinsics::fixed_default(res, res);
  const auto t_o = encode_images(art.image_tok, {&obs}).front();
  std::vector<int> prefix = {v.bos()};
  for (int id : to_global(v, tok::Modality::Image, t_o)) prefix.push_back(id);
  MetricsWriter metrics(a.common.metrics_out);

  if (a.mode == "nvs" || a.mode == "pose") {
    const tf::SamplingConfig sc = a.mode == "nvs" ? tf::SamplingConfig{rc.eval.nvs_temperature, rc.eval.nvs_top_k}
                                                  : tf::SamplingConfig{rc.eval.pose_temperature, rc.eval.pose_top_k};
    tf::SamplingConfig sampling = sc;
    if (a.temperature >= 0) sampling = {a.temperature, a.top_k};
    if (a.mode == "nvs") {
      const auto pf = data::parse_pose_file(data::read_text(a.camera));
      if (pf.views.empty() || pf.views.size() > 2) throw data::IoError("pose file must hold one or two views");
      // Two views: observation and target in world units. One view: target
      // already relative to the observation, in scaled units.
      const auto rel = pf.views.size() == 2 ? data::relative_scaled_pose(pf.views[0], pf.views[1], art.meta.scale)
                                            : pf.views[0];
      const auto t_c = encode_poses(art.camera_tok, {rel}, k).front();
      prefix.push_back(v.task_cam_first());
      for (int id : to_global(v, tok::Modality::Camera, t_c)) prefix.push_back(id);
      const auto ids = sample_segment(art.model, v, prefix, tags, tok::Modality::Image, len, sampling, seed);
      const auto img = decode_image(art.image_tok, to_local(v, tok::Modality::Image, ids, gh, gw));
      data::write_png(a.out, img);
      emit(json{{"kind", "sample"}, {"mode", "nvs"}, {"seed", seed}, {"out", a.out}}, metrics);
    } else {
      const scenes::Image tgt = data::read_png(a.target);
      if (tgt.height != res || tgt.width != res) throw data::IoError("target has the wrong resolution");
      prefix.push_back(v.task_pose_first());
      for (int id : to_global(v, tok::Modality::Image, encode_images(art.image_tok, {&tgt}).front())) prefix.push_back(id);
      const auto ids = sample_segment(art.model, v, prefix, tags, tok::Modality::Camera, len, sampling, seed);
      json rec{{"kind", "sample"}, {"mode", "pose"}, {"seed", seed}, {"out", a.out}};
      try {
        const auto pose = decode_pose(art.camera_tok, to_local(v, tok::Modality::Camera, ids, gh, gw), k);
        data::write_text(a.out, data::format_pose_file(k, {pose}));
        rec["valid"] = true;
      } catch (const geometry::SingularGeometry&) {
        rec["valid"] = false;
        emit(rec, metrics);
        return 2;
      }
      emit(rec, metrics);
    }
    return 0;
  }

  const double temp = a.temperature >= 0 ? a.temperature : rc.eval.prior_temperature;
  const int top_k = a.temperature >= 0 ? a.top_k : 0;
  if (a.mode == "camera-prior") {
    const auto s = sample_prior(art.model, art.image_tok, art.camera_tok, obs, PriorMode::Camera, a.n, seed, {temp, top_k});
    data::write_text(a.out, data::format_pose_file(k, s.poses));
    emit(json{{"kind", "sample"}, {"mode", "camera-prior"}, {"seed", seed}, {"n", a.n}, {"invalid", s.invalid}, {"out", a.out}},
         metrics);
  } else {
    const auto s = sample_prior(art.model, art.image_tok, art.camera_tok, obs, PriorMode::Image, a.n, seed, {temp, top_k});
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < s.images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%03zu.png", i);
      data::write_png(fs::path(a.out) / name, s.images[i]);
    }
    emit(json{{"kind", "sample"}, {"mode", "image-prior"}, {"seed", seed}, {"n", a.n}, {"invalid", s.invalid}, {"out", a.out}},
         metrics);
  }
  return 0;
}

struct EvalArgs {
  Common common;
  std::string checkpoint, image_tok, camera_tok, data, suite = "all", split = "test";
  int max_pairs = -1;
};

int run_eval(const EvalArgs& a) {
  RunConfig rc = a.common.run_config();
  EvalConfig e = rc.eval;
  if (a.common.has_seed()) e.seed = a.common.seed;
  if (a.max_pairs >= 0) e.max_pairs = a.max_pairs;
  auto art = load_artifacts(a.checkpoint, a.image_tok, a.camera_tok);
  const auto d = data::load_dataset(a.data);
  if (d.manifest.intrinsics.height != art.image_tok.config().height)
    throw data::IoError("dataset resolution does not match the tokenizers");
  MetricsWriter metrics(a.common.metrics_out);
  emit(json{{"kind", "eval_header"}, {"note", kEvalHeader}, {"split", a.split}, {"seed", e.seed}}, metrics);
  const bool all = a.suite == "all";
  if (all || a.suite == "pose") emit(evaluate_pose(art.model, art.image_tok, art.camera_tok, d, e, a.split).to_json(), metrics);
  if (all || a.suite == "nvs") emit(evaluate_nvs(art.model, art.image_tok, art.camera_tok, d, e, a.split).to_json(), metrics);
  if (all || a.suite == "prior")
    emit(camera_prior_elevations(art.model, art.image_tok, art.camera_tok, d, e, a.split).to_json(), metrics);
  if (all || a.suite == "tokenizers") {
    emit(evaluate_image_tokenizer(art.image_tok, d, a.split).to_json(), metrics);
    emit(evaluate_camera_tokenizer(art.camera_tok, d, a.split, e.max_pairs, e.seed).to_json(), metrics);
  }
  return 0;
}

// ------------------------------------------------------- inspect-checkpoint

int run_inspect(const std::string& path, const Common& common) {
  const Checkpoint c = load_checkpoint(path);
  std::int64_t params = 0;
  json tensors = json::array();
  for (const auto& t : c.tensors) {
    tensors.push_back(json{{"name", t.name}, {"shape", t.shape}});
    if (t.name.rfind("adam.", 0) != 0) params += std::int64_t(t.data.size());
  }
  MetricsWriter metrics(common.metrics_out);
  emit(json{{"kind", "checkpoint"},
            {"path", path},
            {"version", c.version},
            {"checkpoint_kind", c.kind},
            {"step", c.step},
            {"parameters", params},
            {"config", c.config},
            {"tensors", tensors}},
       metrics);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative spatial transformer toolkit", "gst"};
  app.require_subcommand(1, 1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "render a procedural dataset");
  gen.common.add(g);
  gen.scenes_opt = g->add_option("--scenes", gen.scenes, "number of scenes");
  gen.views_opt = g->add_option("--views", gen.views, "views per scene");
  gen.res_opt = g->add_option("--resolution", gen.resolution, "image side in pixels");
  g->add_option("--out", gen.out, "output directory")->required();

  TokArgs ti, tc;
  std::pair<CLI::App*, TokArgs*> tok_subs[] = {
      {app.add_subcommand("train-image-tokenizer", "train the image tokenizer"), &ti},
      {app.add_subcommand("train-camera-tokenizer", "train the camera tokenizer"), &tc}};
  for (auto [sub, args] : tok_subs) {
    args->common.add(sub);
    sub->add_option("--data", args->data, "dataset directory")->required();
    sub->add_option("--out", args->out, "checkpoint path")->required();
    sub->add_option("--resume", args->resume, "checkpoint to resume from");
    args->steps_opt = sub->add_option("--steps", args->steps, "total steps")->check(CLI::PositiveNumber);
    sub->add_option("--save-every", args->save_every, "checkpoint interval in steps");
    sub->add_option("--stop-after", args->stop_after, "save and exit once this step is reached");
  }

  GstArgs ga;
  auto* tg = app.add_subcommand("train-gst", "train the sequence model");
  ga.common.add(tg);
  tg->add_option("--data", ga.data, "dataset directory")->required();
  tg->add_option("--image-tokenizer", ga.image_tok, "image tokenizer checkpoint")->required();
  tg->add_option("--camera-tokenizer", ga.camera_tok, "camera tokenizer checkpoint")->required();
  tg->add_option("--out", ga.out, "checkpoint path")->required();
  tg->add_option("--resume", ga.resume, "checkpoint to resume from");
  tg->add_option("--mode", ga.mode, "training mode")
      ->check(CLI::IsMember({"JOINT_ORDERED", "JOINT_PACKED", "ALTERNATING"}));
  ga.steps_opt = tg->add_option("--steps", ga.steps, "total steps")->check(CLI::PositiveNumber);
  tg->add_option("--save-every", ga.save_every, "checkpoint interval in steps");
  tg->add_option("--stop-after", ga.stop_after, "save and exit once this step is reached");

  SampleArgs sa;
  auto* sm = app.add_subcommand("sample", "sample from a trained model");
  sa.common.add(sm);
  sm->add_option("--checkpoint", sa.checkpoint, "sequence-model checkpoint")->required();
  sm->add_option("--image-tokenizer", sa.image_tok, "image tokenizer checkpoint (default: recorded path)");
  sm->add_option("--camera-tokenizer", sa.camera_tok, "camera tokenizer checkpoint (default: recorded path)");
  sm->add_option("--mode", sa.mode, "what to sample")
      ->required()
      ->check(CLI::IsMember({"nvs", "pose", "camera-prior", "image-prior"}));
  sm->add_option("--observation", sa.observation, "observation PNG")->required();
  sm->add_option("--camera", sa.camera, "pose file: target relative pose, or observation and target poses");
  sm->add_option("--target", sa.target, "target PNG (pose mode)");
  sm->add_option("--out", sa.out, "output file (directory for image-prior)")->required();
  sm->add_option("--n", sa.n, "number of prior samples");
  sm->add_option("--temperature", sa.temperature, "sampling temperature (0 = greedy)");
  sm->add_option("--top-k", sa.top_k, "top-k truncation with --temperature");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a trained model");
  ea.common.add(ev);
  ev->add_option("--checkpoint", ea.checkpoint, "sequence-model checkpoint")->required();
  ev->add_option("--image-tokenizer", ea.image_tok, "image tokenizer checkpoint (default: recorded path)");
  ev->add_option("--camera-tokenizer", ea.camera_tok, "camera tokenizer checkpoint (default: recorded path)");
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--suite", ea.suite, "evaluation suite")
      ->check(CLI::IsMember({"pose", "nvs", "prior", "tokenizers", "all"}));
  ev->add_option("--split", ea.split, "dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--max-pairs", ea.max_pairs, "cap on evaluated pairs");

  Common ic;
  std::string inspect_path;
  auto* ins = app.add_subcommand("inspect-checkpoint", "print a checkpoint summary");
  ic.add(ins);
  ins->add_option("checkpoint", inspect_path, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (sub == g) return run_gen(gen);
    if (sub == tok_subs[0].first) return run_train_tokenizer(ti, tok::Modality::Image);
    if (sub == tok_subs[1].first) return run_train_tokenizer(tc, tok::Modality::Camera);
    if (sub == tg) return run_train_gst(ga);
    if (sub == sm) return run_sample(sa);
    if (sub == ev) return run_eval(ea);
    if (sub == ins) return run_inspect(inspect_path, ic);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << sub->help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
