#include "gst/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include <unistd.h>

using namespace gst;
using namespace gst::harness;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gst_harness_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

class HarnessTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_dir("data"));
    data::GenConfig g;
    g.num_scenes = 20;
    g.views_per_scene = 4;
    g.resolution = 16;
    g.seed = 3;
    data::gen_dataset(g, *root_ / "ds");
    dataset_ = new data::Dataset(data::load_dataset(*root_ / "ds"));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete dataset_;
    delete root_;
  }

  static tok::TokenizerConfig small_tokenizer(tok::Modality m) {
    auto c = m == tok::Modality::Image ? tok::TokenizerConfig::image(16, 16) : tok::TokenizerConfig::camera(16, 16);
    c.base_channels = 8;
    c.codebook_size = 16;
    c.codebook_dim = 4;
    return c;
  }

  static tok::TokenizerTrainConfig small_train(std::int64_t steps) {
    tok::TokenizerTrainConfig t;
    t.steps = steps;
    t.batch_size = 4;
    t.log_every = 2;
    t.seed = 11;
    t.schedule = {1e-3, 1e-3, 1.0, 0};
    return t;
  }

  static tf::ModelConfig small_model(const seq::Vocabulary& v, int grid) {
    tf::ModelConfig m;
    m.num_layers = 1;
    m.model_dim = 16;
    m.num_heads = 2;
    m.vocab_size = v.size();
    m.max_seq_len = seq::packed_length(grid);
    return m;
  }

  static TrainConfig small_gst(TrainMode mode, std::int64_t steps) {
    TrainConfig c;
    c.mode = mode;
    c.steps = steps;
    c.batch_size = 2;
    c.log_every = 2;
    c.seed = 5;
    c.schedule = {1e-3, 1e-4, 0.5, 0};
    return c;
  }

  static const data::Dataset& ds() { return *dataset_; }

  static inline fs::path* root_ = nullptr;
  static inline data::Dataset* dataset_ = nullptr;
};

template <typename T>
std::vector<std::vector<T>> snapshot(const nn::ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p->value.begin(), p->value.end());
  return out;
}

template <typename T>
std::vector<std::vector<T>> grads(const nn::ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p->grad.begin(), p->grad.end());
  return out;
}

scenes::Image pattern(int h, int w, double freq, double phase) {
  scenes::Image img(h, w);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(std::sin(freq * double(i) + phase));
  return img;
}

}  // namespace

TEST(Checkpoint, SerializeRoundTrip) {
  Checkpoint c;
  c.kind = "gst";
  c.config = json{{"a", 1}, {"b", {1.5, "x"}}};
  c.state = json{{"window", {{"loss", 0.25}}}};
  c.step = 1234;
  c.rng_state = "42 7";
  c.add("w", {2, 3}, {1.f, -2.f, 3.5f, 1e-30f, -0.0f, 7e20f});
  c.add("b", {1}, {0.125f});
  const Checkpoint d = deserialize(serialize(c));
  EXPECT_EQ(d.version, c.version);
  EXPECT_EQ(d.kind, c.kind);
  EXPECT_EQ(d.config, c.config);
  EXPECT_EQ(d.state, c.state);
  EXPECT_EQ(d.step, c.step);
  EXPECT_EQ(d.rng_state, c.rng_state);
  ASSERT_EQ(d.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(d.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(d.tensors[i].shape, c.tensors[i].shape);
    ASSERT_EQ(d.tensors[i].data.size(), c.tensors[i].data.size());
    for (std::size_t j = 0; j < c.tensors[i].data.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(d.tensors[i].data[j]), std::bit_cast<std::uint32_t>(c.tensors[i].data[j]));
  }
  EXPECT_EQ(serialize(d), serialize(c));
}

TEST(Checkpoint, RejectsCorruptInput) {
  Checkpoint c;
  c.kind = "gst";
  c.add("w", {2}, {1.f, 2.f});
  std::string bytes = serialize(c);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), CheckpointError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.bin"), CheckpointError);
  EXPECT_THROW(c.tensor("missing"), CheckpointError);
}

TEST_F(HarnessTest, TokenizerCheckpointReloadsParameters) {
  const auto dir = fresh_dir("tokload");
  RunOptions o;
  o.checkpoint_out = dir / "cam.ckpt";
  auto t = train_tokenizer<float>(ds(), small_tokenizer(tok::Modality::Camera), small_train(3), o);
  auto c = load_checkpoint(o.checkpoint_out);
  EXPECT_EQ(c.kind, "camera_tokenizer");
  EXPECT_EQ(c.step, 3);
  auto u = load_tokenizer<float>(c);
  EXPECT_EQ(snapshot(u.parameters()), snapshot(t.parameters()));
  EXPECT_THROW(load_transformer<float>(c), CheckpointError);
  fs::remove_all(dir);
}

TEST_F(HarnessTest, TokenizerResumeIsBitwiseIdentical) {
  for (auto m : {tok::Modality::Image, tok::Modality::Camera}) {
    const auto dir = fresh_dir("tokresume");
    auto cfg = small_tokenizer(m);
    cfg.data_driven_init = true;
    cfg.dead_code_restart_every = 2;
    const auto tc = small_train(7);

    RunOptions full;
    full.metrics_out = dir / "full.jsonl";
    full.save_every = 0;
    auto a = train_tokenizer<float>(ds(), cfg, tc, full);

    RunOptions first;
    first.checkpoint_out = dir / "part.ckpt";
    first.metrics_out = dir / "part.jsonl";
    first.stop_after = 3;
    train_tokenizer<float>(ds(), cfg, tc, first);
    RunOptions second = first;
    second.stop_after = -1;
    second.resume = first.checkpoint_out;
    auto b = train_tokenizer<float>(ds(), cfg, tc, second);

    EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));
    EXPECT_EQ(data::read_text(full.metrics_out), data::read_text(first.metrics_out));
    EXPECT_EQ(read_metrics(full.metrics_out).size(), 3u);
    fs::remove_all(dir);
  }
}

TEST_F(HarnessTest, GstResumeIsBitwiseIdentical) {
  auto it = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Image), 1);
  auto ct = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Camera), 2);
  const auto td = tokenize_scenes(ds(), ds().split("train"), it, ct);
  ASSERT_FALSE(td.pairs.empty());
  GstMeta meta{td.grid_height, td.grid_width, 16, 16, ds().manifest.scale, json::object()};
  for (auto mode : {TrainMode::JointOrdered, TrainMode::JointPacked, TrainMode::Alternating}) {
    const auto dir = fresh_dir("gstresume");
    const auto cfg = small_gst(mode, 7);
    const auto mc = small_model(td.vocab, td.segment_length());

    tf::Transformer<float> a(mc, 9);
    RunOptions full;
    full.metrics_out = dir / "full.jsonl";
    full.save_every = 0;
    train_gst(a, td, cfg, meta, full);

    tf::Transformer<float> b(mc, 9);
    RunOptions first;
    first.checkpoint_out = dir / "part.ckpt";
    first.metrics_out = dir / "part.jsonl";
    first.stop_after = 3;
    train_gst(b, td, cfg, meta, first);
    tf::Transformer<float> c(mc, 1234);
    RunOptions second = first;
    second.stop_after = -1;
    second.resume = first.checkpoint_out;
    train_gst(c, td, cfg, meta, second);

    EXPECT_EQ(snapshot(a.parameters()), snapshot(c.parameters())) << to_string(mode);
    EXPECT_EQ(data::read_text(full.metrics_out), data::read_text(first.metrics_out)) << to_string(mode);
    auto bad = cfg;
    bad.seed = 6;
    tf::Transformer<float> d(mc, 9);
    EXPECT_THROW(train_gst(d, td, bad, meta, second), CheckpointError);
    fs::remove_all(dir);
  }
}

TEST_F(HarnessTest, GradientAccumulationMatchesLargeBatch) {
  auto it = tok::Tokenizer<double>(small_tokenizer(tok::Modality::Image), 1);
  auto ct = tok::Tokenizer<double>(small_tokenizer(tok::Modality::Camera), 2);
  const auto td = tokenize_scenes(ds(), ds().split("train"), it, ct);
  for (auto mode : {TrainMode::JointOrdered, TrainMode::JointPacked, TrainMode::Alternating}) {
    const auto mc = small_model(td.vocab, td.segment_length());
    auto big = small_gst(mode, 10);
    big.batch_size = 4;
    big.grad_accum = 1;
    auto acc = big;
    acc.batch_size = 2;
    acc.grad_accum = 2;
    tf::Transformer<double> ma(mc, 4), mb(mc, 4);
    GstTrainer<double> ta(ma, td, big), tb(mb, td, acc);
    const double la = ta.accumulate_gradients(3);
    const double lb = tb.accumulate_gradients(3);
    EXPECT_NEAR(la, lb, 1e-6);
    const auto ga = grads(ma.parameters()), gb = grads(mb.parameters());
    ASSERT_EQ(ga.size(), gb.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < ga.size(); ++i)
      for (std::size_t j = 0; j < ga[i].size(); ++j) worst = std::max(worst, std::abs(ga[i][j] - gb[i][j]));
    EXPECT_LT(worst, 1e-6) << to_string(mode);
  }
}

TEST_F(HarnessTest, WindowCountsAndInitialLoss) {
  auto it = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Image), 1);
  auto ct = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Camera), 2);
  const auto td = tokenize_scenes(ds(), ds().split("train"), it, ct);
  auto cfg = small_gst(TrainMode::JointOrdered, 11);
  cfg.log_every = 3;
  tf::Transformer<float> m(small_model(td.vocab, td.segment_length()), 3);
  GstTrainer<float> t(m, td, cfg);
  const double first = t.run_step();
  EXPECT_NEAR(first, std::log(double(td.vocab.size())), 0.05 * std::log(double(td.vocab.size())));
  while (t.step() < cfg.steps) t.run_step();
  ASSERT_EQ(t.log().size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.log()[i].at("step").get<std::int64_t>(), std::int64_t(3 * i + 2));
    EXPECT_EQ(t.log()[i].at("window_steps").get<int>(), 3);
    EXPECT_EQ(t.log()[i].at("mode").get<std::string>(), "JOINT_ORDERED");
  }
  EXPECT_EQ(t.window().count, 2);
}

TEST_F(HarnessTest, SamplesWeightConditionalsAsConfigured) {
  auto it = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Image), 1);
  auto ct = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Camera), 2);
  const auto td = tokenize_scenes(ds(), ds().split("train"), it, ct);
  const int len = td.segment_length();
  const std::array<double, 4> w = {0.1, 0.2, 0.3, 0.4};
  // Expected per-conditional weight, averaged over samples, equals w.
  for (auto mode : {TrainMode::JointOrdered, TrainMode::JointPacked}) {
    auto cfg = small_gst(mode, 10);
    std::array<double, 4> got{};
    const int n = 20000;
    std::mt19937_64 rng(8);
    for (int s = 0; s < n; ++s) {
      const auto smp = make_sample(td, cfg, w, rng);
      double total = 0.0;
      for (float x : smp.position_weights) total += x;
      auto seg = [&](int begin) {
        double t = 0.0;
        for (int j = 0; j < len; ++j) t += smp.position_weights[std::size_t(begin + j)];
        return t / total;
      };
      const auto& ids = smp.layout.ids;
      if (mode == TrainMode::JointPacked) {
        got[kCamGivenObs] += seg(len + 2);
        got[kImgGivenCamObs] += seg(2 * len + 2);
        got[kImgGivenObs] += seg(3 * len + 3);
        got[kCamGivenImgObs] += seg(4 * len + 3);
      } else if (ids[std::size_t(len + 1)] == td.vocab.task_cam_first()) {
        got[kCamGivenObs] += seg(len + 2);
        got[kImgGivenCamObs] += seg(2 * len + 2);
      } else {
        got[kImgGivenObs] += seg(len + 2);
        got[kCamGivenImgObs] += seg(2 * len + 2);
      }
    }
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(got[std::size_t(k)] / n, w[std::size_t(k)], 0.01) << to_string(mode) << k;
  }
}

TEST(Metrics, PsnrExamples) {
  scenes::Image a(8, 8), b(8, 8);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = 0.1f;
    b.data[i] = 0.1f + ((i % 2) ? 0.2f : -0.2f);
  }
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  const auto p = pattern(9, 9, 0.7, 0.0);
  EXPECT_NEAR(ssim(p, p), 1.0, 1e-12);
  EXPECT_THROW(psnr(a, scenes::Image(4, 4)), std::invalid_argument);
}

TEST(Metrics, SsimMatchesReferenceImplementation) {
  // tests/oracles/ssim.py
  constexpr double kReference = 0.961289801191;
  scenes::Image a(10, 12), b(10, 12);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const float x = float(std::sin(0.37 * double(i)));
    a.data[i] = x;
    b.data[i] = float(std::clamp(double(x) + 0.3 * std::cos(1.3 * double(i)), -1.0, 1.0));
  }
  EXPECT_NEAR(ssim(a, b), kReference, 1e-9);
  EXPECT_NEAR(ssim(b, a), kReference, 1e-9);
}

TEST(Metrics, WassersteinExamples) {
  EXPECT_NEAR(wasserstein1({0.0}, {1.0}), 1.0, 1e-12);
  EXPECT_NEAR(wasserstein1({0.0, 1.0}, {0.0, 1.0}), 0.0, 1e-12);
  EXPECT_NEAR(wasserstein1({0.0, 0.0, 3.0}, {1.0, 1.0, 4.0}), 1.0, 1e-12);
  // Point mass at 0 against U[0, 1] is its mean.
  EXPECT_NEAR(wasserstein1({0.0}, uniform_quantiles(0.0, 1.0, 1000)), 0.5, 1e-9);
  // Shifting both samples leaves the distance unchanged.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> x(200), y(300), xs, ys;
  for (auto& v : x) v = n(rng);
  for (auto& v : y) v = 2 * n(rng) + 1;
  for (double v : x) xs.push_back(v + 5);
  for (double v : y) ys.push_back(v + 5);
  EXPECT_NEAR(wasserstein1(x, y), wasserstein1(xs, ys), 1e-9);
  EXPECT_NEAR(wasserstein1(x, y), wasserstein1(y, x), 1e-12);
  EXPECT_THROW(wasserstein1({}, {1.0}), std::invalid_argument);
}

TEST(Metrics, WriterTruncatesOnResume) {
  const auto dir = fresh_dir("metrics");
  const auto path = dir / "m.jsonl";
  {
    MetricsWriter w(path);
    for (int s = 0; s < 5; ++s) w.write(json{{"step", s}});
  }
  {
    MetricsWriter w(path, 3);
    w.write(json{{"step", 3}, {"again", true}});
  }
  const auto lines = read_metrics(path);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[2].at("step"), 2);
  EXPECT_TRUE(lines[3].at("again").get<bool>());
  fs::remove_all(dir);
}

TEST(Config, RoundTripAndUnknownKeys) {
  RunConfig c;
  c.data.resolution = 16;
  c.train.mode = TrainMode::Alternating;
  c.train.conditional_weights = {0.4, 0.1, 0.4, 0.1};
  c.eval.max_pairs = 17;
  c.resolve();
  RunConfig d;
  from_json(to_json(c), d);
  d.resolve();
  EXPECT_EQ(to_json(d), to_json(c));
  EXPECT_EQ(d.model.vocab_size, 512 + 512 + 3);
  EXPECT_EQ(d.model.max_seq_len, seq::packed_length(16));

  json j = to_json(c);
  j["train"]["learning_rate"] = 1e-3;
  RunConfig e;
  EXPECT_THROW(from_json(j, e), ConfigError);
  j = to_json(c);
  j["bogus"] = 1;
  EXPECT_THROW(from_json(j, e), ConfigError);
  EXPECT_THROW(train_mode_from_string("JOINT"), ConfigError);
  for (auto m : {TrainMode::JointOrdered, TrainMode::JointPacked, TrainMode::Alternating})
    EXPECT_EQ(train_mode_from_string(to_string(m)), m);

  TrainConfig t;
  t.conditional_weights = {0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(t.check(), ConfigError);
}

TEST_F(HarnessTest, EvaluationReportsAreConsistent) {
  auto it = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Image), 1);
  auto ct = tok::Tokenizer<float>(small_tokenizer(tok::Modality::Camera), 2);
  const seq::Vocabulary v{16, 16};
  tf::Transformer<float> m(small_model(v, it.config().grid_size()), 3);
  EvalConfig e;
  e.max_pairs = 6;
  e.prior_mc_draws = 2000;
  e.prior_samples = 5;
  const auto pose = evaluate_pose(m, it, ct, ds(), e);
  EXPECT_EQ(pose.pairs, int(std::min<std::size_t>(6, eval_pairs(ds(), "test", -1, e.seed).size())));
  EXPECT_GE(pose.acc30, pose.acc15);
  EXPECT_GE(pose.prior_acc30, pose.prior_acc15);
  EXPECT_GT(pose.prior_acc30, 0.0);
  EXPECT_LT(pose.prior_acc30, 1.0);
  // Rerunning with the same seed gives the same report.
  EXPECT_EQ(evaluate_pose(m, it, ct, ds(), e).to_json(), pose.to_json());

  const auto nvs = evaluate_nvs(m, it, ct, ds(), e);
  EXPECT_EQ(nvs.pairs, pose.pairs);
  EXPECT_TRUE(std::isfinite(nvs.psnr));
  EXPECT_TRUE(std::isfinite(nvs.ceiling_psnr));
  EXPECT_EQ(nvs.to_json().at("note").get<std::string>(), kEvalHeader);

  const auto prior = camera_prior_elevations(m, it, ct, ds(), e);
  EXPECT_EQ(prior.samples + prior.invalid, 5);
  const auto imgs = sample_prior(m, it, ct, ds().scenes[0].views[0], PriorMode::Image, 3, 1);
  EXPECT_EQ(int(imgs.images.size()) + imgs.invalid, 3);

  const auto itr = evaluate_image_tokenizer(it, ds(), "test");
  EXPECT_EQ(itr.images, int(ds().split("test").size()) * 4);
  EXPECT_GT(itr.usage, 0.0);
  EXPECT_LE(itr.usage, 1.0);
}

TEST_F(HarnessTest, EvalPairsAreFilteredAndDeterministic) {
  const auto all = eval_pairs(ds(), "test", -1, 1);
  EXPECT_EQ(all.size(), enumerate_pairs(ds(), ds().split("test")).size());
  const auto a = eval_pairs(ds(), "test", 3, 1), b = eval_pairs(ds(), "test", 3, 1);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 3u);
  const auto& test = ds().split("test");
  for (const auto& p : all) {
    EXPECT_NE(p.observation, p.target);
    EXPECT_NE(std::find(test.begin(), test.end(), p.scene), test.end());
  }
}
