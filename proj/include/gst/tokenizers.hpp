#pragma once

// Convolutional VQ autoencoders producing equal-size token grids for images
// (3 channels in [-1, 1]) and Plücker camera maps (6 channels, moment then
// direction).

#include "gst/geometry.hpp"
#include "gst/nn/layers.hpp"
#include "gst/nn/optim.hpp"
#include "gst/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::tok {

using nn::Matrix;
using nn::Param;
using nn::ParamList;
using nn::Tensor4;

enum class Modality { Image, Camera };

inline std::string to_string(Modality m) { return m == Modality::Image ? "image" : "camera"; }

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidIndex : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::int64_t step, const std::string& what)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TokenizerConfig {
  Modality modality = Modality::Image;
  int input_channels = 3;
  int base_channels = 32;
  int num_downsamples = 2;
  int codebook_size = 512;
  int codebook_dim = 8;
  int height = 32;
  int width = 32;
  double commitment_weight = 0.25;
  // Camera maps: moment channels are divided by this before encoding.
  double moment_scale = 5.0;
  bool data_driven_init = false;
  // Replace codes unused for this many steps with batch features; 0 disables.
  int dead_code_restart_every = 0;

  static TokenizerConfig image(int h = 32, int w = 32) {
    TokenizerConfig c;
    c.modality = Modality::Image;
    c.input_channels = 3;
    c.base_channels = 48;
    c.codebook_size = 512;
    c.codebook_dim = 8;
    c.height = h;
    c.width = w;
    return c;
  }

  static TokenizerConfig camera(int h = 32, int w = 32) {
    TokenizerConfig c;
    c.modality = Modality::Camera;
    c.input_channels = 6;
    c.base_channels = 24;
    c.codebook_size = 512;
    c.codebook_dim = 4;
    c.height = h;
    c.width = w;
    return c;
  }

  int factor() const { return 1 << num_downsamples; }
  int grid_height() const { return height / factor(); }
  int grid_width() const { return width / factor(); }
  int grid_size() const { return grid_height() * grid_width(); }

  /// Channel count at encoder level l (l = 0 is full resolution).
  int channels_at(int level) const { return base_channels << std::max(0, level - 1); }

  void check() const {
    if (num_downsamples < 1 || height % factor() != 0 || width % factor() != 0)
      throw ShapeMismatch("resolution must be divisible by 2^num_downsamples");
    if (input_channels != (modality == Modality::Image ? 3 : 6))
      throw ShapeMismatch("input channel count does not match modality");
    if (codebook_size < 2 || codebook_dim < 1 || base_channels < 1)
      throw std::invalid_argument("invalid tokenizer sizes");
  }
};

struct TokenGrid {
  int height = 0;
  int width = 0;
  Modality modality = Modality::Image;
  std::vector<int> indices;  // row-major

  std::size_t size() const { return indices.size(); }
  bool operator==(const TokenGrid&) const = default;
};

/// Channel-last H×W×C into one sample of an N×C×H×W tensor.
template <typename T, typename U>
void hwc_to_chw(std::span<const U> src, int h, int w, int c, T* dst) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        dst[(std::size_t(ch) * h + y) * w + x] = T(src[(std::size_t(y) * w + x) * c + ch]);
}

template <typename T, typename U>
void chw_to_hwc(const T* src, int h, int w, int c, std::span<U> dst) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        dst[(std::size_t(y) * w + x) * c + ch] = U(src[(std::size_t(ch) * h + y) * w + x]);
}

/// Mean squared error; the desk-scale reconstruction term.
template <typename T>
T image_reconstruction_loss(std::span<const T> x, std::span<const T> x_hat) {
  if (x.size() != x_hat.size()) throw ShapeMismatch("reconstruction shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x_hat[i]) - double(x[i]);
    acc += d * d;
  }
  return x.empty() ? T(0) : T(acc / double(x.size()));
}

/// d/dx̂ of image_reconstruction_loss: 2(x̂ - x)/N.
template <typename T>
std::vector<T> image_reconstruction_grad(std::span<const T> x, std::span<const T> x_hat) {
  std::vector<T> g(x.size());
  const T scale = T(2) / T(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = scale * (x_hat[i] - x[i]);
  return g;
}

template <typename T>
struct TrainStepResult {
  double reconstruction = 0.0;
  double vq = 0.0;
  std::vector<int> indices;  // concatenated over the batch
};

template <typename T>
class Tokenizer {
 public:
  explicit Tokenizer(TokenizerConfig cfg, std::uint64_t seed = 0)
      : cfg_(cfg), codebook_("codebook", {cfg.codebook_size, cfg.codebook_dim}, false) {
    cfg_.check();
    build();
    init(seed);
  }

  const TokenizerConfig& config() const { return cfg_; }

  ParamList<T> parameters() {
    ParamList<T> out;
    enc_in_.collect(out);
    for (auto& l : enc_levels_) {
      l.down.collect(out);
      l.res.collect(out);
    }
    enc_out_.collect(out);
    dec_in_.collect(out);
    dec_mid_.collect(out);
    for (auto& l : dec_levels_) {
      l.conv.collect(out);
      if (l.has_res) l.res.collect(out);
    }
    dec_out_.collect(out);
    out.push_back(&codebook_);
    return out;
  }

  quant::Codebook<T> codebook() const {
    quant::Codebook<T> book(cfg_.codebook_size, cfg_.codebook_dim);
    book.vectors.assign(codebook_.value.begin(), codebook_.value.end());
    return book;
  }

  void set_codebook(const quant::Codebook<T>& book) {
    if (book.size != cfg_.codebook_size || book.dim != cfg_.codebook_dim)
      throw ShapeMismatch("codebook shape does not match config");
    codebook_.value.assign(book.vectors.begin(), book.vectors.end());
  }

  Param<T>& codebook_param() { return codebook_; }

  /// Input tensor N×C×H×W → pre-quantization features N×d×h×w.
  Tensor4<T> encode_features(const Tensor4<T>& x, bool train) {
    check_input(x);
    Tensor4<T> h = enc_in_.forward(x, train);
    for (auto& l : enc_levels_) h = l.res.forward(l.down.forward(h, train), train);
    return enc_out_.forward(enc_act_.forward(h, train), train);
  }

  Tensor4<T> encode_features_backward(const Tensor4<T>& df) {
    Tensor4<T> g = enc_act_.backward(enc_out_.backward(df));
    for (auto it = enc_levels_.rbegin(); it != enc_levels_.rend(); ++it)
      g = it->down.backward(it->res.backward(g));
    return enc_in_.backward(g);
  }

  /// Quantized features N×d×h×w → reconstruction N×C×H×W (unclamped).
  Tensor4<T> decode_features(const Tensor4<T>& z, bool train) {
    Tensor4<T> h = dec_mid_.forward(dec_in_.forward(z, train), train);
    for (auto& l : dec_levels_) {
      h = l.conv.forward(nn::upsample2x(h), train);
      if (l.has_res) h = l.res.forward(h, train);
    }
    return dec_out_.forward(dec_act_.forward(h, train), train);
  }

  Tensor4<T> decode_features_backward(const Tensor4<T>& dy) {
    Tensor4<T> g = dec_act_.backward(dec_out_.backward(dy));
    for (auto it = dec_levels_.rbegin(); it != dec_levels_.rend(); ++it) {
      if (it->has_res) g = it->res.backward(g);
      g = nn::upsample2x_backward(it->conv.backward(g));
    }
    return dec_in_.backward(dec_mid_.backward(g));
  }

  /// Per-sample quantization of an N×d×h×w feature tensor.
  std::vector<quant::QuantizeResult<T>> quantize_batch(const Tensor4<T>& f) const {
    const auto book = codebook();
    std::vector<quant::QuantizeResult<T>> out;
    out.reserve(std::size_t(f.n));
    std::vector<T> hwc(f.sample_size());
    for (int i = 0; i < f.n; ++i) {
      chw_to_hwc<T, T>(f.sample(i), f.h, f.w, f.c, hwc);
      out.push_back(quant::quantize<T>(hwc, f.h, f.w, book));
    }
    return out;
  }

  /// Forward + backward for one batch; gradients accumulate into parameters.
  /// `loss_scale` multiplies the batch loss (for gradient accumulation).
  TrainStepResult<T> train_step(const Tensor4<T>& x, double loss_scale = 1.0) {
    Tensor4<T> f = encode_features(x, true);
    auto qs = quantize_batch(f);
    Tensor4<T> z(f.n, f.c, f.h, f.w);
    for (int i = 0; i < f.n; ++i)
      hwc_to_chw<T, T>(std::span<const T>(qs[std::size_t(i)].quantized), f.h, f.w, f.c, z.sample(i));
    Tensor4<T> y = decode_features(z, true);

    TrainStepResult<T> r;
    r.reconstruction = double(image_reconstruction_loss<T>(x.data, y.data));
    Tensor4<T> dy(y.n, y.c, y.h, y.w);
    const auto grad = image_reconstruction_grad<T>(x.data, y.data);
    dy.data.assign(grad.begin(), grad.end());
    for (auto& g : dy.data) g *= T(loss_scale);

    // Straight-through: the decoder's input gradient flows to the encoder unchanged.
    Tensor4<T> df = decode_features_backward(dy);
    const T beta = T(cfg_.commitment_weight);
    const T per_sample = T(loss_scale / double(f.n));
    std::vector<T> f_hwc(f.sample_size()), df_hwc(f.sample_size());
    for (int i = 0; i < f.n; ++i) {
      const auto& q = qs[std::size_t(i)];
      r.vq += double(quant::vq_loss(q, beta)) / double(f.n);
      chw_to_hwc<T, T>(f.sample(i), f.h, f.w, f.c, std::span<T>(f_hwc));
      chw_to_hwc<T, T>(df.sample(i), f.h, f.w, f.c, std::span<T>(df_hwc));
      quant::vq_loss_backward<T>(f_hwc, q, beta, per_sample, df_hwc, codebook_.grad);
      hwc_to_chw<T, T>(std::span<const T>(df_hwc), f.h, f.w, f.c, df.sample(i));
      r.indices.insert(r.indices.end(), q.indices.begin(), q.indices.end());
    }
    encode_features_backward(df);
    last_features_ = std::move(f);
    return r;
  }

  /// Features from the most recent train_step, N×d×h×w.
  const Tensor4<T>& last_features() const { return last_features_; }

  /// Encodes one channel-last H×W×C sample.
  std::pair<TokenGrid, quant::QuantizeResult<T>> encode(std::span<const T> input) {
    if (input.size() != std::size_t(cfg_.height) * cfg_.width * cfg_.input_channels)
      throw ShapeMismatch("encode input has wrong size");
    Tensor4<T> x(1, cfg_.input_channels, cfg_.height, cfg_.width);
    hwc_to_chw<T, T>(input, cfg_.height, cfg_.width, cfg_.input_channels, x.sample(0));
    auto qs = quantize_batch(encode_features(x, false));
    TokenGrid g{cfg_.grid_height(), cfg_.grid_width(), cfg_.modality, qs[0].indices};
    return {std::move(g), std::move(qs[0])};
  }

  std::vector<TokenGrid> encode_batch(const Tensor4<T>& x) {
    auto qs = quantize_batch(encode_features(x, false));
    std::vector<TokenGrid> out;
    for (auto& q : qs) out.push_back(TokenGrid{q.height, q.width, cfg_.modality, std::move(q.indices)});
    return out;
  }

  /// Decodes token grids into N×C×H×W; image outputs are clamped to [-1, 1].
  Tensor4<T> decode_batch(std::span<const TokenGrid> grids) {
    const int h = cfg_.grid_height(), w = cfg_.grid_width(), d = cfg_.codebook_dim;
    Tensor4<T> z(int(grids.size()), d, h, w);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      const auto& g = grids[i];
      if (g.height != h || g.width != w || g.indices.size() != std::size_t(h) * w)
        throw ShapeMismatch("token grid shape does not match tokenizer");
      for (int p = 0; p < h * w; ++p) {
        const int k = g.indices[std::size_t(p)];
        if (k < 0 || k >= cfg_.codebook_size) throw InvalidIndex("token index " + std::to_string(k));
        for (int j = 0; j < d; ++j)
          z.sample(int(i))[std::size_t(j) * h * w + p] = codebook_.value[std::size_t(k) * d + j];
      }
    }
    Tensor4<T> y = decode_features(z, false);
    if (cfg_.modality == Modality::Image)
      for (auto& v : y.data) v = std::clamp(v, T(-1), T(1));
    return y;
  }

  /// Decodes one grid to a channel-last H×W×C buffer.
  std::vector<T> decode(const TokenGrid& grid) {
    Tensor4<T> y = decode_batch(std::span<const TokenGrid>(&grid, 1));
    std::vector<T> out(y.sample_size());
    chw_to_hwc<T, T>(y.sample(0), y.h, y.w, y.c, std::span<T>(out));
    return out;
  }

  /// Camera map → channel-last encoder input with moments rescaled.
  std::vector<T> raymap_input(const geometry::RayMap& map) const {
    std::vector<T> out(map.size() * 6);
    const auto rays = map.rays();
    for (std::size_t i = 0; i < rays.size(); ++i)
      for (int k = 0; k < 3; ++k) {
        out[i * 6 + k] = T(rays[i].moment[k] / cfg_.moment_scale);
        out[i * 6 + 3 + k] = T(rays[i].direction[k]);
      }
    return out;
  }

  /// Decoder output (channel-last, scaled moments) → normalized ray map.
  geometry::RayMap output_raymap(std::span<const T> out) const {
    std::vector<double> raw(out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      raw[i] = double(out[i]) * ((i % 6) < 3 ? cfg_.moment_scale : 1.0);
    return geometry::normalize_raymap(raw, cfg_.height, cfg_.width);
  }

  geometry::RayMap decode_raymap(const TokenGrid& grid) { return output_raymap(decode(grid)); }

 private:
  struct EncLevel {
    nn::Conv2d<T> down;
    nn::ResidualUnit<T> res;
  };
  struct DecLevel {
    nn::Conv2d<T> conv;
    nn::ResidualUnit<T> res;
    bool has_res = false;
  };

  void check_input(const Tensor4<T>& x) const {
    if (x.c != cfg_.input_channels || x.h != cfg_.height || x.w != cfg_.width)
      throw ShapeMismatch("tokenizer input shape mismatch");
  }

  void build() {
    const int n = cfg_.num_downsamples;
    enc_in_ = nn::Conv2d<T>("enc.in", cfg_.input_channels, cfg_.channels_at(0), 3, 1);
    for (int l = 0; l < n; ++l) {
      const std::string name = "enc.level" + std::to_string(l);
      enc_levels_.push_back(EncLevel{nn::Conv2d<T>(name + ".down", cfg_.channels_at(l), cfg_.channels_at(l + 1), 3, 2),
                                     nn::ResidualUnit<T>(name + ".res", cfg_.channels_at(l + 1))});
    }
    enc_out_ = nn::Conv2d<T>("enc.out", cfg_.channels_at(n), cfg_.codebook_dim, 1, 1);
    dec_in_ = nn::Conv2d<T>("dec.in", cfg_.codebook_dim, cfg_.channels_at(n), 3, 1);
    dec_mid_ = nn::ResidualUnit<T>("dec.mid", cfg_.channels_at(n));
    for (int l = n; l > 0; --l) {
      const std::string name = "dec.level" + std::to_string(l);
      DecLevel lvl{nn::Conv2d<T>(name + ".conv", cfg_.channels_at(l), cfg_.channels_at(l - 1), 3, 1),
                   nn::ResidualUnit<T>(), l > 1};
      if (lvl.has_res) lvl.res = nn::ResidualUnit<T>(name + ".res", cfg_.channels_at(l - 1));
      dec_levels_.push_back(std::move(lvl));
    }
    dec_out_ = nn::Conv2d<T>("dec.out", cfg_.channels_at(0), cfg_.input_channels, 3, 1);
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    enc_in_.init(rng);
    for (auto& l : enc_levels_) {
      l.down.init(rng);
      l.res.init(rng);
    }
    enc_out_.init(rng);
    dec_in_.init(rng);
    dec_mid_.init(rng);
    for (auto& l : dec_levels_) {
      l.conv.init(rng);
      if (l.has_res) l.res.init(rng);
    }
    dec_out_.init(rng);
    set_codebook(quant::init_codebook<T>(nn::mix_seed(seed, 0xC0DE), cfg_.codebook_size, cfg_.codebook_dim));
  }

  TokenizerConfig cfg_;
  nn::Conv2d<T> enc_in_;
  std::vector<EncLevel> enc_levels_;
  nn::SiLU<T> enc_act_;
  nn::Conv2d<T> enc_out_;
  nn::Conv2d<T> dec_in_;
  nn::ResidualUnit<T> dec_mid_;
  std::vector<DecLevel> dec_levels_;
  nn::SiLU<T> dec_act_;
  nn::Conv2d<T> dec_out_;
  Param<T> codebook_;
  Tensor4<T> last_features_;
};

struct TokenizerTrainConfig {
  std::int64_t steps = 1000;
  int batch_size = 32;
  nn::StepDecaySchedule schedule{1e-4, 1e-4, 1.0, 0};
  double grad_clip = 1.0;
  nn::AdamWConfig adam{0.9, 0.95, 1e-8, 0.0};
  std::uint64_t seed = 0;
  int log_every = 50;
};

struct TokenizerLogRecord {
  std::int64_t step = 0;  // last step in the window
  double reconstruction = 0.0;
  double vq = 0.0;
  double grad_norm = 0.0;
  double usage = 0.0;
};

/// Everything besides parameters and optimizer moments needed to resume.
struct TokenizerTrainerState {
  std::int64_t step = 0;
  TokenizerLogRecord window;
  int window_count = 0;
  std::vector<std::uint64_t> window_usage;
  std::vector<std::int64_t> last_used;
};

/// Deterministic per-step batch source: (step, rng seeded from step) → N×C×H×W.
template <typename T>
using BatchSource = std::function<Tensor4<T>(std::int64_t step, std::mt19937_64& rng)>;

/// Resumable tokenizer training loop state.
template <typename T>
class TokenizerTrainer {
 public:
  TokenizerTrainer(Tokenizer<T>& tok, TokenizerTrainConfig cfg)
      : tok_(tok), cfg_(cfg), params_(tok.parameters()), opt_(params_, cfg.adam),
        last_used_(std::size_t(tok.config().codebook_size), 0) {}

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  nn::AdamW<T>& optimizer() { return opt_; }
  const ParamList<T>& params() const { return params_; }
  const std::vector<TokenizerLogRecord>& log() const { return log_; }

  TokenizerTrainerState state() const {
    return {step_, window_, window_count_, window_usage_.counts(), last_used_};
  }
  void restore(const TokenizerTrainerState& s) {
    step_ = s.step;
    window_ = s.window;
    window_count_ = s.window_count;
    window_usage_ = s.window_usage.empty() ? quant::UsageCounter() : quant::UsageCounter(s.window_usage);
    if (s.last_used.size() != last_used_.size()) throw std::invalid_argument("trainer state does not match codebook");
    last_used_ = s.last_used;
    opt_.set_steps(s.step);
  }

  /// Runs one optimizer step. Returns the step's total loss.
  double run_step(const BatchSource<T>& source) {
    std::mt19937_64 rng(nn::mix_seed(cfg_.seed, std::uint64_t(step_)));
    Tensor4<T> batch = source(step_, rng);
    if (step_ == 0 && tok_.config().data_driven_init) init_codebook_from(batch, rng);
    nn::zero_grads(params_);
    auto r = tok_.train_step(batch);
    const double loss = r.reconstruction + r.vq;
    if (!std::isfinite(loss)) throw NonFiniteLoss(step_, "tokenizer loss");
    const double norm = nn::clip_grad_norm(params_, cfg_.grad_clip);
    opt_.step(cfg_.schedule.at(step_, cfg_.steps));

    window_.reconstruction += r.reconstruction;
    window_.vq += r.vq;
    window_.grad_norm += norm;
    if (window_usage_.size() == 0) window_usage_ = quant::UsageCounter(tok_.config().codebook_size);
    window_usage_.add(r.indices);
    for (int k : r.indices) last_used_[std::size_t(k)] = step_;
    ++window_count_;

    if (tok_.config().dead_code_restart_every > 0 && (step_ + 1) % tok_.config().dead_code_restart_every == 0)
      restart_dead_codes(rng);

    if (window_count_ == cfg_.log_every) flush_window();
    ++step_;
    return loss;
  }

  void run(const BatchSource<T>& source, std::int64_t until,
           const std::function<void(const TokenizerLogRecord&)>& on_log = {}) {
    while (step_ < until) {
      const std::size_t before = log_.size();
      run_step(source);
      if (on_log && log_.size() > before) on_log(log_.back());
    }
  }

 private:
  void flush_window() {
    const double n = double(window_count_);
    TokenizerLogRecord rec{step_, window_.reconstruction / n, window_.vq / n, window_.grad_norm / n,
                           quant::usage(window_usage_)};
    log_.push_back(rec);
    window_ = {};
    window_count_ = 0;
    window_usage_ = quant::UsageCounter(tok_.config().codebook_size);
  }

  std::vector<T> features_hwc(const Tensor4<T>& f) const {
    std::vector<T> all;
    std::vector<T> hwc(f.sample_size());
    for (int i = 0; i < f.n; ++i) {
      chw_to_hwc<T, T>(f.sample(i), f.h, f.w, f.c, std::span<T>(hwc));
      all.insert(all.end(), hwc.begin(), hwc.end());
    }
    return all;
  }

  void init_codebook_from(const Tensor4<T>& batch, std::mt19937_64& rng) {
    const auto f = features_hwc(tok_.encode_features(batch, false));
    const int d = tok_.config().codebook_dim;
    const int k = tok_.config().codebook_size;
    std::vector<T> samples = f;
    // Small batches may hold fewer cells than codes; jittered repeats fill the gap.
    std::normal_distribution<double> jitter(0.0, 1e-3);
    while (samples.size() / std::size_t(d) < std::size_t(k)) {
      for (T v : f) samples.push_back(T(double(v) + jitter(rng)));
    }
    tok_.set_codebook(quant::init_codebook<T>(rng(), k, d, std::span<const T>(samples)));
  }

  void restart_dead_codes(std::mt19937_64& rng) {
    const auto f = features_hwc(tok_.last_features());
    const int d = tok_.config().codebook_dim;
    const std::size_t cells = f.size() / std::size_t(d);
    std::uniform_int_distribution<std::size_t> pick(0, cells - 1);
    auto& book = tok_.codebook_param().value;
    const std::int64_t horizon = tok_.config().dead_code_restart_every;
    for (std::size_t k = 0; k < last_used_.size(); ++k) {
      if (step_ - last_used_[k] < horizon) continue;
      const std::size_t src = pick(rng);
      for (int j = 0; j < d; ++j) book[k * d + j] = f[src * d + j];
      last_used_[k] = step_;
    }
  }

  Tokenizer<T>& tok_;
  TokenizerTrainConfig cfg_;
  ParamList<T> params_;
  nn::AdamW<T> opt_;
  std::int64_t step_ = 0;
  TokenizerLogRecord window_{};
  int window_count_ = 0;
  quant::UsageCounter window_usage_;
  std::vector<std::int64_t> last_used_;
  std::vector<TokenizerLogRecord> log_;
};

}  // namespace gst::tok
