#pragma once

// Decoder-only transformer: pre-norm blocks with RMSNorm, QK-Norm, 2D rotary
// embeddings and a gated SiLU MLP. Supports arbitrary boolean attention masks,
// a hand-written backward pass, and key/value-cached incremental decoding.

#include "gst/nn/layers.hpp"
#include "gst/nn/optim.hpp"
#include "gst/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::tf {

using nn::Matrix;
using nn::Param;
using nn::ParamList;
using seq::AttentionMask;
using seq::PositionTag;

class SequenceTooLong : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct ModelConfig {
  int num_layers = 8;
  int model_dim = 256;
  int num_heads = 8;
  int vocab_size = 0;
  int max_seq_len = 512;
  int num_segments = seq::kNumSegments;
  int mlp_ratio = 4;
  double rope_base = 10000.0;
  double dropout = 0.0;  // accepted for config compatibility; training runs without dropout

  int head_dim() const { return model_dim / num_heads; }
  int mlp_hidden() const { return mlp_ratio * model_dim; }

  void check() const {
    if (num_layers < 1 || model_dim < 1 || num_heads < 1 || vocab_size < 1 || max_seq_len < 1)
      throw std::invalid_argument("model config sizes must be positive");
    if (model_dim % num_heads != 0) throw std::invalid_argument("model_dim must be divisible by num_heads");
    if (head_dim() % 4 != 0) throw std::invalid_argument("head_dim must be divisible by 4 for 2D RoPE");
    if (dropout != 0.0) throw std::invalid_argument("dropout is not supported");
  }
};

/// Rotation angles per position: first half of each head uses the row, second half the col.
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(std::span<const PositionTag> tags, int head_dim, double base) : pairs_(head_dim / 2) {
    const int quarter = head_dim / 4;
    cos_.resize(tags.size() * std::size_t(pairs_));
    sin_.resize(tags.size() * std::size_t(pairs_));
    for (std::size_t t = 0; t < tags.size(); ++t) {
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(base, -double(i) / double(quarter));
        const double a_row = tags[t].row * freq;
        const double a_col = tags[t].col * freq;
        cos_[t * pairs_ + i] = std::cos(a_row);
        sin_[t * pairs_ + i] = std::sin(a_row);
        cos_[t * pairs_ + quarter + i] = std::cos(a_col);
        sin_[t * pairs_ + quarter + i] = std::sin(a_col);
      }
    }
  }

  /// Rotates one head vector in place; `inverse` applies the transpose rotation.
  template <typename T>
  void apply(T* v, std::size_t position, bool inverse = false) const {
    for (int p = 0; p < pairs_; ++p) {
      const double c = cos_[position * pairs_ + p];
      const double s = inverse ? -sin_[position * pairs_ + p] : sin_[position * pairs_ + p];
      const double x0 = double(v[2 * p]), x1 = double(v[2 * p + 1]);
      v[2 * p] = T(x0 * c - x1 * s);
      v[2 * p + 1] = T(x0 * s + x1 * c);
    }
  }

 private:
  int pairs_ = 0;
  std::vector<double> cos_, sin_;
};

/// 2D rotary embedding of per-position head vectors (rows of `x`, width head_dim).
template <typename T>
Matrix<T> rope2d(const Matrix<T>& x, std::span<const PositionTag> tags, double base) {
  const RopeTable table(tags, int(x.cols()), base);
  Matrix<T> out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) table.apply(out.row(r).data(), std::size_t(r));
  return out;
}

/// Per-vector RMS normalization followed by a scalar gain.
template <typename T>
void rms_normalize(const T* x, int n, T gain, T* out, T* inv_out = nullptr, double eps = 1e-6) {
  double ss = 0.0;
  for (int i = 0; i < n; ++i) ss += double(x[i]) * double(x[i]);
  const T inv = T(1.0 / std::sqrt(ss / n + eps));
  if (inv_out) *inv_out = inv;
  for (int i = 0; i < n; ++i) out[i] = x[i] * inv * gain;
}

/// QK-Norm on whole matrices of head vectors (rows), returning normalized copies.
template <typename T>
std::pair<Matrix<T>, Matrix<T>> qk_norm(const Matrix<T>& q, const Matrix<T>& k, T q_scale, T k_scale) {
  Matrix<T> qn(q.rows(), q.cols()), kn(k.rows(), k.cols());
  for (Eigen::Index r = 0; r < q.rows(); ++r) rms_normalize(q.row(r).data(), int(q.cols()), q_scale, qn.row(r).data());
  for (Eigen::Index r = 0; r < k.rows(); ++r) rms_normalize(k.row(r).data(), int(k.cols()), k_scale, kn.row(r).data());
  return {qn, kn};
}

/// Per-layer key/value cache for one generation stream.
template <typename T>
struct KVCache {
  int fill = 0;
  std::vector<Matrix<T>> keys;    // per layer: max_len × model_dim, post-norm post-rope
  std::vector<Matrix<T>> values;  // per layer: max_len × model_dim

  KVCache() = default;
  KVCache(const ModelConfig& cfg) : keys(std::size_t(cfg.num_layers)), values(std::size_t(cfg.num_layers)) {
    for (auto& k : keys) k = Matrix<T>::Zero(cfg.max_seq_len, cfg.model_dim);
    for (auto& v : values) v = Matrix<T>::Zero(cfg.max_seq_len, cfg.model_dim);
  }
};

/// One batch of equal-length sequences sharing a mask and position tags.
struct Batch {
  int batch_size = 0;
  int length = 0;
  std::vector<int> ids;        // batch_size × length
  std::vector<int> targets;    // batch_size × length
  std::vector<float> weights;  // batch_size × length
};

template <typename T>
class Transformer {
 public:
  explicit Transformer(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.check();
    const int d = cfg_.model_dim, f = cfg_.mlp_hidden(), v = cfg_.vocab_size;
    token_emb_ = Param<T>("tok_emb", {v, d});
    segment_emb_ = Param<T>("seg_emb", {cfg_.num_segments, d});
    for (int l = 0; l < cfg_.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      Layer layer;
      layer.attn_norm = nn::RMSNorm<T>(p + ".attn_norm", d);
      layer.wq = nn::Linear<T>(p + ".wq", d, d);
      layer.wk = nn::Linear<T>(p + ".wk", d, d);
      layer.wv = nn::Linear<T>(p + ".wv", d, d);
      layer.wo = nn::Linear<T>(p + ".wo", d, d);
      layer.q_scale = Param<T>(p + ".q_scale", {cfg_.num_heads}, false);
      layer.k_scale = Param<T>(p + ".k_scale", {cfg_.num_heads}, false);
      layer.mlp_norm = nn::RMSNorm<T>(p + ".mlp_norm", d);
      layer.w_gate = nn::Linear<T>(p + ".w_gate", d, f);
      layer.w_up = nn::Linear<T>(p + ".w_up", d, f);
      layer.w_down = nn::Linear<T>(p + ".w_down", f, d);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = nn::RMSNorm<T>("final_norm", d);
    head_ = nn::Linear<T>("head", d, v);
    init(seed);
  }

  const ModelConfig& config() const { return cfg_; }

  ParamList<T> parameters() {
    ParamList<T> out{&token_emb_, &segment_emb_};
    for (auto& l : layers_) {
      l.attn_norm.collect(out);
      l.wq.collect(out);
      l.wk.collect(out);
      l.wv.collect(out);
      out.push_back(&l.q_scale);
      out.push_back(&l.k_scale);
      l.wo.collect(out);
      l.mlp_norm.collect(out);
      l.w_gate.collect(out);
      l.w_up.collect(out);
      l.w_down.collect(out);
    }
    final_norm_.collect(out);
    head_.collect(out);
    return out;
  }

  /// Logits (batch·length × V) for a batch; caches activations when `train`.
  Matrix<T> forward(const std::vector<int>& ids, int batch_size, std::span<const PositionTag> tags,
                    const AttentionMask& mask, bool train) {
    const int n = int(tags.size());
    if (n > cfg_.max_seq_len) throw SequenceTooLong("sequence of " + std::to_string(n) + " exceeds max length");
    if (mask.size() != n || ids.size() != std::size_t(batch_size) * n)
      throw std::invalid_argument("ids, tags and mask sizes disagree");
    const RopeTable rope(tags, cfg_.head_dim(), cfg_.rope_base);
    Matrix<T> x = embed(ids, tags, batch_size);
    if (train) {
      cache_ids_ = ids;
      cache_tags_.assign(tags.begin(), tags.end());
      cache_batch_ = batch_size;
      cache_mask_ = mask;
    }
    for (auto& layer : layers_) x = layer_forward(layer, x, batch_size, n, rope, mask, train);
    return head_.forward(final_norm_.forward(x, train), train);
  }

  /// Backward from logits gradient (same shape as forward output).
  void backward(const Matrix<T>& dlogits) {
    const int n = int(cache_tags_.size());
    const RopeTable rope(cache_tags_, cfg_.head_dim(), cfg_.rope_base);
    Matrix<T> dx = final_norm_.backward(head_.backward(dlogits));
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      dx = layer_backward(*it, dx, cache_batch_, n, rope, cache_mask_);
    const int d = cfg_.model_dim;
    for (std::size_t r = 0; r < cache_ids_.size(); ++r) {
      const std::size_t id = std::size_t(cache_ids_[r]);
      const std::size_t seg = std::size_t(cache_tags_[r % std::size_t(n)].segment);
      for (int j = 0; j < d; ++j) {
        token_emb_.grad[id * d + j] += dx(Eigen::Index(r), j);
        segment_emb_.grad[seg * d + j] += dx(Eigen::Index(r), j);
      }
    }
  }

  /// Forward + backward of the weighted cross-entropy. Each sequence contributes
  /// its weighted-mean token loss; the batch loss is the mean over sequences,
  /// multiplied by `loss_scale`. Returns the unscaled batch loss.
  double loss_and_backward(const Batch& b, std::span<const PositionTag> tags, const AttentionMask& mask,
                           double loss_scale = 1.0) {
    Matrix<T> logits = forward(b.ids, b.batch_size, tags, mask, true);
    Matrix<T> dlogits;
    const double loss = cross_entropy(logits, b, &dlogits, loss_scale);
    backward(dlogits);
    return loss;
  }

  double loss(const Batch& b, std::span<const PositionTag> tags, const AttentionMask& mask) {
    Matrix<T> logits = forward(b.ids, b.batch_size, tags, mask, false);
    return cross_entropy(logits, b, nullptr, 1.0);
  }

  /// Runs new positions [cache.fill, cache.fill + ids.size()) against the cache.
  /// `tags` and `mask` describe the whole sequence.
  Matrix<T> forward_cached(std::span<const int> ids, std::span<const PositionTag> tags, const AttentionMask& mask,
                           KVCache<T>& cache) {
    const int start = cache.fill;
    const int m = int(ids.size());
    if (start + m > cfg_.max_seq_len || start + m > int(tags.size()))
      throw SequenceTooLong("cached decoding past max length");
    const int d = cfg_.model_dim, hd = cfg_.head_dim();
    const RopeTable rope(tags, hd, cfg_.rope_base);
    Matrix<T> x(m, d);
    for (int i = 0; i < m; ++i) embed_row(ids[std::size_t(i)], tags[std::size_t(start + i)], x.row(i).data());
    const T inv_sqrt = T(1.0 / std::sqrt(double(hd)));
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      auto& L = layers_[li];
      Matrix<T> h = L.attn_norm.forward(x, false);
      Matrix<T> q = L.wq.apply(h), k = L.wk.apply(h), v = L.wv.apply(h);
      for (int i = 0; i < m; ++i)
        for (int hh = 0; hh < cfg_.num_heads; ++hh) {
          T* qp = q.row(i).data() + hh * hd;
          T* kp = k.row(i).data() + hh * hd;
          rms_normalize(qp, hd, L.q_scale.value[std::size_t(hh)], qp);
          rms_normalize(kp, hd, L.k_scale.value[std::size_t(hh)], kp);
          rope.apply(qp, std::size_t(start + i));
          rope.apply(kp, std::size_t(start + i));
        }
      cache.keys[li].middleRows(start, m) = k;
      cache.values[li].middleRows(start, m) = v;
      Matrix<T> attn(m, d);
      std::vector<T> scores(std::size_t(start + m));
      for (int i = 0; i < m; ++i) {
        const int qpos = start + i;
        for (int hh = 0; hh < cfg_.num_heads; ++hh) {
          const T* qp = q.row(i).data() + hh * hd;
          T mx = -std::numeric_limits<T>::infinity();
          for (int kpos = 0; kpos <= qpos; ++kpos) {
            if (!mask.allowed(qpos, kpos)) continue;
            const T* kp = cache.keys[li].row(kpos).data() + hh * hd;
            T s = 0;
            for (int j = 0; j < hd; ++j) s += qp[j] * kp[j];
            scores[std::size_t(kpos)] = s * inv_sqrt;
            mx = std::max(mx, scores[std::size_t(kpos)]);
          }
          T z = 0;
          for (int kpos = 0; kpos <= qpos; ++kpos) {
            if (!mask.allowed(qpos, kpos)) continue;
            scores[std::size_t(kpos)] = std::exp(scores[std::size_t(kpos)] - mx);
            z += scores[std::size_t(kpos)];
          }
          T* out = attn.row(i).data() + hh * hd;
          std::fill(out, out + hd, T(0));
          for (int kpos = 0; kpos <= qpos; ++kpos) {
            if (!mask.allowed(qpos, kpos)) continue;
            const T p = scores[std::size_t(kpos)] / z;
            const T* vp = cache.values[li].row(kpos).data() + hh * hd;
            for (int j = 0; j < hd; ++j) out[j] += p * vp[j];
          }
        }
      }
      x += L.wo.apply(attn);
      x += mlp_apply(L, L.mlp_norm.forward(x, false));
    }
    cache.fill += m;
    return head_.apply(final_norm_.forward(x, false));
  }

 private:
  struct Layer {
    nn::RMSNorm<T> attn_norm;
    nn::Linear<T> wq, wk, wv, wo;
    Param<T> q_scale, k_scale;
    nn::RMSNorm<T> mlp_norm;
    nn::Linear<T> w_gate, w_up, w_down;
    // training caches
    Matrix<T> q_hat, k_hat;   // unit-RMS heads before gain and rotation
    std::vector<T> q_inv, k_inv;
    Matrix<T> q_rot, k_rot, v;
    std::vector<Matrix<T>> probs;  // per (batch, head)
    Matrix<T> gate, up;
  };

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double std0 = 0.02;
    const double out_std = std0 / std::sqrt(2.0 * cfg_.num_layers);
    nn::fill_normal(token_emb_, rng, std0);
    nn::fill_normal(segment_emb_, rng, std0);
    for (auto& l : layers_) {
      l.wq.init(rng, std0);
      l.wk.init(rng, std0);
      l.wv.init(rng, std0);
      l.wo.init(rng, out_std);
      std::fill(l.q_scale.value.begin(), l.q_scale.value.end(), T(1));
      std::fill(l.k_scale.value.begin(), l.k_scale.value.end(), T(1));
      l.w_gate.init(rng, std0);
      l.w_up.init(rng, std0);
      l.w_down.init(rng, out_std);
    }
    head_.init(rng, std0);
  }

  void embed_row(int id, const PositionTag& tag, T* out) const {
    if (id < 0 || id >= cfg_.vocab_size) throw std::out_of_range("token id outside vocabulary");
    const int d = cfg_.model_dim;
    for (int j = 0; j < d; ++j)
      out[j] = token_emb_.value[std::size_t(id) * d + j] + segment_emb_.value[std::size_t(tag.segment) * d + j];
  }

  Matrix<T> embed(const std::vector<int>& ids, std::span<const PositionTag> tags, int batch_size) const {
    const int n = int(tags.size());
    Matrix<T> x(Eigen::Index(batch_size) * n, cfg_.model_dim);
    for (int b = 0; b < batch_size; ++b)
      for (int t = 0; t < n; ++t)
        embed_row(ids[std::size_t(b) * n + t], tags[std::size_t(t)], x.row(Eigen::Index(b) * n + t).data());
    return x;
  }

  Matrix<T> mlp_apply(const Layer& L, const Matrix<T>& h) const {
    Matrix<T> g = L.w_gate.apply(h);
    const Matrix<T> u = L.w_up.apply(h);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nn::silu(g.data()[i]) * u.data()[i];
    return L.w_down.apply(g);
  }

  Matrix<T> layer_forward(Layer& L, const Matrix<T>& x_in, int batch, int n, const RopeTable& rope,
                          const AttentionMask& mask, bool train) {
    const int hd = cfg_.head_dim(), heads = cfg_.num_heads;
    const Eigen::Index rows = x_in.rows();
    Matrix<T> h = L.attn_norm.forward(x_in, train);
    Matrix<T> q = L.wq.forward(h, train), k = L.wk.forward(h, train), v = L.wv.forward(h, train);
    Matrix<T> q_hat(rows, q.cols()), k_hat(rows, k.cols());
    std::vector<T> q_inv(std::size_t(rows) * heads), k_inv(std::size_t(rows) * heads);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t pos = std::size_t(r % n);
      for (int hh = 0; hh < heads; ++hh) {
        const std::size_t slot = std::size_t(r) * heads + hh;
        rms_normalize(q.row(r).data() + hh * hd, hd, T(1), q_hat.row(r).data() + hh * hd, &q_inv[slot]);
        rms_normalize(k.row(r).data() + hh * hd, hd, T(1), k_hat.row(r).data() + hh * hd, &k_inv[slot]);
        T* qp = q.row(r).data() + hh * hd;
        T* kp = k.row(r).data() + hh * hd;
        const T qs = L.q_scale.value[std::size_t(hh)], ks = L.k_scale.value[std::size_t(hh)];
        for (int j = 0; j < hd; ++j) {
          qp[j] = q_hat(r, hh * hd + j) * qs;
          kp[j] = k_hat(r, hh * hd + j) * ks;
        }
        rope.apply(qp, pos);
        rope.apply(kp, pos);
      }
    }
    const T inv_sqrt = T(1.0 / std::sqrt(double(hd)));
    Matrix<T> attn(rows, cfg_.model_dim);
    if (train) L.probs.assign(std::size_t(batch) * heads, Matrix<T>());
    for (int b = 0; b < batch; ++b) {
      for (int hh = 0; hh < heads; ++hh) {
        auto qb = q.block(Eigen::Index(b) * n, hh * hd, n, hd);
        auto kb = k.block(Eigen::Index(b) * n, hh * hd, n, hd);
        auto vb = v.block(Eigen::Index(b) * n, hh * hd, n, hd);
        Matrix<T> s = (qb * kb.transpose()) * inv_sqrt;
        masked_softmax(s, mask);
        attn.block(Eigen::Index(b) * n, hh * hd, n, hd).noalias() = s * vb;
        if (train) L.probs[std::size_t(b) * heads + hh] = std::move(s);
      }
    }
    if (train) {
      L.q_hat = std::move(q_hat);
      L.k_hat = std::move(k_hat);
      L.q_inv = std::move(q_inv);
      L.k_inv = std::move(k_inv);
      L.q_rot = q;
      L.k_rot = k;
      L.v = v;
    }
    Matrix<T> x = x_in + L.wo.forward(attn, train);
    Matrix<T> h2 = L.mlp_norm.forward(x, train);
    Matrix<T> g = L.w_gate.forward(h2, train);
    Matrix<T> u = L.w_up.forward(h2, train);
    Matrix<T> act(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.size(); ++i) act.data()[i] = nn::silu(g.data()[i]) * u.data()[i];
    if (train) {
      L.gate = std::move(g);
      L.up = std::move(u);
    }
    x += L.w_down.forward(act, train);
    return x;
  }

  static void masked_softmax(Matrix<T>& s, const AttentionMask& mask) {
    for (Eigen::Index qi = 0; qi < s.rows(); ++qi) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index ki = 0; ki < s.cols(); ++ki)
        if (mask.allowed(int(qi), int(ki))) mx = std::max(mx, s(qi, ki));
      T z = 0;
      for (Eigen::Index ki = 0; ki < s.cols(); ++ki) {
        if (mask.allowed(int(qi), int(ki))) {
          s(qi, ki) = std::exp(s(qi, ki) - mx);
          z += s(qi, ki);
        } else {
          s(qi, ki) = T(0);
        }
      }
      s.row(qi) /= z;
    }
  }

  Matrix<T> layer_backward(Layer& L, const Matrix<T>& dy, int batch, int n, const RopeTable& rope,
                           const AttentionMask& mask) {
    (void)mask;  // masked probabilities are exactly zero, so their gradients vanish
    const int hd = cfg_.head_dim(), heads = cfg_.num_heads;
    // MLP branch
    Matrix<T> dact = L.w_down.backward(dy);
    Matrix<T> dg(dact.rows(), dact.cols()), du(dact.rows(), dact.cols());
    for (Eigen::Index i = 0; i < dact.size(); ++i) {
      const T g = L.gate.data()[i];
      du.data()[i] = dact.data()[i] * nn::silu(g);
      dg.data()[i] = dact.data()[i] * L.up.data()[i] * nn::silu_grad(g);
    }
    Matrix<T> dh2 = L.w_gate.backward(dg) + L.w_up.backward(du);
    Matrix<T> dx = dy + L.mlp_norm.backward(dh2);

    // Attention branch
    Matrix<T> dattn = L.wo.backward(dx);
    const Eigen::Index rows = dattn.rows();
    Matrix<T> dq(rows, cfg_.model_dim), dk(rows, cfg_.model_dim), dv(rows, cfg_.model_dim);
    const T inv_sqrt = T(1.0 / std::sqrt(double(hd)));
    for (int b = 0; b < batch; ++b) {
      for (int hh = 0; hh < heads; ++hh) {
        const Matrix<T>& p = L.probs[std::size_t(b) * heads + hh];
        auto qb = L.q_rot.block(Eigen::Index(b) * n, hh * hd, n, hd);
        auto kb = L.k_rot.block(Eigen::Index(b) * n, hh * hd, n, hd);
        auto vb = L.v.block(Eigen::Index(b) * n, hh * hd, n, hd);
        auto dob = dattn.block(Eigen::Index(b) * n, hh * hd, n, hd);
        dv.block(Eigen::Index(b) * n, hh * hd, n, hd).noalias() = p.transpose() * dob;
        Matrix<T> dp = dob * vb.transpose();
        Matrix<T> ds(n, n);
        for (int i = 0; i < n; ++i) {
          const T dot = p.row(i).dot(dp.row(i));
          for (int j = 0; j < n; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
        }
        dq.block(Eigen::Index(b) * n, hh * hd, n, hd).noalias() = ds * kb;
        dk.block(Eigen::Index(b) * n, hh * hd, n, hd).noalias() = ds.transpose() * qb;
      }
    }
    // Undo rotation, then gain, then per-head RMS normalization.
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t pos = std::size_t(r % n);
      for (int hh = 0; hh < heads; ++hh) {
        const std::size_t slot = std::size_t(r) * heads + hh;
        norm_head_backward(dq.row(r).data() + hh * hd, L.q_hat.row(r).data() + hh * hd, L.q_inv[slot],
                           L.q_scale, hh, rope, pos);
        norm_head_backward(dk.row(r).data() + hh * hd, L.k_hat.row(r).data() + hh * hd, L.k_inv[slot],
                           L.k_scale, hh, rope, pos);
      }
    }
    Matrix<T> dh = L.wq.backward(dq) + L.wk.backward(dk) + L.wv.backward(dv);
    return dx + L.attn_norm.backward(dh);
  }

  void norm_head_backward(T* grad, const T* x_hat, T inv, Param<T>& scale, int head, const RopeTable& rope,
                          std::size_t pos) const {
    const int hd = cfg_.head_dim();
    rope.apply(grad, pos, true);
    const T s = scale.value[std::size_t(head)];
    T ds = 0, dot = 0;
    for (int j = 0; j < hd; ++j) {
      ds += grad[j] * x_hat[j];
      grad[j] *= s;
      dot += grad[j] * x_hat[j];
    }
    scale.grad[std::size_t(head)] += ds;
    dot /= T(hd);
    for (int j = 0; j < hd; ++j) grad[j] = inv * (grad[j] - x_hat[j] * dot);
  }

  double cross_entropy(const Matrix<T>& logits, const Batch& b, Matrix<T>* dlogits, double loss_scale) const {
    const int n = b.length, v = cfg_.vocab_size;
    if (dlogits) *dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());
    double total = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(v));
    for (int s = 0; s < b.batch_size; ++s) {
      double wsum = 0.0;
      for (int t = 0; t < n; ++t) wsum += b.weights[std::size_t(s) * n + t];
      if (wsum == 0.0) continue;
      double seq_loss = 0.0;
      for (int t = 0; t < n; ++t) {
        const std::size_t idx = std::size_t(s) * n + t;
        const double w = b.weights[idx];
        if (w == 0.0) continue;
        const Eigen::Index r = Eigen::Index(idx);
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < v; ++c) mx = std::max(mx, double(logits(r, c)));
        double z = 0.0;
        for (int c = 0; c < v; ++c) {
          probs[std::size_t(c)] = std::exp(double(logits(r, c)) - mx);
          z += probs[std::size_t(c)];
        }
        const int target = b.targets[idx];
        seq_loss += w * (std::log(z) + mx - double(logits(r, target)));
        if (dlogits) {
          const double coef = loss_scale * w / (wsum * b.batch_size);
          for (int c = 0; c < v; ++c) (*dlogits)(r, c) = T(coef * probs[std::size_t(c)] / z);
          (*dlogits)(r, target) -= T(coef);
        }
      }
      total += seq_loss / wsum;
    }
    return total / b.batch_size;
  }

  ModelConfig cfg_;
  Param<T> token_emb_, segment_emb_;
  std::vector<Layer> layers_;
  nn::RMSNorm<T> final_norm_;
  nn::Linear<T> head_;
  std::vector<int> cache_ids_;
  std::vector<PositionTag> cache_tags_;
  AttentionMask cache_mask_;
  int cache_batch_ = 0;
};

struct SamplingConfig {
  double temperature = 1.0;
  int top_k = 0;  // 0 keeps every allowed id
};

/// Picks an id from logits restricted to [lo, hi). Temperature 0 is argmax
/// (smallest id on ties).
template <typename T>
int sample_from_logits(std::span<const T> logits, int lo, int hi, const SamplingConfig& cfg, std::mt19937_64& rng) {
  if (cfg.temperature <= 0.0) {
    int best = lo;
    for (int i = lo + 1; i < hi; ++i)
      if (logits[std::size_t(i)] > logits[std::size_t(best)]) best = i;
    return best;
  }
  std::vector<int> cand(std::size_t(hi - lo));
  std::iota(cand.begin(), cand.end(), lo);
  if (cfg.top_k > 0 && cfg.top_k < int(cand.size())) {
    std::stable_sort(cand.begin(), cand.end(),
                     [&](int a, int b) { return logits[std::size_t(a)] > logits[std::size_t(b)]; });
    cand.resize(std::size_t(cfg.top_k));
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int c : cand) mx = std::max(mx, double(logits[std::size_t(c)]));
  std::vector<double> w(cand.size());
  double z = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    w[i] = std::exp((double(logits[std::size_t(cand[i])]) - mx) / cfg.temperature);
    z += w[i];
  }
  const double u = std::uniform_real_distribution<double>(0.0, z)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    acc += w[i];
    if (u < acc) return cand[i];
  }
  return cand.back();
}

/// Allowed id range for each generated position.
struct StepConstraint {
  int lo = 0;
  int hi = 0;
  SamplingConfig sampling;
};

/// Autoregressive generation after `prefix`. `tags` covers prefix + generated
/// positions; the mask is causal. With `use_cache` false every step recomputes
/// the full sequence.
template <typename T>
std::vector<int> sample(Transformer<T>& model, const std::vector<int>& prefix, std::span<const PositionTag> tags,
                        std::span<const StepConstraint> steps, std::uint64_t seed, bool use_cache = true) {
  const int total = int(prefix.size() + steps.size());
  if (int(tags.size()) < total) throw std::invalid_argument("position tags shorter than the generated sequence");
  const auto ctags = tags.first(std::size_t(total));
  const AttentionMask mask = seq::causal_mask(seq::MaskMode::OrderedCausal, total);
  std::mt19937_64 rng(seed);
  std::vector<int> ids = prefix;
  const int v = model.config().vocab_size;
  if (use_cache) {
    KVCache<T> cache(model.config());
    Matrix<T> logits = model.forward_cached(prefix, ctags, mask, cache);
    for (const auto& st : steps) {
      const std::span<const T> last(logits.row(logits.rows() - 1).data(), std::size_t(v));
      const int id = sample_from_logits<T>(last, st.lo, st.hi, st.sampling, rng);
      ids.push_back(id);
      if (int(ids.size()) == total) break;
      const int next[1] = {id};
      logits = model.forward_cached(next, ctags, mask, cache);
    }
  } else {
    for (const auto& st : steps) {
      const int n = int(ids.size());
      const AttentionMask sub = seq::causal_mask(seq::MaskMode::OrderedCausal, n);
      Matrix<T> logits = model.forward(ids, 1, ctags.first(std::size_t(n)), sub, false);
      const std::span<const T> last(logits.row(n - 1).data(), std::size_t(v));
      ids.push_back(sample_from_logits<T>(last, st.lo, st.hi, st.sampling, rng));
    }
  }
  return std::vector<int>(ids.begin() + std::ptrdiff_t(prefix.size()), ids.end());
}

}  // namespace gst::tf
