#pragma once

// Unified vocabulary and token layouts for joint image/camera modeling.
//
// Ids: image tokens [0, K_i), camera tokens [K_i, K_i + K_c), then the two
// task tokens, then BOS. A single-branch sample is
//   [BOS, t_o, TASK, segment A, segment B]      (3L + 2 positions)
// and the packed form carries both orderings behind one shared prefix:
//   [BOS, t_o, TASK_CAM_FIRST, t_c, t_i, TASK_POSE_FIRST, t_i, t_c]   (5L + 3)

#include "gst/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::seq {

using tok::Modality;
using tok::TokenGrid;

class GridMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ModalityViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedLayout : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TokenKind { Image, Camera, Task, Bos };

struct Vocabulary {
  int image_size = 0;   // K_i
  int camera_size = 0;  // K_c

  int camera_offset() const { return image_size; }
  int task_pose_first() const { return image_size + camera_size; }
  int task_cam_first() const { return image_size + camera_size + 1; }
  int bos() const { return image_size + camera_size + 2; }
  int size() const { return image_size + camera_size + 3; }

  TokenKind kind(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id outside vocabulary: " + std::to_string(id));
    if (id < image_size) return TokenKind::Image;
    if (id < image_size + camera_size) return TokenKind::Camera;
    if (id < bos()) return TokenKind::Task;
    return TokenKind::Bos;
  }

  /// Global id range [begin, end) of a modality.
  std::pair<int, int> range(Modality m) const {
    return m == Modality::Image ? std::pair{0, image_size} : std::pair{image_size, image_size + camera_size};
  }

  int to_global(Modality m, int local) const { return m == Modality::Image ? local : local + image_size; }
};

/// Which conditional chain a branch follows.
enum class Ordering {
  CamThenImg,  // p(c|o) p(i|c,o): novel-view branch
  ImgThenCam,  // p(i|o) p(c|i,o): pose-estimation branch
};

inline std::string to_string(Ordering o) { return o == Ordering::CamThenImg ? "cam_then_img" : "img_then_cam"; }

inline Modality first_modality(Ordering o) { return o == Ordering::CamThenImg ? Modality::Camera : Modality::Image; }
inline Modality second_modality(Ordering o) { return o == Ordering::CamThenImg ? Modality::Image : Modality::Camera; }

inline int task_token(const Vocabulary& v, Ordering o) {
  return o == Ordering::CamThenImg ? v.task_cam_first() : v.task_pose_first();
}

/// Segment id of each position, shared by both orderings.
enum Segment : int { kSegBos = 0, kSegObservation = 1, kSegTask = 2, kSegFirst = 3, kSegSecond = 4 };
inline constexpr int kNumSegments = 5;

struct SampleLayout {
  std::vector<int> ids;
  std::vector<bool> loss_mask;
  Ordering ordering = Ordering::CamThenImg;
  int grid_height = 0;
  int grid_width = 0;

  int segment_length() const { return grid_height * grid_width; }
  std::size_t length() const { return ids.size(); }
};

inline void check_grids(const TokenGrid& a, const TokenGrid& b) {
  if (a.height != b.height || a.width != b.width || a.indices.size() != b.indices.size())
    throw GridMismatch("token grids differ in shape");
}

inline void append_segment(std::vector<int>& ids, const Vocabulary& v, const TokenGrid& g, Modality m) {
  const auto [lo, hi] = v.range(m);
  for (int k : g.indices) {
    const int id = v.to_global(m, k);
    if (id < lo || id >= hi) throw ModalityViolation("local index out of modality range");
    ids.push_back(id);
  }
}

/// [BOS, t_o, TASK, A, B] with loss on A and B.
inline SampleLayout build_sequence(const Vocabulary& v, const TokenGrid& observation, const TokenGrid& image,
                                   const TokenGrid& camera, Ordering ordering) {
  check_grids(observation, image);
  check_grids(observation, camera);
  const int len = int(observation.size());
  SampleLayout s;
  s.ordering = ordering;
  s.grid_height = observation.height;
  s.grid_width = observation.width;
  s.ids.reserve(std::size_t(3 * len + 2));
  s.ids.push_back(v.bos());
  append_segment(s.ids, v, observation, Modality::Image);
  s.ids.push_back(task_token(v, ordering));
  const TokenGrid& a = ordering == Ordering::CamThenImg ? camera : image;
  const TokenGrid& b = ordering == Ordering::CamThenImg ? image : camera;
  append_segment(s.ids, v, a, first_modality(ordering));
  append_segment(s.ids, v, b, second_modality(ordering));
  s.loss_mask.assign(s.ids.size(), false);
  std::fill(s.loss_mask.begin() + (len + 2), s.loss_mask.end(), true);
  return s;
}

struct ParsedSequence {
  TokenGrid observation;
  Ordering ordering = Ordering::CamThenImg;
  TokenGrid first;   // segment A, local indices
  TokenGrid second;  // segment B, local indices
};

inline TokenGrid read_segment(const Vocabulary& v, const std::vector<int>& ids, std::size_t begin, int h, int w,
                              Modality m) {
  const auto [lo, hi] = v.range(m);
  TokenGrid g{h, w, m, {}};
  g.indices.reserve(std::size_t(h) * w);
  for (std::size_t p = begin; p < begin + std::size_t(h) * w; ++p) {
    const int id = ids[p];
    if (id < lo || id >= hi)
      throw ModalityViolation("id " + std::to_string(id) + " at position " + std::to_string(p) +
                              " is outside the " + tok::to_string(m) + " range");
    g.indices.push_back(id - lo);
  }
  return g;
}

inline ParsedSequence parse_sequence(const Vocabulary& v, const std::vector<int>& ids, int grid_height,
                                     int grid_width) {
  const int len = grid_height * grid_width;
  if (len <= 0 || ids.size() != std::size_t(3 * len + 2)) throw MalformedLayout("sequence length mismatch");
  if (ids[0] != v.bos()) throw MalformedLayout("sequence does not start with BOS");
  ParsedSequence p;
  const int task = ids[std::size_t(len + 1)];
  if (task == v.task_cam_first())
    p.ordering = Ordering::CamThenImg;
  else if (task == v.task_pose_first())
    p.ordering = Ordering::ImgThenCam;
  else
    throw MalformedLayout("no task token after the observation");
  p.observation = read_segment(v, ids, 1, grid_height, grid_width, Modality::Image);
  p.first = read_segment(v, ids, std::size_t(len + 2), grid_height, grid_width, first_modality(p.ordering));
  p.second = read_segment(v, ids, std::size_t(2 * len + 2), grid_height, grid_width, second_modality(p.ordering));
  return p;
}

enum class MaskMode { OrderedCausal, PackedJoint, Alternating };

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::OrderedCausal: return "ORDERED_CAUSAL";
    case MaskMode::PackedJoint: return "PACKED_JOINT";
    case MaskMode::Alternating: return "ALTERNATING";
  }
  return "?";
}

inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "ORDERED_CAUSAL") return MaskMode::OrderedCausal;
  if (s == "PACKED_JOINT") return MaskMode::PackedJoint;
  if (s == "ALTERNATING") return MaskMode::Alternating;
  throw std::invalid_argument("unknown mask mode: " + s);
}

/// Square visibility matrix: allowed(q, k) iff query q may attend to key k.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(MaskMode mode, int n) : mode_(mode), n_(n), bits_(std::size_t(n) * n, false) {}

  int size() const { return n_; }
  MaskMode mode() const { return mode_; }
  bool allowed(int q, int k) const { return bits_[std::size_t(q) * n_ + k]; }
  void set(int q, int k, bool v) { bits_[std::size_t(q) * n_ + k] = v; }

  std::size_t count() const { return std::size_t(std::count(bits_.begin(), bits_.end(), true)); }

  bool is_lower_triangular() const {
    for (int q = 0; q < n_; ++q)
      for (int k = 0; k < n_; ++k)
        if (allowed(q, k) != (k <= q)) return false;
    return true;
  }

  bool operator==(const AttentionMask& o) const { return n_ == o.n_ && bits_ == o.bits_; }

 private:
  MaskMode mode_ = MaskMode::OrderedCausal;
  int n_ = 0;
  std::vector<bool> bits_;
};

inline int ordered_length(int segment_length) { return 3 * segment_length + 2; }
inline int packed_length(int segment_length) { return 5 * segment_length + 3; }

inline AttentionMask causal_mask(MaskMode mode, int n) {
  AttentionMask m(mode, n);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k <= q; ++k) m.set(q, k, true);
  return m;
}

/// ORDERED_CAUSAL and ALTERNATING are causal over 3L+2 positions; PACKED_JOINT
/// is causal over 5L+3 except that the second branch never sees the first.
inline AttentionMask build_attention_mask(MaskMode mode, int segment_length) {
  if (segment_length < 1) throw std::invalid_argument("segment length must be positive");
  if (mode != MaskMode::PackedJoint) return causal_mask(mode, ordered_length(segment_length));
  const int n = packed_length(segment_length);
  const int prefix = segment_length + 1;               // BOS + t_o
  const int second_begin = 3 * segment_length + 2;     // TASK_POSE_FIRST
  AttentionMask m = causal_mask(mode, n);
  for (int q = second_begin; q < n; ++q)
    for (int k = prefix; k < second_begin; ++k) m.set(q, k, false);
  return m;
}

/// Packed-joint layout: both orderings behind a shared [BOS, t_o] prefix.
inline SampleLayout build_packed_sequence(const Vocabulary& v, const TokenGrid& observation, const TokenGrid& image,
                                          const TokenGrid& camera) {
  const SampleLayout a = build_sequence(v, observation, image, camera, Ordering::CamThenImg);
  const SampleLayout b = build_sequence(v, observation, image, camera, Ordering::ImgThenCam);
  const int len = int(observation.size());
  SampleLayout s = a;
  s.ids.insert(s.ids.end(), b.ids.begin() + (len + 1), b.ids.end());
  s.loss_mask.insert(s.loss_mask.end(), b.loss_mask.begin() + (len + 1), b.loss_mask.end());
  return s;
}

struct LossTargets {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<float> weights;  // 0 or 1 per pair unless reweighted
};

/// Next-token pairs: input ids[j] predicts ids[j+1], weighted by the target's loss mask.
inline LossTargets loss_targets(const SampleLayout& s) {
  LossTargets t;
  if (s.ids.size() < 2) return t;
  t.inputs.assign(s.ids.begin(), s.ids.end() - 1);
  t.targets.assign(s.ids.begin() + 1, s.ids.end());
  t.weights.resize(t.targets.size());
  for (std::size_t j = 0; j < t.targets.size(); ++j) t.weights[j] = s.loss_mask[j + 1] ? 1.0f : 0.0f;
  return t;
}

/// Mean cross-entropy over positions with nonzero weight; logits row-major n×V.
inline double masked_cross_entropy(std::span<const float> logits, int vocab, std::span<const int> targets,
                                   std::span<const float> weights) {
  double total = 0.0, norm = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (weights[j] == 0.0f) continue;
    const float* row = logits.data() + j * std::size_t(vocab);
    double mx = row[0];
    for (int k = 1; k < vocab; ++k) mx = std::max(mx, double(row[k]));
    double z = 0.0;
    for (int k = 0; k < vocab; ++k) z += std::exp(double(row[k]) - mx);
    total += weights[j] * (std::log(z) + mx - double(row[targets[j]]));
    norm += weights[j];
  }
  return norm > 0 ? total / norm : 0.0;
}

struct PositionTag {
  int row = 0;
  int col = 0;
  int segment = 0;
};

/// Row/col tags for one branch layout. BOS and task tokens take reserved
/// indices outside the grid so they never alias a grid cell.
inline std::vector<PositionTag> branch_tags(int grid_height, int grid_width) {
  const int reserved = std::max(grid_height, grid_width);
  std::vector<PositionTag> tags;
  tags.push_back({reserved, reserved, kSegBos});
  auto grid = [&](int segment) {
    for (int r = 0; r < grid_height; ++r)
      for (int c = 0; c < grid_width; ++c) tags.push_back({r, c, segment});
  };
  grid(kSegObservation);
  tags.push_back({reserved + 1, reserved + 1, kSegTask});
  grid(kSegFirst);
  grid(kSegSecond);
  return tags;
}

inline std::vector<PositionTag> packed_tags(int grid_height, int grid_width) {
  auto tags = branch_tags(grid_height, grid_width);
  const auto branch = branch_tags(grid_height, grid_width);
  const int len = grid_height * grid_width;
  tags.insert(tags.end(), branch.begin() + (len + 1), branch.end());
  return tags;
}

/// Golden-file format: "mask <MODE> <L> <N>" then, per row, run lengths
/// alternating false/true starting with false.
inline void write_mask(std::ostream& os, const AttentionMask& m, int segment_length) {
  os << "mask " << to_string(m.mode()) << ' ' << segment_length << ' ' << m.size() << '\n';
  for (int q = 0; q < m.size(); ++q) {
    bool cur = false;
    int run = 0;
    bool first = true;
    for (int k = 0; k < m.size(); ++k) {
      if (m.allowed(q, k) == cur) {
        ++run;
        continue;
      }
      os << (first ? "" : " ") << run;
      first = false;
      cur = !cur;
      run = 1;
    }
    os << (first ? "" : " ") << run << '\n';
  }
}

inline AttentionMask read_mask(std::istream& is, int* segment_length = nullptr) {
  std::string tag, mode;
  int len = 0, n = 0;
  if (!(is >> tag >> mode >> len >> n) || tag != "mask") throw MalformedLayout("bad mask header");
  if (segment_length) *segment_length = len;
  AttentionMask m(mask_mode_from_string(mode), n);
  std::string line;
  std::getline(is, line);
  for (int q = 0; q < n; ++q) {
    if (!std::getline(is, line)) throw MalformedLayout("mask truncated");
    std::istringstream ls(line);
    int run = 0, k = 0;
    bool cur = false;
    while (ls >> run) {
      for (int i = 0; i < run; ++i, ++k) {
        if (k >= n) throw MalformedLayout("mask row too long");
        m.set(q, k, cur);
      }
      cur = !cur;
    }
    if (k != n) throw MalformedLayout("mask row has wrong length");
  }
  return m;
}

}  // namespace gst::seq
