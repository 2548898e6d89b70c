#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

/// 64-byte aligned storage. Eigen's vectorized kernels peel loops according to
/// the runtime address, so unaligned buffers make results allocation-dependent.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = ((n * sizeof(T) + kAlign - 1) / kAlign) * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes ? bytes : kAlign);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// A named trainable tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool decay = true;  // subject to decoupled weight decay

  Param() = default;
  Param(std::string n, std::vector<int> s, bool weight_decay = true)
      : name(std::move(n)), shape(std::move(s)), decay(weight_decay) {
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                                              [](std::size_t a, int b) { return a * std::size_t(b); });
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  /// View as rows×cols where rows = shape[0].
  MatrixMap<T> mat() { return MatrixMap<T>(value.data(), shape[0], Eigen::Index(size() / shape[0])); }
  ConstMatrixMap<T> mat() const {
    return ConstMatrixMap<T>(value.data(), shape[0], Eigen::Index(size() / shape[0]));
  }
  MatrixMap<T> grad_mat() { return MatrixMap<T>(grad.data(), shape[0], Eigen::Index(size() / shape[0])); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

/// Dense N×C×H×W activation.
template <typename T>
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  Buffer<T> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(std::size_t(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return std::size_t(h) * w; }
  std::size_t sample_size() const { return std::size_t(c) * h * w; }
  T* sample(int i) { return data.data() + std::size_t(i) * sample_size(); }
  const T* sample(int i) const { return data.data() + std::size_t(i) * sample_size(); }
  T& at(int i, int ch, int y, int x) { return data[((std::size_t(i) * c + ch) * h + y) * w + x]; }
  T at(int i, int ch, int y, int x) const { return data[((std::size_t(i) * c + ch) * h + y) * w + x]; }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined value
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename T>
void fill_normal(Param<T>& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : p.value) v = T(dist(rng));
}

template <typename T>
void fill_uniform(Param<T>& p, std::mt19937_64& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value) v = T(dist(rng));
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
double grad_norm(const ParamList<T>& params) {
  double acc = 0.0;
  for (const auto* p : params)
    for (T g : p->grad) acc += double(g) * double(g);
  return std::sqrt(acc);
}

}  // namespace gst::nn
