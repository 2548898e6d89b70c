#pragma once

// Vector quantization shared by the image and camera tokenizers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gst::quant {

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyCounter : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientSamples : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Codebook {
  int size = 0;  // K
  int dim = 0;   // d
  std::vector<T> vectors;  // K×d, row-major

  Codebook() = default;
  Codebook(int k, int d) : size(k), dim(d), vectors(std::size_t(k) * d, T(0)) {}

  std::span<T> row(int k) { return {vectors.data() + std::size_t(k) * dim, std::size_t(dim)}; }
  std::span<const T> row(int k) const { return {vectors.data() + std::size_t(k) * dim, std::size_t(dim)}; }

  bool valid() const {
    return size >= 2 && dim >= 1 && vectors.size() == std::size_t(size) * dim &&
           std::all_of(vectors.begin(), vectors.end(), [](T v) { return std::isfinite(double(v)); });
  }
};

template <typename T>
struct QuantizeResult {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<int> indices;  // h×w
  std::vector<T> quantized;  // h×w×d
  T codebook_loss = 0;
  T commitment_loss = 0;
};

/// Index of the nearest codeword; ties resolve to the smallest index.
template <typename T>
int nearest_code(std::span<const T> f, const Codebook<T>& book) {
  int best = 0;
  T best_dist = std::numeric_limits<T>::infinity();
  for (int k = 0; k < book.size; ++k) {
    const T* z = book.vectors.data() + std::size_t(k) * book.dim;
    T dist = 0;
    for (int j = 0; j < book.dim; ++j) {
      const T diff = f[j] - z[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = k;
    }
  }
  return best;
}

/// Quantizes an h×w×d feature grid (channel-last).
template <typename T>
QuantizeResult<T> quantize(std::span<const T> features, int height, int width, const Codebook<T>& book) {
  const int d = book.dim;
  if (features.size() != std::size_t(height) * width * d)
    throw DimensionMismatch("feature grid size " + std::to_string(features.size()) +
                            " does not match " + std::to_string(height) + "x" + std::to_string(width) +
                            "x" + std::to_string(d));
  QuantizeResult<T> r;
  r.height = height;
  r.width = width;
  r.dim = d;
  const std::size_t n = std::size_t(height) * width;
  r.indices.resize(n);
  r.quantized.resize(n * d);
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto f = features.subspan(i * d, d);
    const int k = nearest_code(f, book);
    r.indices[i] = k;
    auto z = book.row(k);
    for (int j = 0; j < d; ++j) {
      r.quantized[i * d + j] = z[j];
      const double diff = double(f[j]) - double(z[j]);
      sq += diff * diff;
    }
  }
  // ||sg[f] - z||² and ||f - sg[z]||² share a forward value; they differ in where gradients go.
  const T mean_sq = n ? T(sq / double(n)) : T(0);
  r.codebook_loss = mean_sq;
  r.commitment_loss = mean_sq;
  return r;
}

/// Forward value of z = sg[z - f] + f: the quantized grid.
template <typename T>
std::vector<T> straight_through(std::span<const T> features, std::span<const T> quantized) {
  if (features.size() != quantized.size()) throw DimensionMismatch("straight-through shape mismatch");
  std::vector<T> out(quantized.begin(), quantized.end());
  return out;
}

/// Backward of the straight-through estimator: identity Jacobian.
template <typename T>
std::vector<T> straight_through_backward(std::span<const T> grad_output) {
  return std::vector<T>(grad_output.begin(), grad_output.end());
}

template <typename T>
T vq_loss(const QuantizeResult<T>& r, T commitment_weight) {
  if (commitment_weight < 0) throw std::invalid_argument("commitment weight must be non-negative");
  return r.codebook_loss + commitment_weight * r.commitment_loss;
}

/// Gradients of vq_loss: codebook rows receive 2(z - f)/N, features receive β·2(f - z)/N.
template <typename T>
void vq_loss_backward(std::span<const T> features, const QuantizeResult<T>& r, T commitment_weight,
                      T upstream, std::span<T> grad_features, std::span<T> grad_codebook) {
  const int d = r.dim;
  const std::size_t n = r.indices.size();
  const T scale = upstream * T(2) / T(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = std::size_t(r.indices[i]);
    for (int j = 0; j < d; ++j) {
      const T diff = features[i * d + j] - r.quantized[i * d + j];
      grad_features[i * d + j] += scale * commitment_weight * diff;
      grad_codebook[k * d + j] -= scale * diff;
    }
  }
}

class UsageCounter {
 public:
  UsageCounter() = default;
  explicit UsageCounter(int size) : counts_(std::size_t(size), 0) {}
  explicit UsageCounter(std::vector<std::uint64_t> counts) : counts_(std::move(counts)) {
    for (auto c : counts_) total_ += c;
  }

  void add(std::span<const int> indices) {
    for (int i : indices) {
      if (i < 0 || std::size_t(i) >= counts_.size()) throw std::out_of_range("code index out of range");
      ++counts_[std::size_t(i)];
      ++total_;
    }
  }

  void merge(const UsageCounter& other) {
    if (other.counts_.size() != counts_.size()) throw DimensionMismatch("usage counters differ in size");
    for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
    total_ += other.total_;
  }

  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total() const { return total_; }
  int size() const { return int(counts_.size()); }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Fraction of codewords selected at least once.
inline double usage(const UsageCounter& counter) {
  if (counter.total() == 0) throw EmptyCounter("usage of an empty counter");
  const auto used = std::count_if(counter.counts().begin(), counter.counts().end(),
                                  [](std::uint64_t c) { return c > 0; });
  return double(used) / double(counter.size());
}

/// Uniform in [-1/K, 1/K], or K distinct rows drawn from `samples` (n×d) when given.
template <typename T>
Codebook<T> init_codebook(std::uint64_t seed, int size, int dim,
                          std::optional<std::span<const T>> samples = std::nullopt) {
  if (size < 2 || dim < 1) throw std::invalid_argument("codebook needs K >= 2 and d >= 1");
  Codebook<T> book(size, dim);
  std::mt19937_64 rng(seed);
  if (!samples) {
    std::uniform_real_distribution<double> u(-1.0 / size, 1.0 / size);
    for (auto& v : book.vectors) v = T(u(rng));
    return book;
  }
  const std::size_t n = samples->size() / std::size_t(dim);
  if (samples->size() % std::size_t(dim) != 0) throw DimensionMismatch("sample buffer not a multiple of d");
  if (n < std::size_t(size))
    throw InsufficientSamples("data-driven init needs " + std::to_string(size) + " samples, got " +
                              std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  // Partial Fisher-Yates: the first K entries are a uniform draw without replacement.
  for (int k = 0; k < size; ++k) {
    std::uniform_int_distribution<std::size_t> pick(std::size_t(k), n - 1);
    std::swap(order[std::size_t(k)], order[pick(rng)]);
    auto src = samples->subspan(order[std::size_t(k)] * dim, std::size_t(dim));
    std::copy(src.begin(), src.end(), book.row(k).begin());
  }
  return book;
}

}  // namespace gst::quant
