#pragma once

// Line-delimited JSON metrics, image quality metrics and a 1D Wasserstein distance.

#include "gst/scenes.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gst::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Appends one JSON object per line. When resuming, lines with a step at or
/// past the resume step are dropped first so the file matches an
/// uninterrupted run.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const fs::path& path, std::optional<std::int64_t> resume_step = std::nullopt) : path_(path) {
    if (path_.empty()) return;
    std::vector<std::string> keep;
    if (resume_step && fs::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (!j.contains("step") || j.at("step").get<std::int64_t>() < *resume_step) keep.push_back(line);
      }
    }
    out_.open(path_, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open metrics file " + path_.string());
    for (const auto& l : keep) out_ << l << '\n';
    out_.flush();
  }

  bool enabled() const { return out_.is_open(); }

  void write(const json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

inline std::vector<json> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

/// Running sums for one logging window.
struct Window {
  double loss = 0.0;
  double grad_norm = 0.0;
  int count = 0;

  void add(double l, double g) {
    loss += l;
    grad_norm += g;
    ++count;
  }
  json to_json() const { return json{{"loss", loss}, {"grad_norm", grad_norm}, {"count", count}}; }
  static Window from_json(const json& j) {
    return Window{j.at("loss").get<double>(), j.at("grad_norm").get<double>(), j.at("count").get<int>()};
  }
};

inline constexpr double kPsnrCap = 99.0;

/// PSNR for images in [-1, 1] (peak-to-peak 2), capped for identical inputs.
inline double psnr(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(4.0 / mse));
}

inline double psnr(const scenes::Image& a, const scenes::Image& b) { return psnr(a.data, b.data); }

/// Mean SSIM over channels with a 7×7 Gaussian window (σ = 1.5) over valid
/// positions, computed on images remapped from [-1, 1] to [0, 1].
inline double ssim(const scenes::Image& a, const scenes::Image& b) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("ssim: size mismatch");
  constexpr int kWin = 7;
  constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  if (a.height < kWin || a.width < kWin) throw std::invalid_argument("ssim: image smaller than window");
  double g[kWin * kWin], gsum = 0.0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      const double dy = y - kWin / 2, dx = x - kWin / 2;
      g[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      gsum += g[y * kWin + x];
    }
  for (double& w : g) w /= gsum;
  auto val = [](const scenes::Image& im, int y, int x, int c) { return (double(im.data[(std::size_t(y) * im.width + x) * 3 + c]) + 1.0) * 0.5; };
  double total = 0.0;
  int n = 0;
  for (int c = 0; c < 3; ++c)
    for (int y0 = 0; y0 + kWin <= a.height; ++y0)
      for (int x0 = 0; x0 + kWin <= a.width; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < kWin; ++y)
          for (int x = 0; x < kWin; ++x) {
            const double w = g[y * kWin + x];
            const double va = val(a, y0 + y, x0 + x, c), vb = val(b, y0 + y, x0 + x, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++n;
      }
  return total / n;
}

/// W1 distance between two empirical distributions on the line.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<double> xs = a;
  xs.insert(xs.end(), b.begin(), b.end());
  std::sort(xs.begin(), xs.end());
  double total = 0.0;
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k + 1 < xs.size(); ++k) {
    while (ia < a.size() && a[ia] <= xs[k]) ++ia;
    while (ib < b.size() && b[ib] <= xs[k]) ++ib;
    const double fa = double(ia) / double(a.size()), fb = double(ib) / double(b.size());
    total += std::abs(fa - fb) * (xs[k + 1] - xs[k]);
  }
  return total;
}

/// n points at the midpoint quantiles of U[lo, hi].
inline std::vector<double> uniform_quantiles(double lo, double hi, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[std::size_t(i)] = lo + (hi - lo) * (i + 0.5) / n;
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace gst::harness
