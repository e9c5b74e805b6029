#include "qndtomo/spinhist.hpp"

#include "qndtomo/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace qndtomo {

SpinHistogram::SpinHistogram(int bins, double extent)
    : bins_(bins), extent_(extent), counts_(static_cast<std::size_t>(std::max(bins, 0)) * std::max(bins, 0), 0) {
  if (bins < 3) throw InvalidInput("spin histogram: need at least 3 bins per axis");
  if (!(extent > 0.0)) throw InvalidInput("spin histogram: extent must be > 0");
}

void SpinHistogram::add(double x, double y) {
  ++total_;
  const double w = bin_width();
  const auto ix = static_cast<long>(std::floor((x + extent_) / w));
  const auto iy = static_cast<long>(std::floor((y + extent_) / w));
  if (ix < 0 || iy < 0 || ix >= bins_ || iy >= bins_) {
    ++outside_;
    return;
  }
  ++counts_[static_cast<std::size_t>(iy * bins_ + ix)];
}

void SpinHistogram::add(std::span<const SpinSample> samples) {
  for (const SpinSample& s : samples) add(s.x, s.y);
}

std::vector<double> SpinHistogram::smoothed(double sigma_bins) const {
  std::vector<double> out(counts_.begin(), counts_.end());
  if (!(sigma_bins > 0.0)) return out;
  const int half = static_cast<int>(std::ceil(3.0 * sigma_bins));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  double norm = 0.0;
  for (int i = -half; i <= half; ++i) {
    kernel[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sigma_bins * sigma_bins));
    norm += kernel[static_cast<std::size_t>(i + half)];
  }
  for (double& k : kernel) k /= norm;

  // separable convolution, zero outside the grid
  std::vector<double> tmp(out.size(), 0.0);
  for (int y = 0; y < bins_; ++y)
    for (int x = 0; x < bins_; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < bins_) acc += kernel[static_cast<std::size_t>(i + half)] * out[static_cast<std::size_t>(y * bins_ + xx)];
      }
      tmp[static_cast<std::size_t>(y * bins_ + x)] = acc;
    }
  for (int y = 0; y < bins_; ++y)
    for (int x = 0; x < bins_; ++x) {
      double acc = 0.0;
      for (int i = -half; i <= half; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < bins_) acc += kernel[static_cast<std::size_t>(i + half)] * tmp[static_cast<std::size_t>(yy * bins_ + x)];
      }
      out[static_cast<std::size_t>(y * bins_ + x)] = acc;
    }
  return out;
}

std::vector<HistogramPeak> find_peaks(const SpinHistogram& hist, const PeakOptions& options) {
  const std::vector<double> s = hist.smoothed(options.smoothing_bins);
  const int b = hist.bins();
  const double top = *std::max_element(s.begin(), s.end());
  std::vector<HistogramPeak> peaks;
  if (!(top > 0.0)) return peaks;
  const int r = std::max(options.neighborhood, 1);
  for (int y = 0; y < b; ++y)
    for (int x = 0; x < b; ++x) {
      const double v = s[static_cast<std::size_t>(y * b + x)];
      if (v < options.min_fraction * top || v <= 0.0) continue;
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= b || yy >= b) continue;
          if (s[static_cast<std::size_t>(yy * b + xx)] >= v) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      HistogramPeak p;
      p.x = hist.center(x);
      p.y = hist.center(y);
      p.radius = std::hypot(p.x, p.y);
      p.angle = std::atan2(p.y, p.x);
      if (p.angle < 0.0) p.angle += 2.0 * std::numbers::pi;
      p.height = v;
      peaks.push_back(p);
    }
  std::sort(peaks.begin(), peaks.end(), [](const HistogramPeak& a, const HistogramPeak& c) { return a.height > c.height; });
  return peaks;
}

double angle_distance(double a, double b) {
  double d = std::fmod(std::abs(a - b), 2.0 * std::numbers::pi);
  return d > std::numbers::pi ? 2.0 * std::numbers::pi - d : d;
}

int classify_spin(const SpinSample& sample, const ProbeModel& probe, double min_radius) {
  if (std::hypot(sample.x, sample.y) < min_radius) return -1;
  const double angle = std::atan2(sample.y, sample.x);
  int best = -1;
  double best_distance = INFINITY;
  for (int n = 0; n <= probe.n_max(); ++n) {
    const double d = angle_distance(angle, probe.phase_per_photon[static_cast<std::size_t>(n)]);
    if (d < best_distance) {
      best_distance = d;
      best = n;
    }
  }
  return best;
}

}  // namespace qndtomo
