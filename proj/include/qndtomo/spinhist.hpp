#pragma once

// 2D histograms of transverse-spin samples and their peak structure.

#include "qndtomo/bayesfilter.hpp"

#include <span>
#include <vector>

namespace qndtomo {

/// Square histogram over [-extent, extent]^2.
class SpinHistogram {
 public:
  SpinHistogram(int bins, double extent);

  void add(double x, double y);
  void add(std::span<const SpinSample> samples);

  int bins() const noexcept { return bins_; }
  double extent() const noexcept { return extent_; }
  double bin_width() const noexcept { return 2.0 * extent_ / bins_; }
  double center(int i) const noexcept { return -extent_ + (i + 0.5) * bin_width(); }
  long count(int ix, int iy) const { return counts_[static_cast<std::size_t>(iy * bins_ + ix)]; }
  long total() const noexcept { return total_; }
  long outside() const noexcept { return outside_; }

  /// Counts convolved with a normalized Gaussian of `sigma_bins` bins.
  std::vector<double> smoothed(double sigma_bins) const;

 private:
  int bins_;
  double extent_;
  std::vector<long> counts_;
  long total_ = 0;
  long outside_ = 0;
};

struct HistogramPeak {
  double x = 0.0;
  double y = 0.0;
  double radius = 0.0;
  double angle = 0.0;   ///< in [0, 2 pi)
  double height = 0.0;  ///< smoothed count
};

struct PeakOptions {
  double smoothing_bins = 1.0;
  int neighborhood = 2;        ///< a peak is the strict maximum of its (2r+1)^2 box
  double min_fraction = 0.01;  ///< of the tallest smoothed bin
};

/// Local maxima of the smoothed histogram, tallest first.
std::vector<HistogramPeak> find_peaks(const SpinHistogram& hist, const PeakOptions& options = {});

/// Photon number whose phase Phi(n) is angularly closest to the sample, or -1 when the
/// sample radius is below min_radius.
int classify_spin(const SpinSample& sample, const ProbeModel& probe, double min_radius);

/// Smallest absolute difference between two angles, in [0, pi].
double angle_distance(double a, double b);

}  // namespace qndtomo
