#pragma once

// Single-realization inference: per-atom Bayes updates interleaved with rate-equation
// propagation, and windowed transverse-spin estimates.

#include "qndtomo/error.hpp"
#include "qndtomo/numkernel.hpp"
#include "qndtomo/trajsim.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qndtomo {

/// p(j, phi_k | n).
double likelihood(int outcome, int phase_index, int n, const ProbeModel& probe);

/// Vector of p(j, phi_k | n) over n = 0..n_max.
Vector likelihood_vector(const DetectionEvent& event, const ProbeModel& probe);

/// log p(j, phi_k | n) precomputed for every (phase setting, outcome).
class LogLikelihoodTable {
 public:
  explicit LogLikelihoodTable(const ProbeModel& probe);
  /// Entries are -inf where the likelihood is exactly zero.
  const Vector& operator()(int phase_index, int outcome) const {
    return rows_[static_cast<std::size_t>(2 * phase_index + outcome)];
  }

 private:
  std::vector<Vector> rows_;
};

/// Posterior(n) proportional to P(n) p(j, phi | n). Throws NumericalError when the evidence is below 1e-300.
PhotonDistribution bayes_update(const PhotonDistribution& prior, const DetectionEvent& event,
                                const ProbeModel& probe);

struct PosteriorPoint {
  double time;
  PhotonDistribution posterior;
};

/// One posterior per detection, in detection order.
struct PosteriorTimeline {
  std::int64_t sequence_id = 0;
  std::vector<PosteriorPoint> points;
};

/// Thrown by filter_sequence when an update annihilates the posterior.
class FilterError : public NumericalError {
 public:
  FilterError(const std::string& what, std::size_t event_index)
      : NumericalError(what), event_index_(event_index) {}
  std::size_t event_index() const noexcept { return event_index_; }

 private:
  std::size_t event_index_;
};

/// Starting from `prior` at t = 0: propagate over each inter-detection gap, then update.
PosteriorTimeline filter_sequence(const SequenceRecord& seq, const PhotonDistribution& prior,
                                  const GeneratorMatrix& k, const ProbeModel& probe);

/// Best estimate at time t, propagated forward from the last posterior at or before t
/// (or from the prior when no detection precedes t).
PhotonDistribution estimate_at(const PosteriorTimeline& timeline, const PhotonDistribution& prior,
                               const GeneratorMatrix& k, double t);

struct SpinSample {
  double x;
  double y;
  double window_start;  ///< time of the first detection in the window, s
  int atom_count;
};

/// Least-squares (X, Y) from per-setting mean signed outcomes s_k, solving
/// s_k - A = X cos(phi_k) - Y sin(phi_k), one s_k per phase setting.
std::pair<double, double> invert_spin(std::span<const double> mean_signed, const ProbeModel& probe);

/// Windows of `window_atoms` consecutive detections, advanced by `stride` atoms
/// (stride 0 means stride = window_atoms, i.e. a partition).
/// Throws InvalidInput when a window lacks one of the phase settings.
std::vector<SpinSample> spin_samples(const SequenceRecord& seq, const ProbeModel& probe, int window_atoms,
                                     int stride = 0);

}  // namespace qndtomo
