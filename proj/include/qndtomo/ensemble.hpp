#pragma once

// Ensemble reconstruction of P(n, t) by the fixed-point Bayes transform, and
// selection of Fock-state-prepared sub-ensembles.

#include "qndtomo/bayesfilter.hpp"
#include "qndtomo/numkernel.hpp"
#include "qndtomo/trajsim.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

namespace qndtomo {

/// log of the product of N single-atom likelihoods, as a function of n.
struct WindowLikelihood {
  std::int64_t sequence_id = 0;
  double start_time = 0.0;  ///< requested window start, s
  double duration = 0.0;    ///< last minus first detection time, s
  int atom_count = 0;
  Vector log_products;  ///< -inf where some atom has zero likelihood
};

/// The first N detections at or after t. Throws InvalidInput when fewer remain.
WindowLikelihood window_products(const SequenceRecord& seq, double t, int atoms, const ProbeModel& probe);

/// Same, returning nullopt instead of throwing when the sequence lacks atoms.
std::optional<WindowLikelihood> try_window_products(const SequenceRecord& seq, double t, int atoms,
                                                    const LogLikelihoodTable& table, int dim);

/// One application of P(n) -> < P(n) Pi(n) / sum_m P(m) Pi(m) > over the windows.
PhotonDistribution fixed_point_step(const std::vector<WindowLikelihood>& windows, const PhotonDistribution& p);

/// `iterations` applications of fixed_point_step starting at seed_dist, which must be strictly positive.
PhotonDistribution fixed_point_reconstruct(const std::vector<WindowLikelihood>& windows, int iterations,
                                           const PhotonDistribution& seed_dist);

struct FixedPointTrace {
  PhotonDistribution estimate;
  std::vector<double> step_tv;  ///< TV distance between successive iterates
  /// Number of times step_tv increased after the first `burn_in` iterations.
  int monotonicity_violations(int burn_in = 3) const;
};

FixedPointTrace fixed_point_trace(const std::vector<WindowLikelihood>& windows, int iterations,
                                  const PhotonDistribution& seed_dist);

/// Reconstructed P(n, t) on a time grid. Row i of `table` is the distribution at grid[i].
struct DistributionTimeline {
  std::vector<double> grid;
  Matrix table;
  std::vector<int> realization_count;
  /// Grid indices whose realization count fell below the requested minimum.
  std::vector<std::size_t> sparse_points;

  std::size_t size() const noexcept { return grid.size(); }
  int n_max() const noexcept { return static_cast<int>(table.cols()) - 1; }
  PhotonDistribution at(std::size_t i) const { return PhotonDistribution(Vector(table.row(static_cast<Eigen::Index>(i)).transpose())); }
  std::vector<double> mean_photon() const;
};

struct ReconstructOptions {
  int atoms = 25;
  int iterations = 20;
  int min_realizations = 1;
  unsigned workers = 0;
};

/// Per grid time: one window per sequence (sequences without enough atoms skipped),
/// then fixed_point_reconstruct from the flat distribution. Grid points with no
/// realization keep the flat seed and are listed in sparse_points.
DistributionTimeline reconstruct_timeline(const std::vector<SequenceRecord>& seqs, const std::vector<double>& grid,
                                          const ProbeModel& probe, const ReconstructOptions& options = {});

/// Uniform grid 0, step, 2 step, ... up to and including `end` (within rounding).
std::vector<double> uniform_grid(double end, double step);

/// Bootstrap over sequences. Replicate b redraws seqs.size() sequences with replacement
/// (seeded by derive_seed(seed, b, 3)) and reconstructs every grid point from the windows
/// of the drawn sequences, so a sequence keeps its weight across the whole timeline.
std::vector<DistributionTimeline> bootstrap_timelines(const std::vector<SequenceRecord>& seqs,
                                                      const std::vector<double>& grid, const ProbeModel& probe,
                                                      int replicates, std::uint64_t seed,
                                                      const ReconstructOptions& options = {});

struct FockSelectionEvent {
  std::int64_t sequence_id = 0;
  double t0 = 0.0;
  int n0 = 0;
  double posterior_peak = 0.0;
  bool operator==(const FockSelectionEvent&) const = default;
};

/// Emits an event whenever posterior(n0) rises strictly above `threshold`, unless an
/// event for the same (sequence, n0) was emitted less than `dedup_window` earlier.
std::vector<FockSelectionEvent> select_fock_events(const std::vector<PosteriorTimeline>& timelines,
                                                   double threshold = 0.7, double dedup_window = 0.010);

struct FockEnsembles {
  std::map<int, std::vector<SequenceRecord>> by_n0;
  int dropped_events = 0;  ///< events with no detection inside the horizon
};

/// For each event, the detections in (t0, t0 + horizon] re-timed so t0 maps to 0.
FockEnsembles build_fock_ensembles(const std::vector<SequenceRecord>& seqs,
                                   const std::vector<FockSelectionEvent>& events, double horizon);

}  // namespace qndtomo
