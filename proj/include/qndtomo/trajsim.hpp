#pragma once

// Synthetic field realizations: photon-number jump paths and the QND detection
// records a stream of probe atoms produces along them.

#include "qndtomo/numkernel.hpp"

#include <cstdint>
#include <numbers>
#include <optional>
#include <variant>
#include <vector>

namespace qndtomo {

struct Jump {
  double time;  ///< seconds
  int new_n;

  bool operator==(const Jump&) const = default;
};

/// Piecewise-constant photon number: initial_n until the first jump, then each jump's new_n.
struct JumpPath {
  int initial_n = 0;
  std::vector<Jump> events;

  int photon_number_at(double t) const;
  /// Checks increasing times, range [0, n_max] and that every jump changes n.
  void validate(int n_max) const;
  bool operator==(const JumpPath&) const = default;
};

enum class ArrivalMode { poisson, periodic };
enum class PhaseSchedule { round_robin, random };

/// Effective detection model p(j, phi | n) = [1 + (-1)^j (A + B cos(Phi(n) + phi))] / 2.
struct ProbeModel {
  std::vector<double> phase_per_photon = linear_phases(std::numbers::pi / 4.0, kDefaultNMax);  ///< Phi(n), rad
  double offset = -0.1;   ///< A
  double contrast = 0.7;  ///< B
  std::vector<double> phase_settings{-1.74, -0.87, 0.0, 0.54};  ///< phi_k, rad
  double mean_interval = 0.24e-3;                                ///< s
  ArrivalMode arrival_mode = ArrivalMode::poisson;
  PhaseSchedule schedule = PhaseSchedule::round_robin;

  static std::vector<double> linear_phases(double per_photon, int n_max);

  int n_max() const noexcept { return static_cast<int>(phase_per_photon.size()) - 1; }
  int phase_count() const noexcept { return static_cast<int>(phase_settings.size()); }
  void validate() const;
};

struct DetectionEvent {
  double time;      ///< s
  int phase_index;  ///< into ProbeModel::phase_settings
  int outcome;      ///< j: 0 for e, 1 for g
  bool operator==(const DetectionEvent&) const = default;
};

struct SequenceRecord {
  std::int64_t id = 0;
  std::vector<DetectionEvent> detections;
  std::optional<JumpPath> truth;

  /// Throws InvalidInput on non-increasing times or out-of-range indices.
  void validate(const ProbeModel& probe) const;
  bool operator==(const SequenceRecord&) const = default;
};

/// Exact continuous-time Markov chain simulation of dP/dt = K P.
JumpPath sample_jump_path(const GeneratorMatrix& k, int initial_n, double duration, std::uint64_t seed);
JumpPath sample_jump_path(const GeneratorMatrix& k, const PhotonDistribution& initial, double duration,
                          std::uint64_t seed);

/// Draws n from p by inversion of the cumulative sum.
int sample_photon_number(const PhotonDistribution& p, double u);

/// Probe-atom detections along a path over [0, duration).
std::vector<DetectionEvent> sample_detections(const JumpPath& path, const ProbeModel& probe, double duration,
                                              std::uint64_t seed);

/// `count` independent sequences with truncated-Poisson(initial_mean) initial photon numbers.
/// Sequence i draws only from sub-seeds of (seed, i), so the output does not depend on `workers`.
std::vector<SequenceRecord> synthesize_run(const CavityParams& params, const ProbeModel& probe,
                                           double initial_mean, double duration, int count, std::uint64_t seed,
                                           unsigned workers = 0);

}  // namespace qndtomo
