#include "qndtomo/trajsim.hpp"

#include "qndtomo/bayesfilter.hpp"
#include "qndtomo/error.hpp"
#include "qndtomo/parallel.hpp"
#include "qndtomo/random.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qndtomo {

int JumpPath::photon_number_at(double t) const {
  // last jump with time <= t
  const auto it = std::upper_bound(events.begin(), events.end(), t,
                                   [](double value, const Jump& j) { return value < j.time; });
  return it == events.begin() ? initial_n : std::prev(it)->new_n;
}

void JumpPath::validate(int n_max) const {
  if (initial_n < 0 || initial_n > n_max) throw InvalidInput("jump path: initial photon number out of range");
  int current = initial_n;
  double last = -1.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Jump& j = events[i];
    if (!(j.time > last)) throw InvalidInput("jump path: times not strictly increasing at jump " + std::to_string(i));
    if (j.new_n < 0 || j.new_n > n_max) throw InvalidInput("jump path: photon number out of range at jump " + std::to_string(i));
    if (j.new_n == current) throw InvalidInput("jump path: jump " + std::to_string(i) + " does not change n");
    current = j.new_n;
    last = j.time;
  }
}

std::vector<double> ProbeModel::linear_phases(double per_photon, int n_max) {
  std::vector<double> phases(static_cast<std::size_t>(n_max) + 1);
  for (int n = 0; n <= n_max; ++n) phases[static_cast<std::size_t>(n)] = per_photon * n;
  return phases;
}

void ProbeModel::validate() const {
  if (phase_per_photon.size() < 2) throw InvalidInput("probe: phase table needs n_max >= 1");
  for (double phi : phase_per_photon)
    if (!std::isfinite(phi)) throw InvalidInput("probe: non-finite phase in table");
  if (!std::isfinite(offset) || !std::isfinite(contrast) || std::abs(offset) + std::abs(contrast) > 1.0 + 1e-15)
    throw InvalidInput("probe: |A| + |B| must be <= 1");
  if (phase_settings.empty()) throw InvalidInput("probe: phase settings must be nonempty");
  for (double phi : phase_settings)
    if (!std::isfinite(phi)) throw InvalidInput("probe: non-finite phase setting");
  if (!std::isfinite(mean_interval) || !(mean_interval > 0.0)) throw InvalidInput("probe: mean interval must be > 0");
}

void SequenceRecord::validate(const ProbeModel& probe) const {
  double last = -INFINITY;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const DetectionEvent& e = detections[i];
    if (!std::isfinite(e.time) || !(e.time > last))
      throw InvalidInput("sequence " + std::to_string(id) + ": detection " + std::to_string(i) +
                         " time not strictly increasing");
    if (e.phase_index < 0 || e.phase_index >= probe.phase_count())
      throw InvalidInput("sequence " + std::to_string(id) + ": detection " + std::to_string(i) +
                         " phase index out of range");
    if (e.outcome != 0 && e.outcome != 1)
      throw InvalidInput("sequence " + std::to_string(id) + ": detection " + std::to_string(i) +
                         " outcome must be 0 or 1");
    last = e.time;
  }
  if (truth) truth->validate(probe.n_max());
}

int sample_photon_number(const PhotonDistribution& p, double u) {
  double cumulative = 0.0;
  for (int n = 0; n < p.size(); ++n) {
    cumulative += p[n];
    if (u < cumulative) return n;
  }
  // u within rounding of 1: last state with support
  for (int n = p.n_max(); n >= 0; --n)
    if (p[n] > 0.0) return n;
  return p.n_max();
}

namespace {

JumpPath simulate_chain(const GeneratorMatrix& k, int initial_n, double duration, Rng& rng) {
  if (!(duration > 0.0)) throw InvalidInput("sample_jump_path: duration must be > 0");
  if (initial_n < 0 || initial_n > k.n_max()) throw InvalidInput("sample_jump_path: initial n out of range");
  if (!k.nonnegative()) throw InvalidInput("sample_jump_path: generator has negative rates");
  JumpPath path{initial_n, {}};
  int state = initial_n;
  double t = 0.0;
  for (;;) {
    const double exit_rate = -k(state, state);
    if (!(exit_rate > 0.0)) break;  // absorbing
    t += rng.exponential(exit_rate);
    if (t >= duration) break;
    double u = rng.uniform() * exit_rate;
    int target = -1;
    for (int n = 0; n < k.size(); ++n) {
      if (n == state) continue;
      const double rate = k(n, state);
      if (rate <= 0.0) continue;
      target = n;
      if (u < rate) break;
      u -= rate;
    }
    state = target;
    path.events.push_back({t, state});
  }
  return path;
}

}  // namespace

JumpPath sample_jump_path(const GeneratorMatrix& k, int initial_n, double duration, std::uint64_t seed) {
  Rng rng(seed);
  return simulate_chain(k, initial_n, duration, rng);
}

JumpPath sample_jump_path(const GeneratorMatrix& k, const PhotonDistribution& initial, double duration,
                          std::uint64_t seed) {
  if (initial.size() != k.size()) throw InvalidInput("sample_jump_path: dimension mismatch");
  Rng rng(seed);
  const int n0 = sample_photon_number(initial, rng.uniform());
  return simulate_chain(k, n0, duration, rng);
}

std::vector<DetectionEvent> sample_detections(const JumpPath& path, const ProbeModel& probe, double duration,
                                              std::uint64_t seed) {
  probe.validate();
  Rng rng(seed);
  std::vector<DetectionEvent> out;
  out.reserve(static_cast<std::size_t>(duration / probe.mean_interval * 1.1) + 16);
  double t = 0.0;
  std::size_t atom = 0;
  for (;;) {
    if (probe.arrival_mode == ArrivalMode::poisson)
      t += rng.exponential(1.0 / probe.mean_interval);
    else
      t = static_cast<double>(atom + 1) * probe.mean_interval;
    if (t >= duration) break;
    const int phase = probe.schedule == PhaseSchedule::round_robin
                          ? static_cast<int>(atom % probe.phase_settings.size())
                          : static_cast<int>(rng.below(probe.phase_settings.size()));
    const int n = path.photon_number_at(t);
    const int outcome = rng.uniform() < likelihood(0, phase, n, probe) ? 0 : 1;
    out.push_back({t, phase, outcome});
    ++atom;
  }
  return out;
}

std::vector<SequenceRecord> synthesize_run(const CavityParams& params, const ProbeModel& probe,
                                           double initial_mean, double duration, int count, std::uint64_t seed,
                                           unsigned workers) {
  params.validate();
  probe.validate();
  if (probe.n_max() != params.n_max) throw InvalidInput("synthesize_run: probe phase table does not match n_max");
  if (!(initial_mean >= 0.0)) throw InvalidInput("synthesize_run: initial mean must be >= 0");
  if (count < 0) throw InvalidInput("synthesize_run: count must be >= 0");
  const GeneratorMatrix k = build_generator(params);
  const PhotonDistribution initial = PhotonDistribution::truncated_poisson(initial_mean, params.n_max);

  std::vector<SequenceRecord> run(static_cast<std::size_t>(count));
  parallel_for(
      run.size(),
      [&](std::size_t i) {
        const auto id = static_cast<std::uint64_t>(i);
        Rng init_rng(derive_seed(seed, id, 0));
        const int n0 = sample_photon_number(initial, init_rng.uniform());
        JumpPath path = sample_jump_path(k, n0, duration, derive_seed(seed, id, 1));
        SequenceRecord& rec = run[i];
        rec.id = static_cast<std::int64_t>(i);
        rec.detections = sample_detections(path, probe, duration, derive_seed(seed, id, 2));
        rec.truth = std::move(path);
      },
      workers);
  return run;
}

}  // namespace qndtomo
