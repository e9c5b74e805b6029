#include "qndtomo/bayesfilter.hpp"

#include "qndtomo/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qndtomo {

double likelihood(int outcome, int phase_index, int n, const ProbeModel& probe) {
  const double signal =
      probe.offset + probe.contrast * std::cos(probe.phase_per_photon[static_cast<std::size_t>(n)] +
                                               probe.phase_settings[static_cast<std::size_t>(phase_index)]);
  const double p0 = 0.5 * (1.0 + signal);
  // p1 as the complement so the two outcomes sum to one exactly
  return outcome == 0 ? p0 : 1.0 - p0;
}

Vector likelihood_vector(const DetectionEvent& event, const ProbeModel& probe) {
  const int dim = probe.n_max() + 1;
  Vector l(dim);
  for (int n = 0; n < dim; ++n) l[n] = likelihood(event.outcome, event.phase_index, n, probe);
  return l;
}

LogLikelihoodTable::LogLikelihoodTable(const ProbeModel& probe) {
  rows_.reserve(2 * probe.phase_settings.size());
  for (int k = 0; k < probe.phase_count(); ++k)
    for (int j = 0; j < 2; ++j) rows_.push_back(likelihood_vector({0.0, k, j}, probe).array().log().matrix());
}

PhotonDistribution bayes_update(const PhotonDistribution& prior, const DetectionEvent& event,
                                const ProbeModel& probe) {
  if (prior.size() != probe.n_max() + 1) throw InvalidInput("bayes_update: prior does not match probe n_max");
  const Vector joint = prior.vec().cwiseProduct(likelihood_vector(event, probe));
  const double evidence = joint.sum();
  if (!(evidence >= 1e-300)) throw NumericalError("bayes_update: evidence vanished (Z < 1e-300)");
  return PhotonDistribution(Vector(joint / evidence));
}

PosteriorTimeline filter_sequence(const SequenceRecord& seq, const PhotonDistribution& prior,
                                  const GeneratorMatrix& k, const ProbeModel& probe) {
  if (prior.size() != k.size()) throw InvalidInput("filter_sequence: prior and generator dimensions differ");
  PosteriorTimeline timeline;
  timeline.sequence_id = seq.id;
  timeline.points.reserve(seq.detections.size());
  PhotonDistribution current = prior;
  double t = 0.0;
  for (std::size_t i = 0; i < seq.detections.size(); ++i) {
    const DetectionEvent& e = seq.detections[i];
    if (e.time < t) throw InvalidInput("filter_sequence: detections out of order at index " + std::to_string(i));
    current = propagate(current, k, e.time - t);
    t = e.time;
    try {
      current = bayes_update(current, e, probe);
    } catch (const NumericalError& err) {
      throw FilterError("sequence " + std::to_string(seq.id) + ", event " + std::to_string(i) + ": " + err.what(),
                        i);
    }
    timeline.points.push_back({t, current});
  }
  return timeline;
}

PhotonDistribution estimate_at(const PosteriorTimeline& timeline, const PhotonDistribution& prior,
                               const GeneratorMatrix& k, double t) {
  const auto it = std::upper_bound(timeline.points.begin(), timeline.points.end(), t,
                                   [](double value, const PosteriorPoint& p) { return value < p.time; });
  if (it == timeline.points.begin()) return propagate(prior, k, t);
  const PosteriorPoint& last = *std::prev(it);
  return propagate(last.posterior, k, t - last.time);
}

std::pair<double, double> invert_spin(std::span<const double> mean_signed, const ProbeModel& probe) {
  if (mean_signed.size() != probe.phase_settings.size())
    throw InvalidInput("invert_spin: one mean per phase setting expected");
  // normal equations of the 2-parameter linear model
  double cc = 0.0, cs = 0.0, ss = 0.0, cb = 0.0, sb = 0.0;
  for (std::size_t k = 0; k < probe.phase_settings.size(); ++k) {
    const double c = std::cos(probe.phase_settings[k]);
    const double s = -std::sin(probe.phase_settings[k]);
    const double b = mean_signed[k] - probe.offset;
    cc += c * c;
    cs += c * s;
    ss += s * s;
    cb += c * b;
    sb += s * b;
  }
  const double det = cc * ss - cs * cs;
  if (!(std::abs(det) > 1e-12)) throw NumericalError("invert_spin: phase settings do not span the plane");
  return {(ss * cb - cs * sb) / det, (cc * sb - cs * cb) / det};
}

std::vector<SpinSample> spin_samples(const SequenceRecord& seq, const ProbeModel& probe, int window_atoms,
                                     int stride) {
  const auto settings = static_cast<std::size_t>(probe.phase_count());
  if (window_atoms < probe.phase_count())
    throw InvalidInput("spin_samples: window must hold at least one atom per phase setting");
  if (stride < 0) throw InvalidInput("spin_samples: stride must be >= 0");
  if (stride == 0) stride = window_atoms;

  const auto& d = seq.detections;
  const auto window = static_cast<std::size_t>(window_atoms);
  std::vector<SpinSample> out;
  if (d.size() < window) return out;

  // running per-setting sums of (-1)^j and counts
  std::vector<double> sum(settings, 0.0);
  std::vector<int> count(settings, 0);
  auto add = [&](const DetectionEvent& e, int sign) {
    const auto k = static_cast<std::size_t>(e.phase_index);
    sum[k] += sign * (e.outcome == 0 ? 1.0 : -1.0);
    count[k] += sign;
  };
  for (std::size_t i = 0; i < window; ++i) add(d[i], +1);

  std::vector<double> mean(settings);
  std::size_t start = 0;
  for (;;) {
    for (std::size_t k = 0; k < settings; ++k) {
      if (count[k] == 0)
        throw InvalidInput("spin_samples: sequence " + std::to_string(seq.id) + " window at atom " +
                           std::to_string(start) + " lacks phase setting " + std::to_string(k));
      mean[k] = sum[k] / count[k];
    }
    const auto [x, y] = invert_spin(mean, probe);
    out.push_back({x, y, d[start].time, window_atoms});

    const std::size_t next = start + static_cast<std::size_t>(stride);
    if (next + window > d.size()) break;
    for (std::size_t i = start; i < std::min(next, start + window); ++i) add(d[i], -1);
    for (std::size_t i = std::max(start + window, next); i < next + window; ++i) add(d[i], +1);
    start = next;
  }
  return out;
}

}  // namespace qndtomo
