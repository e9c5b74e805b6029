#include "qndtomo/ensemble.hpp"

#include "qndtomo/error.hpp"
#include "qndtomo/parallel.hpp"
#include "qndtomo/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

namespace qndtomo {

namespace {

std::size_t first_at_or_after(const std::vector<DetectionEvent>& d, double t) {
  const auto it = std::lower_bound(d.begin(), d.end(), t,
                                   [](const DetectionEvent& e, double value) { return e.time < value; });
  return static_cast<std::size_t>(it - d.begin());
}

// exp(log Pi - max) per window; the per-window scale cancels in the transform
Matrix scaled_products(const std::vector<WindowLikelihood>& windows) {
  if (windows.empty()) throw InvalidInput("fixed-point reconstruction needs at least one window");
  const Eigen::Index dim = windows.front().log_products.size();
  Matrix w(dim, static_cast<Eigen::Index>(windows.size()));
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Vector& lp = windows[i].log_products;
    if (lp.size() != dim) throw InvalidInput("fixed-point reconstruction: windows differ in dimension");
    const double top = lp.maxCoeff();
    if (!std::isfinite(top) || lp.hasNaN())
      throw InvalidInput("fixed-point reconstruction: window " + std::to_string(i) + " has no finite log product");
    w.col(static_cast<Eigen::Index>(i)) = (lp.array() - top).exp().matrix();
  }
  return w;
}

Vector transform(const Matrix& scaled, const Vector& p) {
  const Vector z = scaled.transpose() * p;  // per-window normalizers
  Vector acc = Vector::Zero(p.size());
  for (Eigen::Index i = 0; i < scaled.cols(); ++i) {
    if (!(z[i] > 0.0))
      throw NumericalError("fixed-point reconstruction: normalizer vanished for window " + std::to_string(i));
    acc += scaled.col(i) / z[i];
  }
  return p.cwiseProduct(acc) / static_cast<double>(scaled.cols());
}

void check_seed(const PhotonDistribution& seed_dist, int iterations) {
  if (iterations < 0) throw InvalidInput("fixed-point reconstruction: iterations must be >= 0");
  if (!(seed_dist.vec().minCoeff() > 0.0))
    throw InvalidInput("fixed-point reconstruction: seed distribution must be strictly positive");
}

}  // namespace

std::optional<WindowLikelihood> try_window_products(const SequenceRecord& seq, double t, int atoms,
                                                    const LogLikelihoodTable& table, int dim) {
  if (atoms < 0) throw InvalidInput("window_products: atom count must be >= 0");
  WindowLikelihood w;
  w.sequence_id = seq.id;
  w.start_time = t;
  w.atom_count = atoms;
  w.log_products = Vector::Zero(dim);
  if (atoms == 0) return w;

  const std::size_t first = first_at_or_after(seq.detections, t);
  if (seq.detections.size() - first < static_cast<std::size_t>(atoms)) return std::nullopt;
  for (std::size_t i = first; i < first + static_cast<std::size_t>(atoms); ++i) {
    const DetectionEvent& e = seq.detections[i];
    w.log_products += table(e.phase_index, e.outcome);
  }
  w.duration = seq.detections[first + static_cast<std::size_t>(atoms) - 1].time - seq.detections[first].time;
  return w;
}

WindowLikelihood window_products(const SequenceRecord& seq, double t, int atoms, const ProbeModel& probe) {
  auto w = try_window_products(seq, t, atoms, LogLikelihoodTable(probe), probe.n_max() + 1);
  if (!w)
    throw InvalidInput("window_products: sequence " + std::to_string(seq.id) + " has fewer than " +
                       std::to_string(atoms) + " detections after t=" + std::to_string(t));
  return std::move(*w);
}

PhotonDistribution fixed_point_step(const std::vector<WindowLikelihood>& windows, const PhotonDistribution& p) {
  return PhotonDistribution(transform(scaled_products(windows), p.vec()));
}

FixedPointTrace fixed_point_trace(const std::vector<WindowLikelihood>& windows, int iterations,
                                  const PhotonDistribution& seed_dist) {
  check_seed(seed_dist, iterations);
  const Matrix scaled = scaled_products(windows);
  if (scaled.rows() != seed_dist.size()) throw InvalidInput("fixed-point reconstruction: seed dimension mismatch");
  FixedPointTrace trace{seed_dist, {}};
  trace.step_tv.reserve(static_cast<std::size_t>(iterations));
  for (int it = 0; it < iterations; ++it) {
    PhotonDistribution next(transform(scaled, trace.estimate.vec()));
    trace.step_tv.push_back(total_variation(next, trace.estimate));
    trace.estimate = std::move(next);
  }
  return trace;
}

PhotonDistribution fixed_point_reconstruct(const std::vector<WindowLikelihood>& windows, int iterations,
                                           const PhotonDistribution& seed_dist) {
  return fixed_point_trace(windows, iterations, seed_dist).estimate;
}

int FixedPointTrace::monotonicity_violations(int burn_in) const {
  int violations = 0;
  for (std::size_t i = static_cast<std::size_t>(std::max(burn_in, 0)) + 1; i < step_tv.size(); ++i)
    if (step_tv[i] > step_tv[i - 1] * (1.0 + 1e-9) + 1e-15) ++violations;
  return violations;
}

std::vector<double> DistributionTimeline::mean_photon() const {
  std::vector<double> m(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index n = 0; n < table.cols(); ++n) acc += static_cast<double>(n) * table(static_cast<Eigen::Index>(i), n);
    m[i] = acc;
  }
  return m;
}

std::vector<double> uniform_grid(double end, double step) {
  if (!(step > 0.0) || !(end >= 0.0)) throw InvalidInput("uniform_grid: need step > 0 and end >= 0");
  std::vector<double> grid;
  const auto count = static_cast<std::size_t>(std::floor(end / step + 1e-9)) + 1;
  grid.reserve(count);
  for (std::size_t i = 0; i < count; ++i) grid.push_back(static_cast<double>(i) * step);
  return grid;
}

DistributionTimeline reconstruct_timeline(const std::vector<SequenceRecord>& seqs, const std::vector<double>& grid,
                                          const ProbeModel& probe, const ReconstructOptions& options) {
  probe.validate();
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw InvalidInput("reconstruct_timeline: grid must be strictly increasing");
  const int dim = probe.n_max() + 1;
  const PhotonDistribution flat = PhotonDistribution::flat(probe.n_max());
  const LogLikelihoodTable log_table(probe);

  DistributionTimeline out;
  out.grid = grid;
  out.table = Matrix(static_cast<Eigen::Index>(grid.size()), dim);
  out.realization_count.assign(grid.size(), 0);

  parallel_for(
      grid.size(),
      [&](std::size_t g) {
        std::vector<WindowLikelihood> windows;
        windows.reserve(seqs.size());
        for (const SequenceRecord& s : seqs)
          if (auto w = try_window_products(s, grid[g], options.atoms, log_table, dim)) windows.push_back(std::move(*w));
        out.realization_count[g] = static_cast<int>(windows.size());
        const PhotonDistribution est =
            windows.empty() ? flat : fixed_point_reconstruct(windows, options.iterations, flat);
        out.table.row(static_cast<Eigen::Index>(g)) = est.vec().transpose();
      },
      options.workers);

  for (std::size_t g = 0; g < grid.size(); ++g)
    if (out.realization_count[g] < options.min_realizations) out.sparse_points.push_back(g);
  return out;
}

std::vector<DistributionTimeline> bootstrap_timelines(const std::vector<SequenceRecord>& seqs,
                                                      const std::vector<double>& grid, const ProbeModel& probe,
                                                      int replicates, std::uint64_t seed,
                                                      const ReconstructOptions& options) {
  if (replicates < 0) throw InvalidInput("bootstrap_timelines: replicates must be >= 0");
  if (seqs.empty()) throw InvalidInput("bootstrap_timelines: no sequences");
  probe.validate();
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw InvalidInput("bootstrap_timelines: grid must be strictly increasing");
  const int dim = probe.n_max() + 1;
  const PhotonDistribution flat = PhotonDistribution::flat(probe.n_max());
  const LogLikelihoodTable log_table(probe);

  std::vector<std::vector<std::size_t>> draws(static_cast<std::size_t>(replicates));
  for (int b = 0; b < replicates; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b), 3));
    auto& d = draws[static_cast<std::size_t>(b)];
    d.resize(seqs.size());
    for (auto& i : d) i = static_cast<std::size_t>(rng.below(seqs.size()));
  }

  std::vector<DistributionTimeline> out(static_cast<std::size_t>(replicates));
  for (auto& tl : out) {
    tl.grid = grid;
    tl.table = Matrix(static_cast<Eigen::Index>(grid.size()), dim);
    tl.realization_count.assign(grid.size(), 0);
  }

  parallel_for(
      grid.size(),
      [&](std::size_t g) {
        std::vector<std::optional<WindowLikelihood>> per_seq;
        per_seq.reserve(seqs.size());
        for (const SequenceRecord& s : seqs) per_seq.push_back(try_window_products(s, grid[g], options.atoms, log_table, dim));
        std::vector<WindowLikelihood> windows;
        for (std::size_t b = 0; b < draws.size(); ++b) {
          windows.clear();
          for (std::size_t i : draws[b])
            if (per_seq[i]) windows.push_back(*per_seq[i]);
          out[b].realization_count[g] = static_cast<int>(windows.size());
          const PhotonDistribution est =
              windows.empty() ? flat : fixed_point_reconstruct(windows, options.iterations, flat);
          out[b].table.row(static_cast<Eigen::Index>(g)) = est.vec().transpose();
        }
      },
      options.workers);

  for (auto& tl : out)
    for (std::size_t g = 0; g < grid.size(); ++g)
      if (tl.realization_count[g] < options.min_realizations) tl.sparse_points.push_back(g);
  return out;
}

std::vector<FockSelectionEvent> select_fock_events(const std::vector<PosteriorTimeline>& timelines,
                                                   double threshold, double dedup_window) {
  if (!(threshold > 0.5 && threshold < 1.0)) throw InvalidInput("select_fock_events: threshold must lie in (0.5, 1)");
  if (!(dedup_window >= 0.0)) throw InvalidInput("select_fock_events: dedup window must be >= 0");
  std::vector<FockSelectionEvent> events;
  for (const PosteriorTimeline& tl : timelines) {
    if (tl.points.empty()) continue;
    const int dim = tl.points.front().posterior.size();
    std::vector<char> above(static_cast<std::size_t>(dim), 0);
    std::vector<double> last_event(static_cast<std::size_t>(dim), -std::numeric_limits<double>::infinity());
    for (const PosteriorPoint& pt : tl.points) {
      for (int n = 0; n < dim; ++n) {
        const auto idx = static_cast<std::size_t>(n);
        const bool now_above = pt.posterior[n] > threshold;
        if (now_above && !above[idx] && pt.time - last_event[idx] >= dedup_window) {
          events.push_back({tl.sequence_id, pt.time, n, pt.posterior[n]});
          last_event[idx] = pt.time;
        }
        above[idx] = now_above;
      }
    }
  }
  return events;
}

FockEnsembles build_fock_ensembles(const std::vector<SequenceRecord>& seqs,
                                   const std::vector<FockSelectionEvent>& events, double horizon) {
  if (!(horizon > 0.0)) throw InvalidInput("build_fock_ensembles: horizon must be > 0");
  std::unordered_map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < seqs.size(); ++i) index.emplace(seqs[i].id, i);

  FockEnsembles out;
  for (const FockSelectionEvent& ev : events) {
    const auto it = index.find(ev.sequence_id);
    if (it == index.end())
      throw InvalidInput("build_fock_ensembles: event references unknown sequence " + std::to_string(ev.sequence_id));
    const SequenceRecord& src = seqs[it->second];

    SequenceRecord view;
    view.id = src.id;
    const auto first = std::upper_bound(src.detections.begin(), src.detections.end(), ev.t0,
                                        [](double value, const DetectionEvent& e) { return value < e.time; });
    for (auto d = first; d != src.detections.end() && d->time <= ev.t0 + horizon; ++d)
      view.detections.push_back({d->time - ev.t0, d->phase_index, d->outcome});
    if (view.detections.empty()) {
      ++out.dropped_events;
      continue;
    }
    if (src.truth) {
      JumpPath shifted{src.truth->photon_number_at(ev.t0), {}};
      for (const Jump& j : src.truth->events)
        if (j.time > ev.t0 && j.time <= ev.t0 + horizon) shifted.events.push_back({j.time - ev.t0, j.new_n});
      view.truth = std::move(shifted);
    }
    out.by_n0[ev.n0].push_back(std::move(view));
  }
  return out;
}

}  // namespace qndtomo
