#include "qndtomo/pipeline.hpp"

#include "qndtomo/bayesfilter.hpp"
#include "qndtomo/ensemble.hpp"
#include "qndtomo/error.hpp"
#include "qndtomo/io.hpp"
#include "qndtomo/parallel.hpp"
#include "qndtomo/spinhist.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

namespace qndtomo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration

namespace {

using io::format_double;

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

int to_int(const std::string& v) {
  const std::int64_t x = io::parse_int(v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw InvalidInput("integer out of range: " + v);
  return static_cast<int>(x);
}

std::vector<double> to_list(const std::string& v) {
  std::vector<double> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(io::parse_double(item));
  if (out.empty()) throw InvalidInput("empty list");
  return out;
}

std::string from_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

struct Setting {
  const char* key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
  bool affects_outputs = true;
};

const std::vector<Setting>& registry() {
  using C = PipelineConfig;
  auto dbl = [](const char* key, std::function<double&(C&)> ref) {
    return Setting{key, [ref](const C& c) { return format_double(ref(const_cast<C&>(c))); },
                   [ref](C& c, const std::string& v) { ref(c) = io::parse_double(v); }};
  };
  auto integer = [](const char* key, std::function<int&(C&)> ref) {
    return Setting{key, [ref](const C& c) { return std::to_string(ref(const_cast<C&>(c))); },
                   [ref](C& c, const std::string& v) { ref(c) = to_int(v); }};
  };
  static const std::vector<Setting> settings = {
      Setting{"cavity.damping_time", [](const C& c) { return format_double(1.0 / c.cavity.kappa); },
              [](C& c, const std::string& v) {
                const double t = io::parse_double(v);
                if (!(t > 0.0)) throw InvalidInput("damping time must be > 0");
                c.cavity.kappa = 1.0 / t;
              }},
      dbl("cavity.n_b", [](C& c) -> double& { return c.cavity.n_b; }),
      integer("cavity.n_max", [](C& c) -> int& { return c.cavity.n_max; }),
      dbl("probe.phase_per_photon", [](C& c) -> double& { return c.phase_per_photon; }),
      Setting{"probe.phase_table",
              [](const C& c) { return c.explicit_phase_table ? from_list(c.probe.phase_per_photon) : std::string(); },
              [](C& c, const std::string& v) {
                if (trim(v).empty()) {
                  c.explicit_phase_table = false;
                  return;
                }
                c.probe.phase_per_photon = to_list(v);
                c.explicit_phase_table = true;
              }},
      dbl("probe.offset", [](C& c) -> double& { return c.probe.offset; }),
      dbl("probe.contrast", [](C& c) -> double& { return c.probe.contrast; }),
      Setting{"probe.phase_settings", [](const C& c) { return from_list(c.probe.phase_settings); },
              [](C& c, const std::string& v) { c.probe.phase_settings = to_list(v); }},
      dbl("probe.mean_interval", [](C& c) -> double& { return c.probe.mean_interval; }),
      Setting{"probe.arrival",
              [](const C& c) { return std::string(c.probe.arrival_mode == ArrivalMode::poisson ? "poisson" : "periodic"); },
              [](C& c, const std::string& v) {
                if (v == "poisson")
                  c.probe.arrival_mode = ArrivalMode::poisson;
                else if (v == "periodic")
                  c.probe.arrival_mode = ArrivalMode::periodic;
                else
                  throw InvalidInput("arrival must be poisson or periodic");
              }},
      Setting{"probe.schedule",
              [](const C& c) {
                return std::string(c.probe.schedule == PhaseSchedule::round_robin ? "round_robin" : "random");
              },
              [](C& c, const std::string& v) {
                if (v == "round_robin")
                  c.probe.schedule = PhaseSchedule::round_robin;
                else if (v == "random")
                  c.probe.schedule = PhaseSchedule::random;
                else
                  throw InvalidInput("schedule must be round_robin or random");
              }},
      integer("run.sequences", [](C& c) -> int& { return c.run.sequences; }),
      dbl("run.duration", [](C& c) -> double& { return c.run.duration; }),
      dbl("run.initial_mean", [](C& c) -> double& { return c.run.initial_mean; }),
      Setting{"run.seed", [](const C& c) { return std::to_string(c.run.seed); },
              [](C& c, const std::string& v) {
                const std::string t = trim(v);
                std::uint64_t x = 0;
                const auto res = std::from_chars(t.data(), t.data() + t.size(), x);
                if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
                  throw InvalidInput("seed must be an unsigned 64-bit integer");
                c.run.seed = x;
              }},
      Setting{"run.workers", [](const C& c) { return std::to_string(c.run.workers); },
              [](C& c, const std::string& v) {
                const int w = to_int(v);
                if (w < 0) throw InvalidInput("workers must be >= 0");
                c.run.workers = static_cast<unsigned>(w);
              },
              false},
      integer("reconstruct.atoms", [](C& c) -> int& { return c.reconstruct.atoms; }),
      integer("reconstruct.iterations", [](C& c) -> int& { return c.reconstruct.iterations; }),
      dbl("reconstruct.grid_step", [](C& c) -> double& { return c.reconstruct.grid_step; }),
      integer("reconstruct.min_realizations", [](C& c) -> int& { return c.reconstruct.min_realizations; }),
      integer("reconstruct.bootstrap", [](C& c) -> int& { return c.reconstruct.bootstrap; }),
      Setting{"reconstruct.snapshots", [](const C& c) { return from_list(c.snapshots); },
              [](C& c, const std::string& v) { c.snapshots = to_list(v); }},
      dbl("select.threshold", [](C& c) -> double& { return c.select.threshold; }),
      dbl("select.dedup_window", [](C& c) -> double& { return c.select.dedup_window; }),
      dbl("select.horizon", [](C& c) -> double& { return c.select.horizon; }),
      dbl("fit.window", [](C& c) -> double& { return c.fit.window; }),
      Setting{"fit.mode",
              [](const C& c) { return std::string(c.fit.mode == ConstraintMode::constrained ? "constrained" : "relaxed"); },
              [](C& c, const std::string& v) {
                if (v == "constrained")
                  c.fit.mode = ConstraintMode::constrained;
                else if (v == "relaxed")
                  c.fit.mode = ConstraintMode::relaxed;
                else
                  throw InvalidInput("fit mode must be constrained or relaxed");
              }},
      dbl("fit.variance_floor", [](C& c) -> double& { return c.fit.variance_floor; }),
      integer("fit.max_iterations", [](C& c) -> int& { return c.fit.max_iterations; }),
      dbl("predict.horizon", [](C& c) -> double& { return c.predict_horizon; }),
      integer("histogram.window_atoms", [](C& c) -> int& { return c.histogram.window_atoms; }),
      integer("histogram.stride", [](C& c) -> int& { return c.histogram.stride; }),
      integer("histogram.atoms", [](C& c) -> int& { return c.histogram.atoms; }),
      integer("histogram.bins", [](C& c) -> int& { return c.histogram.bins; }),
      dbl("histogram.extent", [](C& c) -> double& { return c.histogram.extent; }),
      dbl("histogram.smoothing", [](C& c) -> double& { return c.histogram.smoothing; }),
      integer("histogram.neighborhood", [](C& c) -> int& { return c.histogram.neighborhood; }),
      dbl("histogram.min_fraction", [](C& c) -> double& { return c.histogram.min_fraction; }),
      integer("histogram.select_n", [](C& c) -> int& { return c.histogram.select_n; }),
      dbl("histogram.min_radius", [](C& c) -> double& { return c.histogram.min_radius; }),
      Setting{"output.dir", [](const C& c) { return c.output.dir.string(); },
              [](C& c, const std::string& v) {
                if (trim(v).empty()) throw InvalidInput("output directory must be nonempty");
                c.output.dir = trim(v);
              },
              false},
      integer("output.posterior_stride", [](C& c) -> int& { return c.output.posterior_stride; }),
  };
  return settings;
}

void sync_phase_table(PipelineConfig& c) {
  if (!c.explicit_phase_table) c.probe.phase_per_photon = ProbeModel::linear_phases(c.phase_per_photon, c.cavity.n_max);
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
  for (const Setting& s : registry()) {
    if (key != s.key) continue;
    try {
      s.set(*this, trim(value));
    } catch (const InvalidInput& e) {
      throw InvalidInput("config key '" + key + "': " + e.what());
    }
    sync_phase_table(*this);
    return;
  }
  throw InvalidInput("unknown config key '" + key + "'");
}

void PipelineConfig::load(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    const std::string t = trim(hash_pos == std::string::npos ? line : line.substr(0, hash_pos));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value", line_no);
    try {
      set(trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const InvalidInput& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
}

void PipelineConfig::validate() const {
  cavity.validate();
  probe.validate();
  if (probe.n_max() != cavity.n_max)
    throw InvalidInput("config: phase table has " + std::to_string(probe.phase_per_photon.size()) +
                       " entries but cavity.n_max = " + std::to_string(cavity.n_max));
  if (run.sequences < 1) throw InvalidInput("config: run.sequences must be >= 1");
  if (!(run.duration > 0.0)) throw InvalidInput("config: run.duration must be > 0");
  if (!(run.initial_mean >= 0.0)) throw InvalidInput("config: run.initial_mean must be >= 0");
  if (reconstruct.atoms < 1) throw InvalidInput("config: reconstruct.atoms must be >= 1");
  if (reconstruct.iterations < 1) throw InvalidInput("config: reconstruct.iterations must be >= 1");
  if (!(reconstruct.grid_step > 0.0)) throw InvalidInput("config: reconstruct.grid_step must be > 0");
  if (reconstruct.min_realizations < 1) throw InvalidInput("config: reconstruct.min_realizations must be >= 1");
  if (reconstruct.bootstrap < 0) throw InvalidInput("config: reconstruct.bootstrap must be >= 0");
  for (double t : snapshots)
    if (!(t >= 0.0 && t <= run.duration)) throw InvalidInput("config: snapshots must lie in [0, run.duration]");
  if (!(select.threshold > 0.5 && select.threshold < 1.0)) throw InvalidInput("config: select.threshold must lie in (0.5, 1)");
  if (!(select.dedup_window >= 0.0)) throw InvalidInput("config: select.dedup_window must be >= 0");
  if (!(select.horizon > 0.0)) throw InvalidInput("config: select.horizon must be > 0");
  if (!(fit.window > 0.0)) throw InvalidInput("config: fit.window must be > 0");
  if (!(fit.variance_floor > 0.0)) throw InvalidInput("config: fit.variance_floor must be > 0");
  if (fit.max_iterations < 1) throw InvalidInput("config: fit.max_iterations must be >= 1");
  if (!(predict_horizon > 0.0)) throw InvalidInput("config: predict.horizon must be > 0");
  if (histogram.window_atoms < probe.phase_count())
    throw InvalidInput("config: histogram.window_atoms must be >= the number of phase settings");
  if (histogram.stride < 1) throw InvalidInput("config: histogram.stride must be >= 1");
  if (histogram.atoms < histogram.window_atoms) throw InvalidInput("config: histogram.atoms must be >= window_atoms");
  if (histogram.bins < 3) throw InvalidInput("config: histogram.bins must be >= 3");
  if (!(histogram.extent > 0.0)) throw InvalidInput("config: histogram.extent must be > 0");
  if (!(histogram.smoothing >= 0.0)) throw InvalidInput("config: histogram.smoothing must be >= 0");
  if (histogram.select_n < 0 || histogram.select_n > cavity.n_max)
    throw InvalidInput("config: histogram.select_n must lie in [0, n_max]");
  if (output.posterior_stride < 1) throw InvalidInput("config: output.posterior_stride must be >= 1");
}

std::string PipelineConfig::to_text() const {
  std::string out;
  for (const Setting& s : registry()) out += std::string(s.key) + " = " + s.get(*this) + "\n";
  return out;
}

std::string PipelineConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Setting& s : registry()) {
    if (!s.affects_outputs) continue;
    const std::string line = std::string(s.key) + "=" + s.get(*this) + "\n";
    for (unsigned char ch : line) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const Setting& s : registry()) out.emplace_back(s.key);
  return out;
}

// ---------------------------------------------------------------------------
// stages

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::simulate: return "simulate";
    case Stage::reconstruct: return "reconstruct";
    case Stage::filter: return "filter";
    case Stage::histogram: return "histogram";
    case Stage::select: return "select";
    case Stage::fit: return "fit";
    case Stage::predict: return "predict";
    case Stage::report: return "report";
  }
  return "unknown";
}

std::set<Stage> parse_stages(const std::vector<std::string>& names) {
  static const Stage all[] = {Stage::simulate, Stage::reconstruct, Stage::filter, Stage::histogram,
                              Stage::select,   Stage::fit,         Stage::predict, Stage::report};
  std::set<Stage> out;
  for (const std::string& name : names) {
    if (name == "all") {
      out.insert(std::begin(all), std::end(all));
      continue;
    }
    bool found = false;
    for (Stage s : all)
      if (name == to_string(s)) {
        out.insert(s);
        found = true;
      }
    if (!found) throw InvalidInput("unknown stage '" + name + "'");
  }
  return out;
}

namespace artifact {
std::string fock_timeline(int n0) { return "fock_timeline_n" + std::to_string(n0) + ".csv"; }
std::string prediction(int n0) { return "prediction_n" + std::to_string(n0) + ".csv"; }
}  // namespace artifact

namespace {

struct PredictionError {
  int n0 = 0;
  double max_abs_error = 0.0;
  double at_time = 0.0;
  int at_n = 0;
  int points = 0;
};

class Runner {
 public:
  explicit Runner(const PipelineConfig& config)
      : cfg_(config), dir_(config.output.dir), probe_(config.probe), hash_(config.hash()) {}

  PipelineSummary run(const std::set<Stage>& stages) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw StageError(*stages.begin(), "io", "cannot create artifact directory '" + dir_.string() + "'");
    write(artifact::config, "# config_hash=" + hash_ + "\n" + cfg_.to_text());
    for (Stage s : stages) {
      stage_ = s;
      try {
        dispatch(s);
      } catch (const StageError&) {
        throw;
      } catch (const ParseError& e) {
        throw StageError(s, "parse", e.what());
      } catch (const InvalidInput& e) {
        throw StageError(s, "invalid_input", e.what());
      } catch (const NumericalError& e) {
        throw StageError(s, "numerical", e.what());
      }
    }
    return std::move(summary_);
  }

 private:
  void dispatch(Stage s) {
    switch (s) {
      case Stage::simulate: return simulate();
      case Stage::reconstruct: return reconstruct();
      case Stage::filter: return filter();
      case Stage::histogram: return histogram();
      case Stage::select: return select();
      case Stage::fit: return fit();
      case Stage::predict: return predict();
      case Stage::report: return report();
    }
  }

  io::Metadata meta(const std::string& name) const {
    return {{"artifact", name}, {"config_hash", hash_}, {"seed", std::to_string(cfg_.run.seed)}};
  }

  void write(const std::string& name, const std::string& content) {
    io::write_file(dir_ / name, content);
    summary_.written.push_back(name);
  }
  void write(const std::string& name, const io::Table& table) { write(name, io::to_string(table)); }

  [[noreturn]] void missing(const std::string& what, const char* producer) const {
    throw StageError(stage_, "missing_input",
                     "stage " + std::string(to_string(stage_)) + " needs " + what + "; run stage " + producer + " first");
  }

  io::Table load_table(const std::string& name, const char* producer) {
    const fs::path path = dir_ / name;
    if (!fs::exists(path)) missing(name, producer);
    std::istringstream in(io::read_file(path));
    try {
      io::Table t = io::read_table(in);
      check_origin(name, t.find_meta("config_hash"));
      return t;
    } catch (const ParseError& e) {
      throw StageError(stage_, "parse", name + ": " + e.what());
    }
  }

  void check_origin(const std::string& name, const std::string* file_hash) {
    if (file_hash && *file_hash != hash_)
      summary_.notes.push_back("input " + name + " was written under config hash " + *file_hash);
  }

  // ---- inputs -------------------------------------------------------------

  const std::vector<SequenceRecord>& sequences() {
    if (seqs_) return *seqs_;
    const fs::path path = dir_ / artifact::sequences;
    if (!fs::exists(path)) missing(artifact::sequences, "simulate");
    try {
      io::SequenceFile file = io::ingest_sequences(path, probe_.phase_count());
      for (const auto& [k, v] : file.meta)
        if (k == "config_hash") check_origin(artifact::sequences, &v);
      for (const SequenceRecord& r : file.records)
        if (r.truth) r.truth->validate(cfg_.cavity.n_max);
      seqs_ = std::move(file.records);
    } catch (const ParseError& e) {
      throw StageError(stage_, "parse", std::string(artifact::sequences) + ": " + e.what());
    }
    return *seqs_;
  }

  const DistributionTimeline& coherent() {
    if (!coherent_) coherent_ = timeline_from_table(load_table(artifact::coherent_timeline, "reconstruct"));
    return *coherent_;
  }

  const ExpFit& coherent_fit() {
    if (expfit_) return *expfit_;
    const io::Table t = load_table(artifact::coherent_fit, "reconstruct");
    ExpFit f;
    auto get = [&](const char* key) {
      const std::string* v = t.find_meta(key);
      if (!v) throw StageError(stage_, "parse", std::string(artifact::coherent_fit) + ": missing '" + key + "'");
      return io::parse_double(*v);
    };
    f.time_constant = get("time_constant_s");
    f.offset = get("offset");
    f.amplitude = get("amplitude");
    f.rms_residual = get("rms_residual");
    expfit_ = f;
    return *expfit_;
  }

  const std::vector<FockSelectionEvent>& events() {
    if (!events_) events_ = io::events_from_table(load_table(artifact::events, "filter"));
    return *events_;
  }

  const std::map<int, DistributionTimeline>& fock() {
    if (fock_) return *fock_;
    std::map<int, DistributionTimeline> out;
    for (int n0 = 0; n0 <= cfg_.cavity.n_max; ++n0)
      if (fs::exists(dir_ / artifact::fock_timeline(n0)))
        out.emplace(n0, timeline_from_table(load_table(artifact::fock_timeline(n0), "select")));
    if (out.empty()) missing("Fock-selected timelines", "select");
    fock_ = std::move(out);
    return *fock_;
  }

  const FitResult& fitted() {
    if (!fit_) {
      const io::Table m = load_table(artifact::fit_matrix, "fit");
      const io::Table i = load_table(artifact::fit_initial, "fit");
      fit_ = io::fit_from_tables(m, i);
      fit_->fit_window = cfg_.fit.window;
    }
    return *fit_;
  }

  static DistributionTimeline timeline_from_table(const io::Table& t) { return io::timeline_from_table(t); }

  ReconstructOptions reconstruct_options() const {
    ReconstructOptions o;
    o.atoms = cfg_.reconstruct.atoms;
    o.iterations = cfg_.reconstruct.iterations;
    o.min_realizations = cfg_.reconstruct.min_realizations;
    o.workers = cfg_.run.workers;
    return o;
  }

  // ---- stages -------------------------------------------------------------

  void simulate() {
    seqs_ = synthesize_run(cfg_.cavity, probe_, cfg_.run.initial_mean, cfg_.run.duration, cfg_.run.sequences,
                           cfg_.run.seed, cfg_.run.workers);
    io::Metadata m = meta(artifact::sequences);
    m.emplace_back("probe_offset", format_double(probe_.offset));
    m.emplace_back("probe_contrast", format_double(probe_.contrast));
    m.emplace_back("probe_phase_settings", from_list(probe_.phase_settings));
    m.emplace_back("probe_phase_per_photon", from_list(probe_.phase_per_photon));
    m.emplace_back("probe_mean_interval_s", format_double(probe_.mean_interval));
    m.emplace_back("duration_s", format_double(cfg_.run.duration));
    std::ostringstream out;
    io::write_sequences(out, *seqs_, m);
    write(artifact::sequences, out.str());
    // the fresh run supersedes derived artifacts of any earlier one
    coherent_.reset();
    expfit_.reset();
    events_.reset();
    fock_.reset();
    fit_.reset();
  }

  void reconstruct() {
    const auto& seqs = sequences();
    const std::vector<double> grid = uniform_grid(cfg_.run.duration, cfg_.reconstruct.grid_step);
    coherent_ = reconstruct_timeline(seqs, grid, probe_, reconstruct_options());
    write(artifact::coherent_timeline, io::timeline_table(*coherent_, meta(artifact::coherent_timeline)));
    if (!coherent_->sparse_points.empty())
      summary_.notes.push_back("coherent timeline: " + std::to_string(coherent_->sparse_points.size()) +
                               " grid points below " + std::to_string(cfg_.reconstruct.min_realizations) +
                               " realizations");

    expfit_ = fit_exponential_mean(*coherent_, cfg_.reconstruct.min_realizations);
    io::Table t;
    t.meta = meta(artifact::coherent_fit);
    t.meta.emplace_back("time_constant_s", format_double(expfit_->time_constant));
    t.meta.emplace_back("offset", format_double(expfit_->offset));
    t.meta.emplace_back("amplitude", format_double(expfit_->amplitude));
    t.meta.emplace_back("rms_residual", format_double(expfit_->rms_residual));
    t.meta.emplace_back("status", to_string(expfit_->status));
    t.columns = {"time_s", "mean_photon", "poisson_mean", "tv_residual", "realization_count"};
    for (double when : cfg_.snapshots) {
      const auto idx = nearest(coherent_->grid, when);
      const PhotonDistribution p = coherent_->at(idx);
      const PoissonFit pf = fit_poisson(p);
      t.rows.push_back({coherent_->grid[idx], mean_photon(p), pf.mean, pf.tv_residual,
                        static_cast<double>(coherent_->realization_count[idx])});
    }
    write(artifact::coherent_fit, t);
    if (expfit_->status != FitStatus::ok)
      summary_.notes.push_back(std::string("coherent exponential fit status: ") + to_string(expfit_->status));

    if (cfg_.reconstruct.bootstrap > 0)
      bootstrap(seqs, grid);
    else
      fs::remove(dir_ / artifact::coherent_bootstrap);
  }

  void bootstrap(const std::vector<SequenceRecord>& seqs, const std::vector<double>& grid) {
    const auto reps = bootstrap_timelines(seqs, grid, probe_, cfg_.reconstruct.bootstrap, cfg_.run.seed,
                                          reconstruct_options());
    const auto spread = [](const std::vector<double>& v) {
      if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
      double m = 0.0, ss = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      for (double x : v) ss += (x - m) * (x - m);
      return std::sqrt(ss / static_cast<double>(v.size() - 1));
    };
    std::vector<double> tc, off;
    for (const auto& r : reps) {
      const ExpFit f = fit_exponential_mean(r, cfg_.reconstruct.min_realizations);
      if (f.status != FitStatus::ok) continue;
      tc.push_back(f.time_constant);
      off.push_back(f.offset);
    }
    io::Table t;
    t.meta = meta(artifact::coherent_bootstrap);
    t.meta.emplace_back("replicates", std::to_string(reps.size()));
    t.meta.emplace_back("fits_ok", std::to_string(tc.size()));
    t.meta.emplace_back("time_constant_se_s", format_double(spread(tc)));
    t.meta.emplace_back("offset_se", format_double(spread(off)));
    const int dim = cfg_.cavity.n_max + 1;
    t.columns = {"time_s", "mean_photon_se"};
    for (int n = 0; n < dim; ++n) t.columns.push_back("P" + std::to_string(n) + "_se");
    for (std::size_t g = 0; g < grid.size(); ++g) {
      std::vector<double> row{grid[g]};
      std::vector<double> means;
      for (const auto& r : reps) means.push_back(mean_photon(r.at(g)));
      row.push_back(spread(means));
      for (int n = 0; n < dim; ++n) {
        std::vector<double> p;
        for (const auto& r : reps) p.push_back(r.table(static_cast<Eigen::Index>(g), n));
        row.push_back(spread(p));
      }
      t.rows.push_back(std::move(row));
    }
    write(artifact::coherent_bootstrap, t);
  }

  static std::size_t nearest(const std::vector<double>& grid, double t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (std::abs(grid[i] - t) < std::abs(grid[best] - t)) best = i;
    return best;
  }

  void filter() {
    const auto& seqs = sequences();
    const ExpFit& ef = coherent_fit();
    const DistributionTimeline& tl = coherent();
    if (!(ef.time_constant > 0.0) || !std::isfinite(ef.time_constant))
      throw StageError(stage_, "numerical", "coherent fit gave no usable damping time");
    CavityParams fitted{1.0 / ef.time_constant, std::max(ef.offset, 0.0), cfg_.cavity.n_max};
    const GeneratorMatrix k = build_generator(fitted);
    const PhotonDistribution prior =
        PhotonDistribution::truncated_poisson(fit_poisson(tl.at(0)).mean, cfg_.cavity.n_max);

    std::vector<PosteriorTimeline> thinned(seqs.size());
    std::vector<std::vector<FockSelectionEvent>> per_seq(seqs.size());
    const int stride = cfg_.output.posterior_stride;
    parallel_for(
        seqs.size(),
        [&](std::size_t i) {
          PosteriorTimeline full = filter_sequence(seqs[i], prior, k, probe_);
          per_seq[i] = select_fock_events({full}, cfg_.select.threshold, cfg_.select.dedup_window);
          PosteriorTimeline& keep = thinned[i];
          keep.sequence_id = full.sequence_id;
          for (std::size_t j = 0; j < full.points.size(); ++j)
            if (j % static_cast<std::size_t>(stride) == 0 || j + 1 == full.points.size())
              keep.points.push_back(std::move(full.points[j]));
        },
        cfg_.run.workers);

    io::Metadata m = meta(artifact::posteriors);
    m.emplace_back("filter_kappa_per_s", format_double(fitted.kappa));
    m.emplace_back("filter_n_b", format_double(fitted.n_b));
    m.emplace_back("stride", std::to_string(stride));
    write(artifact::posteriors, io::posterior_table(thinned, 1, m));

    events_.emplace();
    for (auto& v : per_seq) events_->insert(events_->end(), v.begin(), v.end());
    io::Metadata em = meta(artifact::events);
    em.emplace_back("threshold", format_double(cfg_.select.threshold));
    em.emplace_back("dedup_window_s", format_double(cfg_.select.dedup_window));
    write(artifact::events, io::events_table(*events_, em));
  }

  void histogram() {
    const auto& seqs = sequences();
    const HistogramConfig& h = cfg_.histogram;
    SpinHistogram all(h.bins, h.extent), conditioned(h.bins, h.extent), postselected(h.bins, h.extent);
    std::vector<std::vector<SpinSample>> sliding(seqs.size()), blocks(seqs.size());
    parallel_for(
        seqs.size(),
        [&](std::size_t i) {
          SequenceRecord head;
          head.id = seqs[i].id;
          const std::size_t keep = std::min(seqs[i].detections.size(), static_cast<std::size_t>(h.atoms));
          head.detections.assign(seqs[i].detections.begin(), seqs[i].detections.begin() + static_cast<std::ptrdiff_t>(keep));
          sliding[i] = spin_samples(head, probe_, h.window_atoms, h.stride);
          blocks[i] = spin_samples(seqs[i], probe_, h.window_atoms, 0);
        },
        cfg_.run.workers);

    long pairs = 0, triples = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      all.add(sliding[i]);
      const auto& b = blocks[i];
      for (std::size_t w = 0; w + 1 < b.size(); ++w) {
        if (classify_spin(b[w], probe_, h.min_radius) != h.select_n) continue;
        conditioned.add(b[w + 1].x, b[w + 1].y);
        ++pairs;
        if (w + 2 < b.size() && classify_spin(b[w + 2], probe_, h.min_radius) == h.select_n) {
          postselected.add(b[w + 1].x, b[w + 1].y);
          ++triples;
        }
      }
    }
    PeakOptions po;
    po.smoothing_bins = h.smoothing;
    po.neighborhood = h.neighborhood;
    po.min_fraction = h.min_fraction;
    const auto peaks = find_peaks(all, po);
    write(artifact::spin_histogram, io::histogram_table(all, meta(artifact::spin_histogram)));
    write(artifact::spin_peaks, io::peaks_table(peaks, probe_, meta(artifact::spin_peaks)));

    io::Metadata cm = meta(artifact::spin_conditioned);
    cm.emplace_back("selected_n", std::to_string(h.select_n));
    cm.emplace_back("protocol", "second_of_two_windows");
    write(artifact::spin_conditioned, io::histogram_table(conditioned, cm));
    io::Metadata pm = meta(artifact::spin_postselected);
    pm.emplace_back("selected_n", std::to_string(h.select_n));
    pm.emplace_back("protocol", "middle_of_three_windows");
    write(artifact::spin_postselected, io::histogram_table(postselected, pm));
    summary_.notes.push_back("spin histogram: " + std::to_string(peaks.size()) + " peaks from " +
                             std::to_string(all.total()) + " samples; " + std::to_string(pairs) + " conditioned, " +
                             std::to_string(triples) + " post-selected");
  }

  void select() {
    const auto& seqs = sequences();
    const auto& evs = events();
    const FockEnsembles ens = build_fock_ensembles(seqs, evs, cfg_.select.horizon);
    if (ens.dropped_events > 0)
      summary_.notes.push_back("selection: " + std::to_string(ens.dropped_events) + " events had no detection in the horizon");
    const std::vector<double> grid = uniform_grid(cfg_.select.horizon, cfg_.reconstruct.grid_step);
    fock_.emplace();
    for (const auto& [n0, views] : ens.by_n0) {
      DistributionTimeline tl = reconstruct_timeline(views, grid, probe_, reconstruct_options());
      io::Metadata m = meta(artifact::fock_timeline(n0));
      m.emplace_back("n0", std::to_string(n0));
      m.emplace_back("events", std::to_string(views.size()));
      write(artifact::fock_timeline(n0), io::timeline_table(tl, m));
      fock_->emplace(n0, std::move(tl));
    }
    // a stale file from an earlier run must not leak into the fit
    for (int n0 = 0; n0 <= cfg_.cavity.n_max; ++n0)
      if (!ens.by_n0.count(n0)) fs::remove(dir_ / artifact::fock_timeline(n0));
  }

  void fit() {
    const auto& ens = fock();
    GeneratorFitOptions o;
    o.fit_window = cfg_.fit.window;
    o.mode = cfg_.fit.mode;
    o.variance_floor = cfg_.fit.variance_floor;
    o.max_iterations = cfg_.fit.max_iterations;
    fit_ = fit_generator(ens, o);
    const double kappa = cfg_.cavity.kappa;
    write(artifact::fit_matrix, io::fit_matrix_table(*fit_, kappa, meta(artifact::fit_matrix)));
    write(artifact::fit_initial, io::fit_initial_table(*fit_, meta(artifact::fit_initial)));
    std::string report = "# config_hash=" + hash_ + " seed=" + std::to_string(cfg_.run.seed) + "\n";
    report += "# rates in units of kappa = " + format_double(kappa) + " 1/s\n";
    report += io::fit_report(*fit_, kappa);
    const LinearFit law = diagonal_law(fit_->k_hat, kappa, fit_->k_hat.n_max() - 1);
    std::ostringstream extra;
    extra << "\ndiagonal law over n = 0.." << fit_->k_hat.n_max() - 1 << ": -K_nn/kappa = "
          << format_double(law.slope) << " n + " << format_double(law.intercept) << '\n';
    write(artifact::fit_report, report + extra.str());
    for (const auto& s : fit_->stages)
      if (!s.converged) summary_.notes.push_back("fit stage " + std::to_string(s.stage) + " did not converge: " + s.message);
  }

  void predict() {
    const FitResult& f = fitted();
    const std::vector<double> grid = uniform_grid(cfg_.predict_horizon, cfg_.reconstruct.grid_step);
    const auto curves = predict_curves(f, grid);
    for (const auto& [n0, tl] : curves) {
      io::Metadata m = meta(artifact::prediction(n0));
      m.emplace_back("n0", std::to_string(n0));
      write(artifact::prediction(n0), io::timeline_table(tl, m));
    }
    // held-out comparison when the reconstructed curves are available
    std::optional<std::map<int, DistributionTimeline>> data;
    try {
      data = fock();
    } catch (const StageError&) {
      summary_.notes.push_back("predict: no reconstructed Fock timelines to compare against");
      return;
    }
    io::Table t;
    t.meta = meta(artifact::prediction_error);
    t.meta.emplace_back("fit_window_s", format_double(cfg_.fit.window));
    t.meta.emplace_back("min_realizations", std::to_string(cfg_.reconstruct.min_realizations));
    t.columns = {"n0", "max_abs_error", "at_time_s", "at_n", "points"};
    for (const auto& [n0, pred] : curves) {
      const auto it = data->find(n0);
      if (it == data->end()) continue;
      const PredictionError e = compare(n0, pred, it->second);
      t.rows.push_back({static_cast<double>(n0), e.max_abs_error, e.at_time, static_cast<double>(e.at_n),
                        static_cast<double>(e.points)});
    }
    write(artifact::prediction_error, t);
  }

  PredictionError compare(int n0, const DistributionTimeline& pred, const DistributionTimeline& data) const {
    PredictionError e;
    e.n0 = n0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double t = data.grid[i];
      if (t <= cfg_.fit.window * (1.0 + 1e-12) || t > cfg_.predict_horizon * (1.0 + 1e-12)) continue;
      if (data.realization_count[i] < cfg_.reconstruct.min_realizations) continue;
      const std::size_t j = nearest(pred.grid, t);
      if (std::abs(pred.grid[j] - t) > 1e-9) continue;
      ++e.points;
      for (Eigen::Index n = 0; n < data.table.cols(); ++n) {
        const double err = std::abs(pred.table(static_cast<Eigen::Index>(j), n) - data.table(static_cast<Eigen::Index>(i), n));
        if (err > e.max_abs_error) {
          e.max_abs_error = err;
          e.at_time = t;
          e.at_n = static_cast<int>(n);
        }
      }
    }
    return e;
  }

  void report() {
    if (!fs::exists(dir_ / artifact::spin_peaks)) histogram();
    std::ostringstream out;
    out << "# config_hash=" << hash_ << " seed=" << cfg_.run.seed << '\n';
    const double kappa = cfg_.cavity.kappa;

    if (fs::exists(dir_ / artifact::coherent_fit)) {
      const io::Table t = load_table(artifact::coherent_fit, "reconstruct");
      out << "coherent.time_constant_s " << *t.find_meta("time_constant_s") << '\n';
      out << "coherent.offset " << *t.find_meta("offset") << '\n';
      for (const auto& row : t.rows)
        out << "coherent.poisson_tv t=" << format_double(row[0]) << ' ' << format_double(row[3]) << '\n';
    }
    if (fs::exists(dir_ / artifact::coherent_bootstrap)) {
      const io::Table t = load_table(artifact::coherent_bootstrap, "reconstruct");
      out << "coherent.bootstrap replicates=" << *t.find_meta("replicates")
          << " time_constant_se_s=" << *t.find_meta("time_constant_se_s") << " offset_se=" << *t.find_meta("offset_se")
          << '\n';
    }
    {
      const io::Table t = load_table(artifact::spin_peaks, "histogram");
      out << "histogram.peaks " << t.rows.size() << '\n';
      for (const auto& row : t.rows)
        out << "histogram.peak angle_rad=" << format_double(row[4]) << " radius=" << format_double(row[3])
            << " nearest_n=" << static_cast<int>(row[6]) << '\n';
    }
    if (fs::exists(dir_ / artifact::fit_matrix) && fs::exists(dir_ / artifact::fit_initial)) {
      const FitResult& f = fitted();
      const int last = f.k_hat.n_max() - 1;
      const LinearFit law = diagonal_law(f.k_hat, kappa, last);
      out << "fit.diagonal_slope " << format_double(law.slope) << '\n';
      out << "fit.diagonal_intercept " << format_double(law.intercept) << '\n';
      for (const auto& l : fock_lifetimes(f.k_hat))
        out << "fit.lifetime_s n=" << l.n << ' ' << (l.finite ? format_double(l.lifetime) : std::string("inf")) << '\n';
      double offband = 0.0;
      for (int r = 0; r < f.k_hat.size(); ++r)
        for (int c = 0; c < f.k_hat.size(); ++c)
          if (std::abs(r - c) >= 2) offband = std::max(offband, std::abs(f.k_hat(r, c)) / kappa);
      out << "fit.max_offband_per_kappa " << format_double(offband) << '\n';
      for (int n = 0; n + 1 < f.k_hat.size(); ++n)
        out << "fit.upward_per_kappa n=" << n << ' ' << format_double(f.k_hat(n + 1, n) / kappa) << '\n';
    }
    if (fs::exists(dir_ / artifact::prediction_error)) {
      const io::Table t = load_table(artifact::prediction_error, "predict");
      for (const auto& row : t.rows)
        out << "predict.max_abs_error n0=" << static_cast<int>(row[0]) << ' ' << format_double(row[1]) << '\n';
    }
    write(artifact::summary, out.str());
  }

  const PipelineConfig& cfg_;
  fs::path dir_;
  ProbeModel probe_;
  std::string hash_;
  Stage stage_ = Stage::simulate;
  PipelineSummary summary_;

  std::optional<std::vector<SequenceRecord>> seqs_;
  std::optional<DistributionTimeline> coherent_;
  std::optional<ExpFit> expfit_;
  std::optional<std::vector<FockSelectionEvent>> events_;
  std::optional<std::map<int, DistributionTimeline>> fock_;
  std::optional<FitResult> fit_;
};

}  // namespace

PipelineSummary run_pipeline(const PipelineConfig& config, const std::set<Stage>& stages) {
  if (stages.empty()) throw InvalidInput("run_pipeline: no stages requested");
  try {
    config.validate();
  } catch (const InvalidInput& e) {
    throw StageError(*stages.begin(), "config", e.what());
  }
  return Runner(config).run(stages);
}

}  // namespace qndtomo
