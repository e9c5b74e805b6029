#pragma once

// Configuration and stage orchestration: simulate -> reconstruct -> filter -> histogram
// -> select -> fit -> predict -> report, with every artifact written to one directory.

#include "qndtomo/estimation.hpp"
#include "qndtomo/numkernel.hpp"
#include "qndtomo/trajsim.hpp"

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace qndtomo {

struct RunConfig {
  int sequences = 2000;
  double duration = 0.650;  ///< s
  double initial_mean = 4.4;
  std::uint64_t seed = 42;
  unsigned workers = 0;  ///< 0 = hardware concurrency; never affects outputs
};

struct ReconstructConfig {
  int atoms = 25;
  int iterations = 20;
  double grid_step = 0.002;  ///< s
  int min_realizations = 100;
  int bootstrap = 0;  ///< replicates of the bootstrap over sequences; 0 = off
};

struct SelectConfig {
  double threshold = 0.7;
  double dedup_window = 0.010;  ///< s
  double horizon = 0.400;       ///< s
};

struct FitConfig {
  double window = 0.020;  ///< s
  ConstraintMode mode = ConstraintMode::constrained;
  double variance_floor = 1e-3;
  int max_iterations = 400;
};

struct HistogramConfig {
  int window_atoms = 110;
  int stride = 1;           ///< atoms between window starts for the unconditioned histogram
  int atoms = 700;          ///< leading atoms per sequence entering the unconditioned histogram
  int bins = 64;
  double extent = 1.0;
  double smoothing = 1.0;   ///< Gaussian sigma, bins
  int neighborhood = 2;
  double min_fraction = 0.02;
  int select_n = 3;         ///< photon number conditioned on in the three-window protocol
  double min_radius = 0.35; ///< samples closer to the origin are not classified
};

struct OutputConfig {
  std::filesystem::path dir = "artifacts";
  int posterior_stride = 50;  ///< keep every k-th filter posterior in the posterior file
};

struct PipelineConfig {
  CavityParams cavity;
  ProbeModel probe;
  double phase_per_photon = 0.7853981633974483;  ///< Phi_0; used unless a table is given
  bool explicit_phase_table = false;
  RunConfig run;
  ReconstructConfig reconstruct;
  SelectConfig select;
  FitConfig fit;
  std::vector<double> snapshots = {0.0, 0.05, 0.10};  ///< s, coherent Poisson comparisons
  double predict_horizon = 0.400;  ///< s
  HistogramConfig histogram;
  OutputConfig output;

  /// Sets one key (e.g. "cavity.n_b"). Throws InvalidInput on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Reads "key = value" lines; '#' starts a comment. Errors carry the line number.
  void load(const std::string& text);
  void validate() const;
  /// Canonical key=value text of every setting, one per line.
  std::string to_text() const;
  /// FNV-1a of the canonical text, excluding settings that cannot change outputs
  /// (worker count and output directory). 16 hex digits.
  std::string hash() const;

  static std::vector<std::string> keys();
};

enum class Stage { simulate, reconstruct, filter, histogram, select, fit, predict, report };

const char* to_string(Stage stage);
/// Accepts stage names and "all". Throws InvalidInput on unknown names.
std::set<Stage> parse_stages(const std::vector<std::string>& names);

/// A stage could not run: missing input, unreadable file or numerical failure.
class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, std::string kind, const std::string& what)
      : std::runtime_error(what), stage_(stage), kind_(std::move(kind)) {}
  Stage stage() const noexcept { return stage_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  Stage stage_;
  std::string kind_;
};

struct PipelineSummary {
  std::vector<std::string> written;  ///< file names relative to the artifact directory
  std::vector<std::string> notes;    ///< one line per noteworthy outcome
};

/// Artifact file names.
namespace artifact {
inline constexpr const char* config = "config.txt";
inline constexpr const char* sequences = "sequences.csv";
inline constexpr const char* coherent_timeline = "coherent_timeline.csv";
inline constexpr const char* coherent_fit = "coherent_fit.csv";
inline constexpr const char* coherent_bootstrap = "coherent_bootstrap.csv";
inline constexpr const char* posteriors = "posteriors.csv";
inline constexpr const char* spin_histogram = "spin_histogram.csv";
inline constexpr const char* spin_peaks = "spin_peaks.csv";
inline constexpr const char* spin_conditioned = "spin_conditioned.csv";
inline constexpr const char* spin_postselected = "spin_postselected.csv";
inline constexpr const char* events = "events.csv";
inline constexpr const char* fit_matrix = "fit_matrix.csv";
inline constexpr const char* fit_initial = "fit_initial.csv";
inline constexpr const char* fit_report = "fit_report.txt";
inline constexpr const char* prediction_error = "prediction_error.csv";
inline constexpr const char* summary = "summary.txt";
std::string fock_timeline(int n0);
std::string prediction(int n0);
}  // namespace artifact

/// Runs the requested stages in pipeline order. Inputs of a stage come from stages run
/// in the same call or from files already present in the artifact directory.
PipelineSummary run_pipeline(const PipelineConfig& config, const std::set<Stage>& stages);

}  // namespace qndtomo
