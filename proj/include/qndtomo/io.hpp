#pragma once

// Text file formats. Every file opens with '#' comment lines carrying key=value
// metadata (at least config_hash and seed), followed by a comma-separated header row
// and data rows. Doubles are written in shortest round-trip form.

#include "qndtomo/bayesfilter.hpp"
#include "qndtomo/ensemble.hpp"
#include "qndtomo/estimation.hpp"
#include "qndtomo/spinhist.hpp"
#include "qndtomo/trajsim.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace qndtomo::io {

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double v);
/// Strict parse of a whole field; throws InvalidInput naming the text on failure.
double parse_double(const std::string& text);
std::int64_t parse_int(const std::string& text);

using Metadata = std::vector<std::pair<std::string, std::string>>;

/// A generic self-describing numeric table.
struct Table {
  Metadata meta;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> row_lines;  ///< 1-based source line of each row (reading only)

  std::size_t column(const std::string& name) const;  ///< throws InvalidInput when absent
  const std::string* find_meta(const std::string& key) const;
};

void write_table(std::ostream& out, const Table& table);
/// Throws ParseError with the line number on malformed content.
Table read_table(std::istream& in);

void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// sequences

/// Rows "sequence_id,time_s,phase_index,outcome,truth_n". Ground-truth paths, when
/// present, are stored exactly on "#truth <id> <initial_n> <t>:<n> ..." lines placed
/// before the sequence's rows; truth_n is then the path value at the detection time
/// and is left empty otherwise.
void write_sequences(std::ostream& out, const std::vector<SequenceRecord>& seqs, const Metadata& meta);

struct SequenceFile {
  Metadata meta;
  std::vector<SequenceRecord> records;
};

/// Parses the format above. Sequences appear in order of first appearance and must be
/// contiguous. Validates strictly increasing times, outcome bits, phase indices (against
/// `phase_count` when positive) and agreement of truth_n with the #truth path.
SequenceFile read_sequences(std::istream& in, int phase_count = 0);
SequenceFile ingest_sequences(const std::filesystem::path& path, int phase_count = 0);

// ---------------------------------------------------------------------------
// derived artifacts

/// Columns time_s, P0..P<n_max>, realization_count.
Table timeline_table(const DistributionTimeline& tl, const Metadata& meta);
DistributionTimeline timeline_from_table(const Table& table);

/// Columns sequence_id, time_s, P0..P<n_max>, keeping every `stride`-th point of each
/// timeline (and always the last one).
Table posterior_table(const std::vector<PosteriorTimeline>& timelines, int stride, const Metadata& meta);

Table events_table(const std::vector<FockSelectionEvent>& events, const Metadata& meta);
std::vector<FockSelectionEvent> events_from_table(const Table& table);

/// Long format: to, from, k_per_s, k_per_kappa, stderr_per_s. The diagonal is included.
Table fit_matrix_table(const FitResult& fit, double kappa, const Metadata& meta);
/// Columns n0, P0..P<n_max>.
Table fit_initial_table(const FitResult& fit, const Metadata& meta);
/// Rebuilds K_hat (relaxed when an off-diagonal is negative), standard errors and initial
/// distributions. Stage logs are not restored.
FitResult fit_from_tables(const Table& matrix, const Table& initial);

/// Plain-text fit report: stage log, matrix in units of kappa, lifetimes, uncertainties.
std::string fit_report(const FitResult& fit, double kappa);

/// Columns x, y, count over every bin.
Table histogram_table(const SpinHistogram& hist, const Metadata& meta);
/// Columns rank, x, y, radius, angle_rad, height, nearest_n.
Table peaks_table(const std::vector<HistogramPeak>& peaks, const ProbeModel& probe, const Metadata& meta);

/// Renders a table to a string.
std::string to_string(const Table& table);

}  // namespace qndtomo::io
