#include "qndtomo/io.hpp"

#include "qndtomo/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace qndtomo::io {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

// "# key=value key=value" -> pairs; a token without '=' is kept with an empty value
void parse_meta_line(const std::string& body, Metadata& meta) {
  std::istringstream in(body);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos)
      meta.emplace_back(token, "");
    else
      meta.emplace_back(token.substr(0, eq), token.substr(eq + 1));
  }
}

void write_meta(std::ostream& out, const Metadata& meta) {
  for (const auto& [key, value] : meta) out << "# " << key << '=' << value << '\n';
}

std::vector<std::string> distribution_columns(int dim) {
  std::vector<std::string> cols;
  for (int n = 0; n < dim; ++n) cols.push_back("P" + std::to_string(n));
  return cols;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw InvalidInput("not a number: '" + text + "'");
  return v;
}

std::int64_t parse_int(const std::string& text) {
  const std::string t = trim(text);
  std::int64_t v = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw InvalidInput("not an integer: '" + text + "'");
  return v;
}

std::size_t Table::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw InvalidInput("table has no column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

const std::string* Table::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void write_table(std::ostream& out, const Table& table) {
  write_meta(out, table.meta);
  for (std::size_t c = 0; c < table.columns.size(); ++c) out << (c ? "," : "") << table.columns[c];
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << format_double(row[c]);
    out << '\n';
  }
}

Table read_table(std::istream& in) {
  Table table;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      parse_meta_line(t.substr(1), table.meta);
      continue;
    }
    const auto fields = split(t, ',');
    if (!have_header) {
      table.columns = fields;
      have_header = true;
      continue;
    }
    if (fields.size() != table.columns.size())
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(table.columns.size()) +
                           " fields, found " + std::to_string(fields.size()),
                       line_no);
    std::vector<double> row;
    row.reserve(fields.size());
    for (std::size_t c = 0; c < fields.size(); ++c) {
      try {
        row.push_back(parse_double(fields[c]));
      } catch (const InvalidInput& e) {
        throw ParseError("line " + std::to_string(line_no) + ", column " + table.columns[c] + ": " + e.what(), line_no);
      }
    }
    table.rows.push_back(std::move(row));
    table.row_lines.push_back(line_no);
  }
  if (!have_header && !table.meta.empty()) throw ParseError("missing header row", line_no);
  return table;
}

std::string to_string(const Table& table) {
  std::ostringstream out;
  write_table(out, table);
  return out.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw InvalidInput("write to '" + path.string() + "' failed");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---------------------------------------------------------------------------
// sequences

void write_sequences(std::ostream& out, const std::vector<SequenceRecord>& seqs, const Metadata& meta) {
  write_meta(out, meta);
  out << "sequence_id,time_s,phase_index,outcome,truth_n\n";
  for (const SequenceRecord& s : seqs) {
    if (s.truth) {
      out << "#truth " << s.id << ' ' << s.truth->initial_n;
      for (const Jump& j : s.truth->events) out << ' ' << format_double(j.time) << ':' << j.new_n;
      out << '\n';
    }
    for (const DetectionEvent& e : s.detections) {
      out << s.id << ',' << format_double(e.time) << ',' << e.phase_index << ',' << e.outcome << ',';
      if (s.truth) out << s.truth->photon_number_at(e.time);
      out << '\n';
    }
  }
}

SequenceFile read_sequences(std::istream& in, int phase_count) {
  SequenceFile file;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::unordered_set<std::int64_t> finished;
  std::map<std::int64_t, JumpPath> pending_truth;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError("line " + std::to_string(line_no) + ": " + msg, line_no);
  };

  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.rfind("#truth", 0) == 0) {
      std::istringstream ts(t.substr(6));
      std::string id_text, init_text, token;
      if (!(ts >> id_text >> init_text)) throw fail("#truth needs a sequence id and an initial photon number");
      JumpPath path;
      std::int64_t id = 0;
      try {
        id = parse_int(id_text);
        path.initial_n = static_cast<int>(parse_int(init_text));
        while (ts >> token) {
          const auto colon = token.find(':');
          if (colon == std::string::npos) throw InvalidInput("jump '" + token + "' is not <time>:<n>");
          path.events.push_back({parse_double(token.substr(0, colon)), static_cast<int>(parse_int(token.substr(colon + 1)))});
        }
        path.validate(std::numeric_limits<int>::max() - 1);
      } catch (const InvalidInput& e) {
        throw fail(std::string("#truth: ") + e.what());
      }
      if (finished.count(id) || (!file.records.empty() && file.records.back().id == id))
        throw fail("#truth for sequence " + std::to_string(id) + " must precede its detections");
      if (!pending_truth.emplace(id, std::move(path)).second)
        throw fail("duplicate #truth for sequence " + std::to_string(id));
      continue;
    }
    if (t[0] == '#') {
      parse_meta_line(t.substr(1), file.meta);
      continue;
    }
    const auto fields = split(t, ',');
    if (!have_header) {
      if (fields.size() < 4 || fields[0] != "sequence_id" || fields[1] != "time_s" || fields[2] != "phase_index" ||
          fields[3] != "outcome")
        throw fail("expected header 'sequence_id,time_s,phase_index,outcome[,truth_n]'");
      if (fields.size() > 5 || (fields.size() == 5 && fields[4] != "truth_n")) throw fail("unexpected columns in header");
      have_header = true;
      continue;
    }
    if (fields.size() != 4 && fields.size() != 5) throw fail("expected 4 or 5 fields, found " + std::to_string(fields.size()));

    std::int64_t id = 0;
    DetectionEvent e{};
    std::string field_name = "sequence_id";
    std::int64_t truth_n = -1;
    try {
      id = parse_int(fields[0]);
      field_name = "time_s";
      e.time = parse_double(fields[1]);
      field_name = "phase_index";
      e.phase_index = static_cast<int>(parse_int(fields[2]));
      field_name = "outcome";
      e.outcome = static_cast<int>(parse_int(fields[3]));
      field_name = "truth_n";
      if (fields.size() == 5 && !fields[4].empty()) truth_n = parse_int(fields[4]);
    } catch (const InvalidInput& ex) {
      throw fail("field " + field_name + ": " + ex.what());
    }
    if (!std::isfinite(e.time)) throw fail("field time_s: not finite");
    if (e.outcome != 0 && e.outcome != 1) throw fail("field outcome: must be 0 or 1");
    if (e.phase_index < 0 || (phase_count > 0 && e.phase_index >= phase_count))
      throw fail("field phase_index: " + std::to_string(e.phase_index) + " out of range");

    if (file.records.empty() || file.records.back().id != id) {
      if (finished.count(id)) throw fail("rows of sequence " + std::to_string(id) + " are not contiguous");
      if (!file.records.empty()) finished.insert(file.records.back().id);
      SequenceRecord rec;
      rec.id = id;
      if (auto it = pending_truth.find(id); it != pending_truth.end()) {
        rec.truth = std::move(it->second);
        pending_truth.erase(it);
      }
      file.records.push_back(std::move(rec));
    }
    SequenceRecord& rec = file.records.back();
    if (!rec.detections.empty() && !(e.time > rec.detections.back().time))
      throw fail("sequence " + std::to_string(id) + ": time " + fields[1] + " does not increase (record " +
                 std::to_string(rec.detections.size()) + ")");
    if (truth_n >= 0 && rec.truth && rec.truth->photon_number_at(e.time) != truth_n)
      throw fail("sequence " + std::to_string(id) + ": truth_n disagrees with the #truth path");
    rec.detections.push_back(e);
  }
  // truth paths of sequences without detections
  for (auto& [id, path] : pending_truth) {
    if (finished.count(id) || (!file.records.empty() && file.records.back().id == id))
      throw ParseError("#truth for sequence " + std::to_string(id) + " appears after its detections", line_no);
    SequenceRecord rec;
    rec.id = id;
    rec.truth = std::move(path);
    file.records.push_back(std::move(rec));
  }
  return file;
}

SequenceFile ingest_sequences(const std::filesystem::path& path, int phase_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path.string() + "'");
  return read_sequences(in, phase_count);
}

// ---------------------------------------------------------------------------
// derived artifacts

Table timeline_table(const DistributionTimeline& tl, const Metadata& meta) {
  Table t;
  t.meta = meta;
  const int dim = static_cast<int>(tl.table.cols());
  t.columns.push_back("time_s");
  for (auto& c : distribution_columns(dim)) t.columns.push_back(c);
  t.columns.push_back("realization_count");
  for (std::size_t i = 0; i < tl.size(); ++i) {
    std::vector<double> row{tl.grid[i]};
    for (int n = 0; n < dim; ++n) row.push_back(tl.table(static_cast<Eigen::Index>(i), n));
    row.push_back(tl.realization_count[i]);
    t.rows.push_back(std::move(row));
  }
  return t;
}

DistributionTimeline timeline_from_table(const Table& table) {
  if (table.columns.size() < 4 || table.columns.front() != "time_s" || table.columns.back() != "realization_count")
    throw InvalidInput("timeline table needs columns time_s, P0.., realization_count");
  const int dim = static_cast<int>(table.columns.size()) - 2;
  for (int n = 0; n < dim; ++n)
    if (table.columns[static_cast<std::size_t>(n) + 1] != "P" + std::to_string(n))
      throw InvalidInput("timeline table: column " + std::to_string(n + 1) + " should be P" + std::to_string(n));
  DistributionTimeline tl;
  tl.table = Matrix(static_cast<Eigen::Index>(table.rows.size()), dim);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::size_t line = i < table.row_lines.size() ? table.row_lines[i] : 0;
    if (!tl.grid.empty() && !(row[0] > tl.grid.back()))
      throw ParseError("line " + std::to_string(line) + ": time_s not strictly increasing", line);
    tl.grid.push_back(row[0]);
    for (int n = 0; n < dim; ++n) tl.table(static_cast<Eigen::Index>(i), n) = row[static_cast<std::size_t>(n) + 1];
    tl.realization_count.push_back(static_cast<int>(row.back()));
  }
  return tl;
}

Table posterior_table(const std::vector<PosteriorTimeline>& timelines, int stride, const Metadata& meta) {
  if (stride < 1) throw InvalidInput("posterior_table: stride must be >= 1");
  Table t;
  t.meta = meta;
  t.columns = {"sequence_id", "time_s"};
  int dim = 0;
  for (const auto& tl : timelines)
    if (!tl.points.empty()) {
      dim = tl.points.front().posterior.size();
      break;
    }
  for (auto& c : distribution_columns(dim)) t.columns.push_back(c);
  for (const auto& tl : timelines) {
    const std::size_t count = tl.points.size();
    for (std::size_t i = 0; i < count; ++i) {
      if (i % static_cast<std::size_t>(stride) != 0 && i + 1 != count) continue;
      std::vector<double> row{static_cast<double>(tl.sequence_id), tl.points[i].time};
      for (int n = 0; n < dim; ++n) row.push_back(tl.points[i].posterior[n]);
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

Table events_table(const std::vector<FockSelectionEvent>& events, const Metadata& meta) {
  Table t;
  t.meta = meta;
  t.columns = {"sequence_id", "t0_s", "n0", "posterior_peak"};
  for (const auto& e : events)
    t.rows.push_back({static_cast<double>(e.sequence_id), e.t0, static_cast<double>(e.n0), e.posterior_peak});
  return t;
}

std::vector<FockSelectionEvent> events_from_table(const Table& table) {
  const std::size_t id = table.column("sequence_id"), t0 = table.column("t0_s"), n0 = table.column("n0"),
                    peak = table.column("posterior_peak");
  std::vector<FockSelectionEvent> out;
  for (const auto& row : table.rows)
    out.push_back({static_cast<std::int64_t>(row[id]), row[t0], static_cast<int>(row[n0]), row[peak]});
  return out;
}

Table fit_matrix_table(const FitResult& fit, double kappa, const Metadata& meta) {
  Table t;
  t.meta = meta;
  t.meta.emplace_back("kappa_per_s", format_double(kappa));
  t.meta.emplace_back("mode", fit.mode == ConstraintMode::constrained ? "constrained" : "relaxed");
  t.columns = {"to", "from", "k_per_s", "k_per_kappa", "stderr_per_s"};
  const int dim = fit.k_hat.size();
  for (int to = 0; to < dim; ++to)
    for (int from = 0; from < dim; ++from) {
      const double se = fit.k_stderr.size() ? fit.k_stderr(to, from) : 0.0;
      t.rows.push_back({static_cast<double>(to), static_cast<double>(from), fit.k_hat(to, from),
                        fit.k_hat(to, from) / kappa, se});
    }
  return t;
}

Table fit_initial_table(const FitResult& fit, const Metadata& meta) {
  Table t;
  t.meta = meta;
  const int dim = fit.k_hat.size();
  t.columns = {"n0"};
  for (auto& c : distribution_columns(dim)) t.columns.push_back(c);
  for (const auto& [n0, p] : fit.initial_dists) {
    std::vector<double> row{static_cast<double>(n0)};
    for (int n = 0; n < dim; ++n) row.push_back(p[n]);
    t.rows.push_back(std::move(row));
  }
  return t;
}

FitResult fit_from_tables(const Table& matrix, const Table& initial) {
  const std::size_t to_c = matrix.column("to"), from_c = matrix.column("from"), k_c = matrix.column("k_per_s"),
                    se_c = matrix.column("stderr_per_s");
  int dim = 0;
  for (const auto& row : matrix.rows) dim = std::max(dim, static_cast<int>(std::max(row[to_c], row[from_c])) + 1);
  if (dim < 2) throw InvalidInput("fit matrix table is empty");
  Matrix k = Matrix::Constant(dim, dim, std::numeric_limits<double>::quiet_NaN());
  Matrix se = Matrix::Zero(dim, dim);
  for (const auto& row : matrix.rows) {
    const int to = static_cast<int>(row[to_c]), from = static_cast<int>(row[from_c]);
    if (to < 0 || from < 0) throw InvalidInput("fit matrix table: negative index");
    k(to, from) = row[k_c];
    se(to, from) = row[se_c];
  }
  if (k.hasNaN()) throw InvalidInput("fit matrix table does not cover every entry");
  bool negative = false;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      if (i != j && k(i, j) < 0.0) negative = true;
  FitResult fit;
  // the diagonal is re-derived so the column sums are exact after the text round trip
  for (int c = 0; c < dim; ++c) {
    k(c, c) = 0.0;
    k(c, c) = -k.col(c).sum();
  }
  fit.k_hat = negative ? GeneratorMatrix::relaxed(k) : GeneratorMatrix(k);
  fit.k_stderr = se;
  const std::string* mode = matrix.find_meta("mode");
  fit.mode = (mode && *mode == "relaxed") ? ConstraintMode::relaxed : ConstraintMode::constrained;
  if (initial.columns.size() != static_cast<std::size_t>(dim) + 1)
    throw InvalidInput("fit initial table: expected n0 and P0..P" + std::to_string(dim - 1));
  for (const auto& row : initial.rows) {
    Vector p(dim);
    for (int n = 0; n < dim; ++n) p[n] = row[static_cast<std::size_t>(n) + 1];
    fit.initial_dists.emplace(static_cast<int>(row[0]), PhotonDistribution(p));
  }
  return fit;
}

std::string fit_report(const FitResult& fit, double kappa) {
  std::ostringstream out;
  out << std::fixed;
  const int dim = fit.k_hat.size();
  out << "mode " << (fit.mode == ConstraintMode::constrained ? "constrained" : "relaxed") << '\n';
  out << "fit window " << std::setprecision(4) << fit.fit_window << " s\n";
  out << "stage-1 seeds: kappa " << std::setprecision(4) << fit.kappa_seed << " 1/s, n_b " << fit.n_b_seed << '\n';
  out << "weighted residual " << std::setprecision(6) << fit.residual << " (dof " << fit.degrees_of_freedom << ")\n";
  out << "\nstage  params  residuals  cost  iterations  converged  message\n";
  for (const auto& s : fit.stages)
    out << s.stage << "  " << s.parameters << "  " << s.residuals << "  " << std::setprecision(6) << s.cost << "  "
        << s.iterations << "  " << (s.converged ? "yes" : "NO") << "  " << s.message << '\n';
  auto dump = [&](const char* title, const Matrix& m, double scale) {
    out << '\n' << title << '\n';
    for (int r = 0; r < dim; ++r) {
      for (int c = 0; c < dim; ++c) out << std::setw(10) << std::setprecision(4) << m(r, c) / scale;
      out << '\n';
    }
  };
  dump("K_hat / kappa (row = to, column = from)", fit.k_hat.matrix(), kappa);
  if (fit.k_stderr.size()) dump("standard error / kappa", fit.k_stderr, kappa);
  out << "\nn  lifetime_s  -K_nn/kappa\n";
  for (const auto& l : fock_lifetimes(fit.k_hat))
    out << l.n << "  " << (l.finite ? format_double(l.lifetime) : std::string("inf")) << "  " << std::setprecision(4)
        << -fit.k_hat(l.n, l.n) / kappa << '\n';
  if (!fit.active_constraints.empty()) {
    out << "\nactive nonnegativity constraints (to,from):";
    for (const auto& [to, from] : fit.active_constraints) out << " (" << to << ',' << from << ')';
    out << '\n';
  }
  if (!fit.all_stages_converged()) {
    out << "\nWARNING: non-converged stages:";
    for (const auto& s : fit.stages)
      if (!s.converged) out << ' ' << s.stage;
    out << '\n';
  }
  return out.str();
}

Table histogram_table(const SpinHistogram& hist, const Metadata& meta) {
  Table t;
  t.meta = meta;
  t.meta.emplace_back("samples", std::to_string(hist.total()));
  t.meta.emplace_back("outside", std::to_string(hist.outside()));
  t.columns = {"x", "y", "count"};
  for (int iy = 0; iy < hist.bins(); ++iy)
    for (int ix = 0; ix < hist.bins(); ++ix)
      t.rows.push_back({hist.center(ix), hist.center(iy), static_cast<double>(hist.count(ix, iy))});
  return t;
}

Table peaks_table(const std::vector<HistogramPeak>& peaks, const ProbeModel& probe, const Metadata& meta) {
  Table t;
  t.meta = meta;
  t.columns = {"rank", "x", "y", "radius", "angle_rad", "height", "nearest_n"};
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    const HistogramPeak& p = peaks[i];
    const int nearest = classify_spin(SpinSample{p.x, p.y, 0.0, 0}, probe, 0.0);
    t.rows.push_back({static_cast<double>(i), p.x, p.y, p.radius, p.angle, p.height, static_cast<double>(nearest)});
  }
  return t;
}

}  // namespace qndtomo::io
