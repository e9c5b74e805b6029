// qndtomo: command-line driver for the simulation and reconstruction pipeline.
//
//   qndtomo all --out runs/a --seed 7
//   qndtomo fit --config my.cfg --set fit.mode=relaxed
//
// Failures print one line to stderr:
//   error stage=<name> kind=<kind> message="<text>"
// and exit with 2 (usage or configuration) or 3 (a stage failed).

#include "qndtomo/error.hpp"
#include "qndtomo/io.hpp"
#include "qndtomo/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out + "\"";
}

int fail(const std::string& stage, const std::string& kind, const std::string& message, int code) {
  std::cerr << "error stage=" << stage << " kind=" << kind << " message=" << quoted(message) << '\n';
  return code;
}

struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> sequences;
  std::optional<unsigned> workers;
  std::optional<std::string> mode;
  std::optional<int> bootstrap;
  bool quiet = false;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("-c,--config", o.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  sub->add_option("-s,--set", o.sets, "override one setting, key=value (repeatable)");
  sub->add_option("-o,--out", o.out, "artifact directory");
  sub->add_option("--seed", o.seed, "master seed");
  sub->add_option("-n,--sequences", o.sequences, "number of simulated sequences");
  sub->add_option("-j,--workers", o.workers, "worker threads (0 = all cores)");
  sub->add_option("--mode", o.mode, "generator fit mode")->check(CLI::IsMember({"constrained", "relaxed"}));
  sub->add_option("--bootstrap", o.bootstrap, "bootstrap replicates over sequences for the coherent timeline (0 = off)");
  sub->add_flag("-q,--quiet", o.quiet, "print nothing on success");
}

qndtomo::PipelineConfig build_config(const Overrides& o) {
  qndtomo::PipelineConfig cfg;
  if (!o.config_file.empty()) cfg.load(qndtomo::io::read_file(o.config_file));
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw qndtomo::InvalidInput("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.out) cfg.set("output.dir", *o.out);
  if (o.seed) cfg.set("run.seed", std::to_string(*o.seed));
  if (o.sequences) cfg.set("run.sequences", std::to_string(*o.sequences));
  if (o.workers) cfg.set("run.workers", std::to_string(*o.workers));
  if (o.mode) cfg.set("fit.mode", *o.mode);
  if (o.bootstrap) cfg.set("reconstruct.bootstrap", std::to_string(*o.bootstrap));
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photon-number tomography of a decaying cavity field from simulated QND probe data"};
  app.require_subcommand(1);
  Overrides o;

  const std::vector<std::pair<std::string, std::string>> stage_commands = {
      {"simulate", "synthesize detection sequences"},
      {"reconstruct", "ensemble reconstruction of the coherent-state decay"},
      {"filter", "per-sequence Bayesian filtering and Fock-state selection events"},
      {"histogram", "transverse spin histograms (unconditioned, conditioned, post-selected)"},
      {"select", "Fock-selected ensembles and their reconstructed timelines"},
      {"fit", "staged fit of the rate matrix"},
      {"predict", "long-horizon prediction from the fitted rates"},
      {"report", "plain-text summary of all available results"},
      {"all", "every stage in order"},
  };
  std::vector<std::pair<CLI::App*, std::string>> subs;
  for (const auto& [name, help] : stage_commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, o);
    subs.emplace_back(sub, name);
  }
  CLI::App* show = app.add_subcommand("config", "print the effective configuration and its hash");
  add_common(show, o);
  bool list_keys = false;
  show->add_flag("--keys", list_keys, "list the accepted keys only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("none", "usage", e.what(), 2);
  }

  qndtomo::PipelineConfig cfg;
  try {
    cfg = build_config(o);
  } catch (const qndtomo::ParseError& e) {
    return fail("none", "config", e.what(), 2);
  } catch (const qndtomo::InvalidInput& e) {
    return fail("none", "config", e.what(), 2);
  }

  if (show->parsed()) {
    if (list_keys) {
      for (const auto& k : qndtomo::PipelineConfig::keys()) std::cout << k << '\n';
    } else {
      std::cout << "# config_hash=" << cfg.hash() << '\n' << cfg.to_text();
    }
    return 0;
  }

  std::string name;
  for (const auto& [sub, n] : subs)
    if (sub->parsed()) name = n;

  try {
    const auto stages = qndtomo::parse_stages({name});
    const qndtomo::PipelineSummary summary = qndtomo::run_pipeline(cfg, stages);
    if (!o.quiet) {
      for (const auto& f : summary.written) std::cout << "wrote " << (cfg.output.dir / f).string() << '\n';
      for (const auto& n : summary.notes) std::cout << "note " << n << '\n';
    }
  } catch (const qndtomo::StageError& e) {
    return fail(qndtomo::to_string(e.stage()), e.kind(), e.what(), 3);
  } catch (const std::exception& e) {
    return fail(name, "internal", e.what(), 3);
  }
  return 0;
}
