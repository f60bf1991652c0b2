#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attnbench/attnlens.hpp"
#include "attnbench/corpus.hpp"
#include "attnbench/errors.hpp"
#include "attnbench/experiment_spec.hpp"
#include "attnbench/grid.hpp"
#include "attnbench/promptkit.hpp"
#include "attnbench/report.hpp"

namespace attnbench::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  out.flush();
  if (!out) throw Error("cannot write " + path.string());
}

// SOURCE_DATE_EPOCH pins metadata timestamps for reproducible outputs.
std::function<std::string()> clock_from_env() {
  const char* epoch = std::getenv("SOURCE_DATE_EPOCH");
  if (!epoch || !*epoch) return {};
  const std::time_t t = static_cast<std::time_t>(std::stoll(epoch));
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  const std::string stamp = ss.str();
  return [stamp] { return stamp; };
}

struct OverrideFlags {
  std::string dataset, format, out, backend, sample_size;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* cmd, bool with_out) {
    cmd->add_option("--dataset", dataset, "Dataset JSONL (overrides the spec)");
    cmd->add_option("--format", format, "Dataset format: native or liu_ctxs");
    if (with_out) cmd->add_option("--out", out, "Result file (overrides the spec)");
    cmd->add_option("--backend", backend, "\"mock\" or an endpoint URL");
    cmd->add_option("--seed", seed, "Sampling and mock seed");
    cmd->add_option("--sample-size", sample_size, "Instances per cell, or \"all\"");
  }

  grid::Overrides get() const {
    grid::Overrides o;
    if (!dataset.empty()) o.dataset = dataset;
    if (!format.empty()) o.format = format;
    if (!out.empty()) o.out = out;
    if (!backend.empty()) o.backend = backend;
    if (!sample_size.empty()) o.sample_size = sample_size;
    o.seed = seed;
    return o;
  }
};

std::string percent(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v * 100.0;
  return ss.str();
}

int cmd_validate(const std::string& dataset, const std::string& format, bool keep_flagged,
                 std::optional<std::size_t> max_tokens, std::ostream& out) {
  corpus::IngestOptions io;
  io.contamination = keep_flagged ? corpus::ContaminationPolicy::keep : corpus::ContaminationPolicy::drop;
  io.max_tokens = max_tokens;
  const auto result = corpus::ingest(dataset, corpus::format_from_string(format), io);
  const auto& r = result.report;
  for (const auto& issue : r.issues) {
    out << "line " << issue.line << ": " << issue.instance_id << ": " << corpus::to_string(issue.kind);
    if (!issue.detail.empty()) out << ": " << issue.detail;
    out << "\n";
  }
  out << "records=" << r.records << " accepted=" << r.accepted << " flagged=" << r.flagged << " dropped=" << r.dropped
      << "\n";
  return r.clean() ? kOk : kFlagged;
}

int cmd_run(const std::string& spec_file, const grid::Overrides& overrides, bool resume,
            std::optional<std::size_t> stop_after, std::ostream& out) {
  const auto spec = grid::load_spec(spec_file, overrides);
  grid::RunOptions options;
  options.clock = clock_from_env();
  options.stop_after = stop_after;

  const bool exists = fs::exists(spec.output);
  if (resume && !exists) throw ResumeError("no result file to resume: " + spec.output.string());
  const auto outcome = exists ? grid::resume(spec.output, spec, options) : grid::run(spec, options);

  out << (exists ? "resumed " : "wrote ") << spec.output.string() << " (" << outcome.stats.executed
      << " new records, " << outcome.stats.backend_calls << " backend calls)\n";
  for (const auto& c : outcome.results.cells) {
    out << "  gold=" << c.key.gold_position << " segment=" << c.key.segment_key() << " accuracy=" << percent(c.accuracy)
        << " (" << c.n_correct << "/" << c.n_evaluated;
    if (c.n_failed) out << ", " << c.n_failed << " failed";
    out << ")" << (c.complete ? "" : " incomplete") << "\n";
  }
  if (!outcome.finished) {
    out << "stopped early; rerun to resume\n";
    return kFlagged;
  }
  return outcome.results.complete() ? kOk : kFlagged;
}

std::vector<report::Format> parse_formats(const std::string& list) {
  std::vector<report::Format> formats;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) formats.push_back(report::format_from_string(item));
  }
  if (formats.empty()) throw ReportError("no report format given");
  return formats;
}

int cmd_report(const std::string& results, const std::string& baseline, const std::string& formats,
               const std::string& out_prefix, const std::string& closed_book, const std::string& oracle,
               std::ostream& out) {
  auto heatmap = report::build_heatmap(grid::load_results(results), grid::load_results(baseline));
  if (!closed_book.empty()) heatmap.closed_book = report::reference_accuracy(grid::load_results(closed_book));
  if (!oracle.empty()) heatmap.oracle = report::reference_accuracy(grid::load_results(oracle));

  fs::path prefix = out_prefix.empty() ? fs::path(results).replace_extension("") : fs::path(out_prefix);
  for (const auto f : parse_formats(formats)) {
    fs::path path = prefix;
    path += report::extension(f);
    report::emit(heatmap, f, path);
    out << "wrote " << path.string() << "\n";
  }
  out << report::render_text(heatmap);
  return kOk;
}

attnlens::SegmentProfile profile_dir(const fs::path& dir, bool coarse) {
  if (!fs::is_directory(dir)) throw TraceError("not a directory: " + dir.string());
  const auto files = attnlens::list_traces(dir);
  if (files.empty()) throw TraceError("no .trace files in " + dir.string());
  std::vector<attnlens::SegmentProfile> profiles;
  for (const auto& f : files) {
    try {
      profiles.push_back(attnlens::trace_profile(attnlens::read_trace(f), coarse));
    } catch (const Error& e) {
      throw TraceError(f.filename().string() + ": " + e.what());
    }
  }
  return attnlens::aggregate(profiles);
}

int cmd_attn(const std::string& traces, const std::string& baseline, const std::string& out_prefix, bool coarse,
             std::ostream& out) {
  auto profile = profile_dir(traces, coarse);
  std::optional<attnlens::SegmentProfile> base;
  if (!baseline.empty()) {
    base = profile_dir(baseline, coarse);
    // Compare the segments both conditions have, e.g. no attention
    // instruction exists in the baseline.
    std::vector<std::string> common;
    for (const auto& name : profile.names) {
      if (std::find(base->names.begin(), base->names.end(), name) != base->names.end()) common.push_back(name);
    }
    profile = attnlens::select_segments(profile, common);
    base = attnlens::select_segments(*base, common);
  }

  const fs::path prefix = out_prefix.empty() ? fs::path(traces) / "profile" : fs::path(out_prefix);
  const auto with_ext = [&](const char* ext) {
    fs::path p = prefix;
    p += ext;
    return p;
  };
  write_text(with_ext(".csv"), report::render_profile_csv(profile, base ? &*base : nullptr));
  write_text(with_ext(".svg"), report::render_profile_svg(profile, "mean last-token attention per segment"));
  out << "wrote " << with_ext(".csv").string() << "\nwrote " << with_ext(".svg").string() << "\n";
  if (base) {
    const auto delta = attnlens::profile_delta(profile, *base);
    write_text(with_ext(".delta.svg"), report::render_profile_svg(delta, "attention change vs no instruction"));
    out << "wrote " << with_ext(".delta.svg").string() << "\n";
  }
  out << profile.example_count << " traces, " << profile.names.size() << " segments, " << profile.num_layers()
      << " layers\n";
  return kOk;
}

int cmd_prompts(const std::string& spec_file, const grid::Overrides& overrides, const std::string& instance,
                const std::string& out_dir, std::ostream& out) {
  const auto spec = grid::load_spec(spec_file, overrides);
  const auto prompts = grid::cell_prompts(spec, instance.empty() ? std::nullopt : std::optional<std::string>(instance));
  const fs::path dir = out_dir;
  fs::create_directories(dir);
  const std::string model = spec.probe_model.empty() ? grid::backend_id(spec) : spec.probe_model;

  std::string jobs;
  for (const auto& p : prompts) {
    const std::string stem = "g" + std::to_string(p.cell.gold_position) + "_" + p.cell.segment_key();
    auto layout = promptkit::layout_to_json(p.layout);
    layout["instance_id"] = p.instance_id;
    layout["cell"] = {{"gold_position", p.cell.gold_position}, {"segment", p.cell.segment_key()}};
    write_text(dir / (stem + ".txt"), p.layout.text);
    write_text(dir / (stem + ".layout.json"), layout.dump(2) + "\n");

    nlohmann::ordered_json job;
    job["model_id"] = model;
    job["layout"] = stem + ".layout.json";
    job["generation"] = {{"max_new_tokens", spec.generation.max_new_tokens},
                         {"temperature", spec.generation.temperature},
                         {"stop", spec.generation.stop_sequences}};
    job["trace"] = "traces/" + stem + ".trace";
    job["instance_id"] = p.instance_id;
    job["cell"] = layout["cell"];
    jobs += job.dump() + "\n";
  }
  write_text(dir / "jobs.jsonl", jobs);
  out << "wrote " << prompts.size() << " prompts for instance " << prompts.front().instance_id << " to "
      << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-instruction experiments for multi-document QA", "attnbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "attnbench 0.1.0");

  std::string dataset, format = "native";
  bool keep_flagged = false;
  std::optional<std::size_t> max_tokens;
  auto* validate = app.add_subcommand("validate", "Check a dataset for contamination and format errors");
  validate->add_option("--dataset", dataset, "Dataset JSONL, optionally gzipped")->required();
  validate->add_option("--format", format, "native or liu_ctxs");
  validate->add_flag("--keep-flagged", keep_flagged, "Count flagged instances as accepted");
  validate->add_option("--max-tokens", max_tokens, "Chunk documents before validating");

  std::string spec_file;
  OverrideFlags run_flags;
  bool resume = false;
  std::optional<std::size_t> stop_after;
  auto* run = app.add_subcommand("run", "Run or resume one experiment grid");
  run->add_option("--spec", spec_file, "Experiment spec (JSON)")->required();
  run_flags.add_to(run, true);
  run->add_flag("--resume", resume, "Require an existing result file and continue it");
  run->add_option("--stop-after", stop_after, "Stop after this many new records")->group("");

  std::string results, baseline, formats = "csv,svg", out_prefix, closed_book, oracle;
  auto* rep = app.add_subcommand("report", "Render an accuracy heatmap against a no-instruction baseline");
  rep->add_option("--results", results, "Result file of the instructed grid")->required();
  rep->add_option("--baseline", baseline, "Result file of the no-instruction run")->required();
  rep->add_option("--format", formats, "Comma-separated: csv, svg, text");
  rep->add_option("--out", out_prefix, "Output path without extension");
  rep->add_option("--closed-book", closed_book, "Closed-book result file (reference line)");
  rep->add_option("--oracle", oracle, "Oracle result file (reference line)");

  std::string traces, attn_baseline, attn_out;
  bool coarse = false;
  auto* attn = app.add_subcommand("attn", "Aggregate per-segment attention profiles from trace files");
  attn->add_option("--traces", traces, "Directory of .trace files")->required();
  attn->add_option("--baseline", attn_baseline, "Directory of no-instruction traces");
  attn->add_option("--out", attn_out, "Output path without extension");
  attn->add_flag("--coarse", coarse, "Merge all documents into one segment");

  std::string prompt_spec, prompt_out, instance;
  OverrideFlags prompt_flags;
  auto* prompts = app.add_subcommand("prompts", "Dump the prompts and layouts of every cell for one instance");
  prompts->add_option("--spec", prompt_spec, "Experiment spec (JSON)")->required();
  prompts->add_option("--out", prompt_out, "Output directory")->required();
  prompts->add_option("--instance", instance, "Instance id (default: first sampled)");
  prompt_flags.add_to(prompts, false);

  std::string template_out;
  auto* templates = app.add_subcommand("templates", "Write the built-in template set to a directory");
  templates->add_option("--out", template_out, "Output directory")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kFailure;
  }

  try {
    if (*validate) {
      if (!fs::exists(dataset)) {
        err << "usage error: dataset not found: " << dataset << "\n";
        return kFailure;
      }
      return cmd_validate(dataset, format, keep_flagged, max_tokens, out);
    }
    if (*run) return cmd_run(spec_file, run_flags.get(), resume, stop_after, out);
    if (*rep) return cmd_report(results, baseline, formats, out_prefix, closed_book, oracle, out);
    if (*attn) return cmd_attn(traces, attn_baseline, attn_out, coarse, out);
    if (*prompts) return cmd_prompts(prompt_spec, prompt_flags.get(), instance, prompt_out, out);
    if (*templates) {
      promptkit::TemplateSet::builtin().write(template_out);
      out << "wrote " << promptkit::TemplateSet::builtin().files().size() << " templates to " << template_out << "\n";
      return kOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace attnbench::cli
