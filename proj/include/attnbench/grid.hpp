#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbench/experiment_spec.hpp"
#include "attnbench/inference.hpp"

namespace attnbench::grid {

// One (gold position, attention segment) cell. Closed-book runs use gold
// position 0; runs without an instruction have no segment.
struct CellKey {
  std::size_t gold_position = 0;
  std::optional<promptkit::SegmentPhrase> segment;

  std::string segment_key() const { return segment ? segment->key() : "none"; }
  bool operator==(const CellKey&) const = default;
  auto operator<=>(const CellKey&) const = default;
};

struct InstanceRecord {
  std::string instance_id;
  CellKey cell;
  bool correct = false;
  std::string generation_digest;  // sha256 of the generated text
  double latency_ms = 0.0;
  int attempts = 0;
  std::optional<std::string> error;  // backend failure after retries

  bool ok() const { return !error.has_value(); }
  bool operator==(const InstanceRecord&) const = default;
};

nlohmann::json to_json(const InstanceRecord& r);
InstanceRecord record_from_json(const nlohmann::json& j);

struct CellResult {
  CellKey key;
  std::size_t n_expected = 0;
  std::size_t n_evaluated = 0;  // records without a backend error
  std::size_t n_correct = 0;
  std::size_t n_failed = 0;
  double accuracy = 0.0;  // n_correct / n_evaluated
  bool complete = false;
  std::vector<InstanceRecord> records;  // in sample order

  bool operator==(const CellResult&) const = default;
};

// First line of a result file.
struct ResultMeta {
  std::string spec_hash;
  std::string template_version;
  scoring::NormalizationPolicy policy;
  std::string backend_id;
  std::string timestamp;
  std::string dataset_digest;
  std::string sample_digest;
  std::vector<std::string> sample_ids;
  std::size_t n = 0;
  promptkit::InstructionKind kind = promptkit::InstructionKind::none;
  promptkit::IndexScheme scheme = promptkit::IndexScheme::none;
  Mode mode = Mode::grid;
  std::vector<std::size_t> gold_positions;
  std::vector<std::optional<promptkit::SegmentPhrase>> segments;  // {nullopt} when there is no instruction
  double max_failure_fraction = 0.0;
  std::string manifest;
  nlohmann::json spec;

  std::vector<CellKey> cells() const;
};

nlohmann::json to_json(const ResultMeta& m);
ResultMeta meta_from_json(const nlohmann::json& j);

struct ResultSet {
  ResultMeta meta;
  std::string meta_line;  // serialized metadata, preserved verbatim on resume
  std::vector<CellResult> cells;  // in axis order: gold position major, segment minor

  bool complete() const;
  const CellResult& cell(const CellKey& key) const;
  // Canonical JSONL: metadata line, then records cell by cell in sample order.
  std::string serialize() const;
};

// Deterministic fold of records into cells. Arrival order does not matter.
// A cell is complete when every sampled instance has a record and at most
// `meta.max_failure_fraction` of them are backend failures.
ResultSet aggregate(ResultMeta meta, std::string meta_line, const std::vector<InstanceRecord>& records);

ResultSet load_results(const std::filesystem::path& path);

// The instances a spec evaluates: a seeded shuffle picks `sample_size` of
// them once, and the selection is returned in dataset order.
std::vector<std::size_t> sample_indices(std::size_t population, std::optional<std::size_t> sample_size,
                                        std::uint64_t seed);

std::string file_digest(const std::filesystem::path& path);

struct RunOptions {
  // Stop after this many new records (simulates an interrupted run; the
  // result file is left unfinalized).
  std::optional<std::size_t> stop_after;
  std::function<std::string()> clock;          // metadata timestamp
  std::shared_ptr<inference::Backend> backend;  // overrides the spec's backend
};

struct RunStats {
  std::size_t executed = 0;  // work items sent to the backend
  std::size_t backend_calls = 0;
  std::size_t cache_hits = 0;
};

struct RunOutcome {
  ResultSet results;
  RunStats stats;
  bool finished = false;
};

std::shared_ptr<inference::Backend> make_backend(const ExperimentSpec& spec);

// Fresh run; refuses to overwrite an existing result file.
RunOutcome run(const ExperimentSpec& spec, const RunOptions& options = {});

// Continues a partial result file; only missing or failed (instance, cell)
// pairs are executed. Throws ResumeError when the file belongs to another spec.
RunOutcome resume(const std::filesystem::path& result_path, const ExperimentSpec& spec,
                  const RunOptions& options = {});

struct CellPrompt {
  std::string instance_id;
  CellKey cell;
  promptkit::PromptLayout layout;
};

// The prompt every cell sends for one sampled instance (the first one unless
// `instance_id` names another), in axis order.
std::vector<CellPrompt> cell_prompts(const ExperimentSpec& spec, const std::optional<std::string>& instance_id = {});

std::filesystem::path manifest_path(const std::filesystem::path& result_path);

}  // namespace attnbench::grid
