#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnbench/scoring.hpp"

namespace attnbench::corpus {

struct Document {
  std::string title;
  std::string body;
  std::size_t approx_tokens = 0;  // whitespace tokens in body

  static Document make(std::string title, std::string body);
  bool operator==(const Document&) const = default;
};

struct QAInstance {
  std::string id;
  std::string question;
  std::vector<std::string> gold_answers;
  Document gold_doc;
  std::vector<Document> distractors;
  // Set when validation found a problem and the instance was kept anyway.
  bool flagged = false;

  bool operator==(const QAInstance&) const = default;
};

// Documents in prompt order. `gold_position` is 1-based.
struct ArrangedContext {
  std::vector<Document> docs;
  std::size_t gold_position = 0;
  std::size_t n = 0;

  const Document& at_slot(std::size_t slot) const { return docs.at(slot - 1); }
  bool operator==(const ArrangedContext&) const = default;
};

enum class Format { native, liu_ctxs };
enum class ContaminationPolicy { drop, keep };

Format format_from_string(const std::string& s);
std::string to_string(Format f);
ContaminationPolicy contamination_from_string(const std::string& s);
std::string to_string(ContaminationPolicy p);

struct IngestOptions {
  ContaminationPolicy contamination = ContaminationPolicy::drop;
  // Chunk every document to this many whitespace tokens before validation.
  std::optional<std::size_t> max_tokens;
  scoring::NormalizationPolicy policy;
};

struct ValidationIssue {
  enum class Kind { distractor_contains_answer, gold_lacks_answer, empty_body };
  std::size_t line = 0;
  std::string instance_id;
  Kind kind = Kind::distractor_contains_answer;
  std::string detail;
};

std::string to_string(ValidationIssue::Kind k);

struct ValidationReport {
  std::size_t records = 0;
  std::size_t accepted = 0;
  std::size_t flagged = 0;  // instances with at least one issue
  std::size_t dropped = 0;
  std::vector<ValidationIssue> issues;

  bool clean() const { return flagged == 0; }
};

struct IngestResult {
  std::vector<QAInstance> instances;
  ValidationReport report;
};

// Reads a JSONL dataset (optionally gzip-compressed). Hard failures throw
// IngestError: unreadable file, no records, malformed record, zero usable
// gold answers. Contamination is reported and handled per options.
IngestResult ingest(const std::filesystem::path& path, Format format,
                    const IngestOptions& options = {});

// Parses one record; exposed for tests and streaming callers.
QAInstance parse_record(const std::string& line, Format format, std::size_t line_no);

// Problems with one instance; empty when it is clean.
std::vector<ValidationIssue> validate(const QAInstance& instance,
                                      const scoring::NormalizationPolicy& policy = {});

Document chunk(const Document& doc, std::size_t max_tokens = 100);

ArrangedContext arrange(const QAInstance& instance, std::size_t n, std::size_t gold_position);

}  // namespace attnbench::corpus
