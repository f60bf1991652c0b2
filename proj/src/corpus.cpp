#include "attnbench/corpus.hpp"

#include <zlib.h>

#include <stdexcept>

#include <nlohmann/json.hpp>

#include "attnbench/errors.hpp"
#include "attnbench/text.hpp"

namespace attnbench::corpus {

using nlohmann::json;

namespace {

std::string read_all(const std::filesystem::path& path) {
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) throw IngestError("cannot open dataset: " + path.string());
  std::string data;
  char buf[1 << 16];
  int got = 0;
  while ((got = gzread(file, buf, sizeof buf)) > 0) data.append(buf, static_cast<std::size_t>(got));
  const bool failed = got < 0;
  gzclose(file);
  if (failed) throw IngestError("cannot read dataset: " + path.string());
  return data;
}

const json& field(const json& obj, const char* name, std::size_t line_no) {
  auto it = obj.find(name);
  if (it == obj.end()) throw IngestError(std::string("missing field \"") + name + "\"", line_no);
  return *it;
}

std::string string_field(const json& obj, const char* name, std::size_t line_no) {
  const json& v = field(obj, name, line_no);
  if (!v.is_string()) throw IngestError(std::string("field \"") + name + "\" must be a string", line_no);
  return v.get<std::string>();
}

Document parse_doc(const json& j, std::size_t line_no) {
  if (!j.is_object()) throw IngestError("document must be an object", line_no);
  std::string title = j.contains("title") && j["title"].is_string() ? j["title"].get<std::string>() : "";
  return Document::make(std::move(title), string_field(j, "text", line_no));
}

std::vector<std::string> parse_answers(const json& obj, std::size_t line_no) {
  const json& answers = field(obj, "answers", line_no);
  if (!answers.is_array()) throw IngestError("field \"answers\" must be an array", line_no);
  std::vector<std::string> out;
  for (const auto& a : answers) {
    if (!a.is_string()) throw IngestError("answers must be strings", line_no);
    out.push_back(a.get<std::string>());
  }
  return out;
}

std::string record_id(const json& obj, std::size_t line_no) {
  for (const char* key : {"id", "example_id"}) {
    auto it = obj.find(key);
    if (it == obj.end()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<long long>());
  }
  return "line-" + std::to_string(line_no);
}

bool contains_any(const std::string& normalized_body, const std::vector<std::string>& answers,
                  const scoring::NormalizationPolicy& policy) {
  for (const auto& a : answers) {
    const std::string n = scoring::normalize(a, policy);
    if (!n.empty() && normalized_body.find(n) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

Document Document::make(std::string title, std::string body) {
  Document d{std::move(title), std::move(body), 0};
  d.approx_tokens = text::token_count(d.body);
  return d;
}

Format format_from_string(const std::string& s) {
  if (s == "native") return Format::native;
  if (s == "liu_ctxs") return Format::liu_ctxs;
  throw SpecError("unknown dataset format: " + s);
}

std::string to_string(Format f) { return f == Format::native ? "native" : "liu_ctxs"; }

ContaminationPolicy contamination_from_string(const std::string& s) {
  if (s == "drop") return ContaminationPolicy::drop;
  if (s == "keep") return ContaminationPolicy::keep;
  throw SpecError("unknown contamination policy: " + s);
}

std::string to_string(ContaminationPolicy p) { return p == ContaminationPolicy::drop ? "drop" : "keep"; }

std::string to_string(ValidationIssue::Kind k) {
  switch (k) {
    case ValidationIssue::Kind::distractor_contains_answer:
      return "distractor_contains_answer";
    case ValidationIssue::Kind::gold_lacks_answer:
      return "gold_lacks_answer";
    case ValidationIssue::Kind::empty_body:
      return "empty_body";
  }
  return "unknown";
}

QAInstance parse_record(const std::string& line, Format format, std::size_t line_no) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    throw IngestError(std::string("malformed JSON: ") + e.what(), line_no);
  }
  if (!obj.is_object()) throw IngestError("record must be a JSON object", line_no);

  QAInstance inst;
  inst.id = record_id(obj, line_no);
  inst.question = string_field(obj, "question", line_no);
  inst.gold_answers = parse_answers(obj, line_no);

  if (format == Format::native) {
    inst.gold_doc = parse_doc(field(obj, "gold", line_no), line_no);
    const json& ds = field(obj, "distractors", line_no);
    if (!ds.is_array()) throw IngestError("field \"distractors\" must be an array", line_no);
    for (const auto& d : ds) inst.distractors.push_back(parse_doc(d, line_no));
  } else {
    const json& ctxs = field(obj, "ctxs", line_no);
    if (!ctxs.is_array()) throw IngestError("field \"ctxs\" must be an array", line_no);
    bool have_gold = false;
    for (const auto& c : ctxs) {
      if (!c.is_object()) throw IngestError("ctxs entries must be objects", line_no);
      bool gold = false;
      for (const char* key : {"isgold", "is_gold"}) {
        if (c.contains(key) && c[key].is_boolean()) gold = c[key].get<bool>();
      }
      Document doc = parse_doc(c, line_no);
      if (gold) {
        if (have_gold) throw IngestError("more than one gold ctx", line_no);
        inst.gold_doc = std::move(doc);
        have_gold = true;
      } else {
        inst.distractors.push_back(std::move(doc));
      }
    }
    if (!have_gold) throw IngestError("no ctx is marked as gold", line_no);
  }
  return inst;
}

std::vector<ValidationIssue> validate(const QAInstance& inst, const scoring::NormalizationPolicy& policy) {
  std::vector<ValidationIssue> issues;
  const auto add = [&](ValidationIssue::Kind kind, std::string detail) {
    issues.push_back({0, inst.id, kind, std::move(detail)});
  };
  if (inst.gold_doc.body.empty()) add(ValidationIssue::Kind::empty_body, "gold document");
  if (!contains_any(scoring::normalize(inst.gold_doc.body, policy), inst.gold_answers, policy)) {
    add(ValidationIssue::Kind::gold_lacks_answer, "no gold answer in gold document");
  }
  for (std::size_t i = 0; i < inst.distractors.size(); ++i) {
    const Document& d = inst.distractors[i];
    if (d.body.empty()) {
      add(ValidationIssue::Kind::empty_body, "distractor " + std::to_string(i + 1));
    } else if (contains_any(scoring::normalize(d.body, policy), inst.gold_answers, policy)) {
      add(ValidationIssue::Kind::distractor_contains_answer, "distractor " + std::to_string(i + 1));
    }
  }
  return issues;
}

IngestResult ingest(const std::filesystem::path& path, Format format, const IngestOptions& options) {
  const std::string data = read_all(path);
  IngestResult result;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < data.size()) {
    std::size_t eol = data.find('\n', pos);
    if (eol == std::string::npos) eol = data.size();
    std::string line = data.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    QAInstance inst = parse_record(line, format, line_no);
    ++result.report.records;

    std::erase_if(inst.gold_answers,
                  [&](const std::string& a) { return scoring::normalize(a, options.policy).empty(); });
    if (inst.gold_answers.empty()) throw IngestError("instance " + inst.id + " has zero gold answers", line_no);

    if (options.max_tokens) {
      inst.gold_doc = chunk(inst.gold_doc, *options.max_tokens);
      for (auto& d : inst.distractors) d = chunk(d, *options.max_tokens);
    }

    auto issues = validate(inst, options.policy);
    if (!issues.empty()) {
      ++result.report.flagged;
      for (auto& issue : issues) {
        issue.line = line_no;
        result.report.issues.push_back(std::move(issue));
      }
      if (options.contamination == ContaminationPolicy::drop) {
        ++result.report.dropped;
        continue;
      }
      inst.flagged = true;
    }
    ++result.report.accepted;
    result.instances.push_back(std::move(inst));
  }
  if (result.report.records == 0) throw IngestError("no records in " + path.string());
  return result;
}

Document chunk(const Document& doc, std::size_t max_tokens) {
  if (max_tokens == 0) throw std::invalid_argument("chunk: max_tokens must be at least 1");
  const auto spans = text::token_spans(doc.body);
  if (spans.size() <= max_tokens) return doc;
  return Document::make(doc.title, doc.body.substr(0, spans[max_tokens - 1].second));
}

ArrangedContext arrange(const QAInstance& instance, std::size_t n, std::size_t gold_position) {
  if (n == 0) throw ArrangeError("arrange: n must be at least 1");
  if (gold_position < 1 || gold_position > n) {
    throw ArrangeError("arrange: gold position " + std::to_string(gold_position) + " outside 1.." +
                       std::to_string(n));
  }
  if (instance.distractors.size() + 1 < n) {
    throw ArrangeError("arrange: instance " + instance.id + " has " + std::to_string(instance.distractors.size()) +
                       " distractors, need " + std::to_string(n - 1));
  }
  ArrangedContext ctx;
  ctx.n = n;
  ctx.gold_position = gold_position;
  ctx.docs.reserve(n);
  std::size_t next = 0;
  for (std::size_t slot = 1; slot <= n; ++slot) {
    ctx.docs.push_back(slot == gold_position ? instance.gold_doc : instance.distractors[next++]);
  }
  return ctx;
}

}  // namespace attnbench::corpus
