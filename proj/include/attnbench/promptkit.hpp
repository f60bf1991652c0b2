#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbench/corpus.hpp"

namespace attnbench::promptkit {

enum class IndexScheme { none, id_ascending, id_reversed, position };
enum class InstructionKind { none, relative, absolute };
enum class PositionWord { beginning, midsection, tail };
enum class SegmentAxis { thirds, doc_ids };

std::string to_string(IndexScheme s);
std::string to_string(InstructionKind k);
std::string to_string(PositionWord w);
IndexScheme index_scheme_from_string(std::string_view s);
InstructionKind instruction_kind_from_string(std::string_view s);
PositionWord position_word_from_string(std::string_view s);

// The third of an n-document list holding `slot` (1-based).
PositionWord third_of(std::size_t slot, std::size_t n);

// The focus target named by an attention instruction: a position word or a
// document label ID.
class SegmentPhrase {
 public:
  struct DocumentId {
    std::size_t value;
    bool operator==(const DocumentId&) const = default;
    auto operator<=>(const DocumentId&) const = default;
  };

  static SegmentPhrase position(PositionWord w) { return SegmentPhrase(w); }
  static SegmentPhrase document(std::size_t id) { return SegmentPhrase(DocumentId{id}); }
  // "beginning" | "midsection" | "tail" | "doc_<id>"
  static SegmentPhrase from_key(std::string_view key);

  bool is_position_word() const { return std::holds_alternative<PositionWord>(value_); }
  bool is_document_id() const { return std::holds_alternative<DocumentId>(value_); }
  PositionWord position_word() const { return std::get<PositionWord>(value_); }
  std::size_t document_id() const { return std::get<DocumentId>(value_).value; }
  std::string key() const;

  bool operator==(const SegmentPhrase&) const = default;
  auto operator<=>(const SegmentPhrase&) const = default;

 private:
  explicit SegmentPhrase(PositionWord w) : value_(w) {}
  explicit SegmentPhrase(DocumentId d) : value_(d) {}
  std::variant<PositionWord, DocumentId> value_;
};

// Template files by name. Content is kept verbatim; a single trailing newline
// is dropped when a template is rendered.
class TemplateSet {
 public:
  static constexpr const char* kTask = "task_instruction.txt";
  static constexpr const char* kTaskClosedBook = "task_instruction_closed_book.txt";
  static constexpr const char* kAttentionRelative = "attention_relative.txt";
  static constexpr const char* kAttentionAbsoluteId = "attention_absolute_id.txt";
  static constexpr const char* kAttentionAbsolutePosition = "attention_absolute_position.txt";
  static constexpr const char* kSearchResults = "search_results.txt";
  static constexpr const char* kDocumentId = "document_id.txt";
  static constexpr const char* kDocumentPosition = "document_position.txt";
  static constexpr const char* kDocumentPlain = "document_plain.txt";
  static constexpr const char* kQuestion = "question.txt";
  static constexpr const char* kManifest = "manifest.json";

  static const TemplateSet& builtin();
  static TemplateSet load(const std::filesystem::path& dir);
  static TemplateSet from_files(std::map<std::string, std::string> files);

  // Template text with the trailing newline removed.
  std::string get(const std::string& name) const;
  const std::map<std::string, std::string>& files() const { return files_; }
  // sha256 over (name, content) pairs in name order.
  const std::string& version() const { return version_; }
  const std::string& name() const { return name_; }
  bool reconstructed() const { return reconstructed_; }

  void write(const std::filesystem::path& dir) const;

 private:
  std::map<std::string, std::string> files_;
  std::string version_;
  std::string name_;
  bool reconstructed_ = false;
};

enum class Part { task_instruction, attention_instruction, search_results, question };
std::string to_string(Part p);

// Offsets are UTF-8 byte offsets into `PromptLayout::text`.
struct PartSpan {
  Part name;
  std::size_t char_start;
  std::size_t char_end;
  bool operator==(const PartSpan&) const = default;
};

struct DocSpan {
  std::size_t slot;
  std::size_t char_start;
  std::size_t char_end;
  bool operator==(const DocSpan&) const = default;
};

struct PromptLayout {
  std::string text;
  std::array<PartSpan, 4> part_spans;
  std::vector<DocSpan> doc_spans;

  std::string_view part_text(Part p) const;
  std::string_view doc_text(std::size_t slot) const;
  bool operator==(const PromptLayout&) const = default;
};

// Layout dump read by the probe: byte offsets as char_start/char_end plus
// code-point offsets as cp_start/cp_end.
nlohmann::ordered_json layout_to_json(const PromptLayout& layout);
PromptLayout layout_from_json(const nlohmann::json& j);

std::optional<std::string> render_index_label(IndexScheme scheme, std::size_t slot, std::size_t n);

// The phrase as it appears inside an instruction, e.g. "midsection part" or
// "document 2".
std::string render_segment_phrase(InstructionKind kind, const SegmentPhrase& phrase);

std::string render_attention_instruction(InstructionKind kind, const std::optional<SegmentPhrase>& phrase,
                                         const TemplateSet& templates = TemplateSet::builtin());

// Throws PromptError when the kind/scheme/phrase triple cannot be rendered.
void check_combination(InstructionKind kind, IndexScheme scheme, const std::optional<SegmentPhrase>& phrase,
                       std::size_t n);

PromptLayout assemble_prompt(std::string_view question, const corpus::ArrangedContext& ctx, IndexScheme scheme,
                             InstructionKind kind, const std::optional<SegmentPhrase>& phrase,
                             const TemplateSet& templates = TemplateSet::builtin());

// Question only: the search_results span is empty and the closed-book task
// instruction is used.
PromptLayout assemble_closed_book_prompt(std::string_view question,
                                         const TemplateSet& templates = TemplateSet::builtin());

SegmentPhrase target_segment(std::size_t gold_position, std::size_t n, SegmentAxis axis);

// The document label ID carried by `slot` under `scheme` (ID schemes only).
std::size_t label_id(IndexScheme scheme, std::size_t slot, std::size_t n);

// Whether an instruction naming `phrase` points at the gold slot.
bool segment_matches_gold(const SegmentPhrase& phrase, std::size_t gold_position, std::size_t n,
                          IndexScheme scheme);

}  // namespace attnbench::promptkit
